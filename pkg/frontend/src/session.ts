/** Editing session state: a history tree of latent handles.
 *
 * Every edit creates a child node, so divergent what-if edits stay
 * comparable; undo moves to the parent without discarding the branch. The
 * whole UI state is a pure function of this tree plus server responses.
 */

export interface HistoryNode {
  id: string;
  latentId: string;
  op: string; // human-readable label: "sample(seed=7)", "resample[nose]", ...
  parentId: string | null;
  gaze: [number, number];
  image: string;
}

export interface BasketItem {
  nodeId: string;
  latentId: string;
  gaze: [number, number];
  opChain: string[];
}

export class EditSession {
  readonly nodes = new Map<string, HistoryNode>();
  private rootId: string | null = null;
  private currentIdInternal: string | null = null;
  readonly basket: BasketItem[] = [];
  maskOverlay = false;
  gazePad: [number, number] = [0, 0];
  private counter = 0;

  constructor(public modelId: string) {}

  get currentId(): string | null {
    return this.currentIdInternal;
  }

  get current(): HistoryNode | null {
    return this.currentIdInternal ? (this.nodes.get(this.currentIdInternal) ?? null) : null;
  }

  private nextId(): string {
    return `n${this.counter++}`;
  }

  /** Start (or restart) the tree from a freshly sampled/inverted latent. */
  addRoot(latentId: string, op: string, gaze: [number, number], image: string): HistoryNode {
    const node: HistoryNode = { id: this.nextId(), latentId, op, parentId: null, gaze, image };
    this.nodes.set(node.id, node);
    this.rootId = node.id;
    this.currentIdInternal = node.id;
    return node;
  }

  /** Record an edit as a child of the current node and move to it. */
  addChild(latentId: string, op: string, gaze: [number, number], image: string): HistoryNode {
    if (!this.currentIdInternal) throw new Error("no active session; sample a face first");
    const node: HistoryNode = {
      id: this.nextId(),
      latentId,
      op,
      parentId: this.currentIdInternal,
      gaze,
      image,
    };
    this.nodes.set(node.id, node);
    this.currentIdInternal = node.id;
    this.checkInvariants();
    return node;
  }

  /** Update the current node's rendered state after a redirect. */
  updateCurrentRender(gaze: [number, number], image: string): void {
    const node = this.current;
    if (!node) throw new Error("no active node");
    node.gaze = gaze;
    node.image = image;
  }

  /** Move back to the parent node; returns it (or null at the root). */
  undo(): HistoryNode | null {
    const node = this.current;
    if (!node || node.parentId === null) return null;
    this.currentIdInternal = node.parentId;
    return this.current;
  }

  /** Op labels from the root down to a node. */
  opChain(nodeId: string): string[] {
    const chain: string[] = [];
    let cursor = this.nodes.get(nodeId);
    while (cursor) {
      chain.unshift(cursor.op);
      cursor = cursor.parentId ? this.nodes.get(cursor.parentId) : undefined;
    }
    return chain;
  }

  addToBasket(nodeId?: string): BasketItem {
    const id = nodeId ?? this.currentIdInternal;
    if (!id) throw new Error("nothing to add to the basket");
    const node = this.nodes.get(id);
    if (!node) throw new Error(`unknown node ${id}`);
    const item: BasketItem = {
      nodeId: node.id,
      latentId: node.latentId,
      gaze: node.gaze,
      opChain: this.opChain(node.id),
    };
    this.basket.push(item);
    return item;
  }

  toggleMask(): boolean {
    this.maskOverlay = !this.maskOverlay;
    return this.maskOverlay;
  }

  private checkInvariants(): void {
    if (!this.rootId || !this.currentIdInternal) return;
    // The current node must be reachable from the root.
    let cursor = this.nodes.get(this.currentIdInternal);
    while (cursor && cursor.parentId !== null) {
      cursor = this.nodes.get(cursor.parentId);
    }
    if (!cursor || cursor.id !== this.rootId) {
      throw new Error("history invariant violated: current node detached from root");
    }
  }
}

/** Deterministic export manifest for the basket. */
export function exportBasket(session: EditSession): string {
  const records = session.basket.map((item, index) => ({
    id: `export${String(index).padStart(4, "0")}`,
    latent_id: item.latentId,
    model_id: session.modelId,
    gaze: item.gaze,
    op_chain: item.opChain,
  }));
  return JSON.stringify({ count: records.length, records }, null, 2);
}

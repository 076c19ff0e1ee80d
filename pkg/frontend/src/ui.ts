/** DOM wiring for the editor page. All pixels come from service responses;
 * this module only routes events and paints returned PNGs. */

import { LatestWins, ServiceClient, ModelInfo } from "./api.js";
import { EditSession, exportBasket } from "./session.js";
import { GazeRange, debounce, padToGaze } from "./gazepad.js";

const EDITABLE_COMPONENTS = ["face", "eyebrows", "nose", "sclera", "iris"];

export class EditorApp {
  private session: EditSession | null = null;
  private models: ModelInfo[] = [];
  private range: GazeRange = { lo: [-0.4, -0.4], hi: [0.4, 0.4] };
  private latest = new LatestWins<void>();
  private seedCounter = 0;

  constructor(
    private client: ServiceClient,
    private root: HTMLElement,
  ) {}

  async start(): Promise<void> {
    this.models = await this.client.models();
    if (this.models.length === 0) {
      this.root.textContent = "no models loaded; start the service with --models";
      return;
    }
    const primary = this.models[0]!;
    this.range = { lo: primary.gaze_range[0] as [number, number], hi: primary.gaze_range[1] as [number, number] };
    this.session = new EditSession(primary.id);
    this.render();
    await this.sample();
  }

  private async sample(): Promise<void> {
    if (!this.session) return;
    const seed = this.seedCounter++;
    const gaze = padToGaze({ x: 0.5, y: 0.5 }, this.range).gaze;
    const payload = await this.client.generate({
      model_id: this.session.modelId,
      gaze,
      seed,
      return_mask: this.session.maskOverlay,
    });
    this.session.addRoot(payload.latent_id, `sample(seed=${seed})`, gaze, payload.image);
    this.paint(payload.image, payload.mask);
  }

  private onPadMove = debounce(async (x: number, y: number) => {
    const session = this.session;
    const node = session?.current;
    if (!session || !node) return;
    const { gaze, clamped } = padToGaze({ x, y }, this.range);
    this.setStatus(clamped ? "gaze clamped to training range" : "");
    await this.latest.run(async () => {
      try {
        const payload = await this.client.redirect({
          latent_id: node.latentId,
          gaze,
          return_mask: session.maskOverlay,
        });
        session.updateCurrentRender(gaze, payload.image);
        this.paint(payload.image, payload.mask);
      } catch (err) {
        this.toast(String(err));
      }
    });
  }, 60);

  private async resample(component: string, force = false): Promise<void> {
    const session = this.session;
    const node = session?.current;
    if (!session || !node) return;
    try {
      const payload = await this.client.edit({
        latent_id: node.latentId,
        component,
        action: "resample",
        seed: this.seedCounter++,
        force,
        return_mask: session.maskOverlay,
      });
      session.addChild(payload.latent_id, `resample[${component}]`, node.gaze, payload.image);
      this.paint(payload.image, payload.mask);
      this.renderHistory();
    } catch (err: unknown) {
      const e = err as { status?: number };
      if (e.status === 409 && !force) {
        if (window.confirm(`${component} affects the rendered gaze; resample anyway?`)) {
          await this.resample(component, true);
        }
        return;
      }
      this.toast(String(err));
    }
  }

  private async domainToggle(): Promise<void> {
    const session = this.session;
    const node = session?.current;
    if (!session || !node || this.models.length < 2) return;
    const other = this.models.find((m) => m.id !== session.modelId);
    if (!other) return;
    const home = await this.client.redirect({ latent_id: node.latentId, gaze: node.gaze });
    const away = await this.client.redirect({
      latent_id: node.latentId,
      gaze: node.gaze,
      model_id: other.id,
    });
    this.paintPair(home.image, away.image, away.mask_mse_vs_home);
  }

  private undo(): void {
    const session = this.session;
    if (!session) return;
    const node = session.undo();
    if (node) {
      this.paint(node.image);
      void this.onPadMove; // pad state follows the restored node's gaze
      session.gazePad = node.gaze;
      this.renderHistory();
    }
  }

  // -- painting helpers (canvas only; no client-side model math) ----------

  private paint(imageB64: string, maskB64?: string): void {
    const canvas = this.root.querySelector<HTMLCanvasElement>("#view");
    if (!canvas) return;
    const ctx = canvas.getContext("2d");
    if (!ctx) return;
    const img = new Image();
    img.onload = () => {
      ctx.imageSmoothingEnabled = false;
      ctx.clearRect(0, 0, canvas.width, canvas.height);
      ctx.drawImage(img, 0, 0, canvas.width, canvas.height);
      if (maskB64 && this.session?.maskOverlay) {
        const mask = new Image();
        mask.onload = () => {
          ctx.globalAlpha = 0.45;
          ctx.drawImage(mask, 0, 0, canvas.width, canvas.height);
          ctx.globalAlpha = 1.0;
        };
        mask.src = `data:image/png;base64,${maskB64}`;
      }
    };
    img.src = `data:image/png;base64,${imageB64}`;
  }

  private paintPair(homeB64: string, awayB64: string, maskMse?: number): void {
    const badge = this.root.querySelector<HTMLElement>("#mse-badge");
    if (badge) badge.textContent = maskMse === undefined ? "" : `mask MSE ${maskMse.toExponential(2)}`;
    const pair = this.root.querySelector<HTMLCanvasElement>("#pair");
    const ctx = pair?.getContext("2d");
    if (!pair || !ctx) return;
    const left = new Image();
    const right = new Image();
    left.onload = () => ctx.drawImage(left, 0, 0, pair.width / 2, pair.height);
    right.onload = () => ctx.drawImage(right, pair.width / 2, 0, pair.width / 2, pair.height);
    left.src = `data:image/png;base64,${homeB64}`;
    right.src = `data:image/png;base64,${awayB64}`;
  }

  private setStatus(text: string): void {
    const el = this.root.querySelector<HTMLElement>("#status");
    if (el) el.textContent = text;
  }

  private toast(text: string): void {
    this.setStatus(text);
    setTimeout(() => this.setStatus(""), 2500);
  }

  private renderHistory(): void {
    const session = this.session;
    const el = this.root.querySelector<HTMLElement>("#history");
    if (!session || !el) return;
    el.textContent = session.current ? session.opChain(session.current.id).join(" > ") : "";
  }

  private render(): void {
    this.root.innerHTML = `
      <div class="editor">
        <canvas id="view" width="256" height="256"></canvas>
        <canvas id="pair" width="512" height="256"></canvas>
        <div id="pad" class="pad"></div>
        <div id="status"></div>
        <div id="mse-badge"></div>
        <div id="history"></div>
        <div id="controls"></div>
        <button id="export" disabled>export basket</button>
      </div>`;
    const controls = this.root.querySelector<HTMLElement>("#controls");
    if (controls) {
      for (const component of EDITABLE_COMPONENTS) {
        const btn = document.createElement("button");
        btn.textContent = `resample ${component}`;
        btn.addEventListener("click", () => void this.resample(component));
        controls.appendChild(btn);
      }
      const sampleBtn = document.createElement("button");
      sampleBtn.textContent = "new face";
      sampleBtn.addEventListener("click", () => void this.sample());
      controls.appendChild(sampleBtn);
      const undoBtn = document.createElement("button");
      undoBtn.textContent = "undo";
      undoBtn.addEventListener("click", () => this.undo());
      controls.appendChild(undoBtn);
      const toggleBtn = document.createElement("button");
      toggleBtn.textContent = "compare domains";
      toggleBtn.disabled = this.models.length < 2;
      toggleBtn.addEventListener("click", () => void this.domainToggle());
      controls.appendChild(toggleBtn);
      const basketBtn = document.createElement("button");
      basketBtn.textContent = "add to basket";
      basketBtn.addEventListener("click", () => {
        this.session?.addToBasket();
        const exportBtn = this.root.querySelector<HTMLButtonElement>("#export");
        if (exportBtn) exportBtn.disabled = (this.session?.basket.length ?? 0) === 0;
      });
      controls.appendChild(basketBtn);
    }
    const pad = this.root.querySelector<HTMLElement>("#pad");
    pad?.addEventListener("pointermove", (ev) => {
      if ((ev as PointerEvent).buttons !== 1) return;
      const rect = (pad as HTMLElement).getBoundingClientRect();
      this.onPadMove(
        ((ev as PointerEvent).clientX - rect.left) / rect.width,
        ((ev as PointerEvent).clientY - rect.top) / rect.height,
      );
    });
    this.root.querySelector("#export")?.addEventListener("click", () => {
      if (!this.session || this.session.basket.length === 0) return;
      const blob = new Blob([exportBasket(this.session)], { type: "application/json" });
      const a = document.createElement("a");
      a.href = URL.createObjectURL(blob);
      a.download = "basket_manifest.json";
      a.click();
    });
  }
}

export function mount(baseUrl: string, rootSelector = "#app"): void {
  const root = document.querySelector<HTMLElement>(rootSelector);
  if (!root) throw new Error(`no element matches ${rootSelector}`);
  const app = new EditorApp(new ServiceClient(baseUrl), root);
  void app.start();
}

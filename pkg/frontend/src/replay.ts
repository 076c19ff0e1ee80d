/** Recorded editing sessions: a JSON list of user actions that can be
 * replayed against a client, reproducing the exact request sequence. */

import { ServiceClient } from "./api.js";
import { EditSession, exportBasket } from "./session.js";
import { GazeRange, padToGaze } from "./gazepad.js";

export type SessionAction =
  | { type: "sample"; seed: number }
  | { type: "gaze_drag"; x: number; y: number }
  | { type: "resample"; component: string; seed: number; force?: boolean }
  | { type: "undo" }
  | { type: "domain_toggle"; other_model: string }
  | { type: "mask_toggle" }
  | { type: "basket_add" }
  | { type: "export" };

export interface ReplayResult {
  session: EditSession;
  exports: string[]; // export manifests produced by "export" actions
}

/** Execute actions sequentially; the client's requestLog records the wire
 * traffic. Replaying the same actions against the same responses must give
 * an identical log. */
export async function replaySession(
  actions: SessionAction[],
  client: ServiceClient,
  modelId: string,
  range: GazeRange,
): Promise<ReplayResult> {
  const session = new EditSession(modelId);
  const exports: string[] = [];

  for (const action of actions) {
    switch (action.type) {
      case "sample": {
        const gaze = padToGaze({ x: 0.5, y: 0.5 }, range).gaze;
        const payload = await client.generate({
          model_id: modelId,
          gaze,
          seed: action.seed,
          return_mask: session.maskOverlay,
        });
        session.addRoot(payload.latent_id, `sample(seed=${action.seed})`, gaze, payload.image);
        session.gazePad = gaze;
        break;
      }
      case "gaze_drag": {
        const node = session.current;
        if (!node) throw new Error("gaze_drag before sample");
        const { gaze } = padToGaze({ x: action.x, y: action.y }, range);
        const payload = await client.redirect({
          latent_id: node.latentId,
          gaze,
          return_mask: session.maskOverlay,
        });
        session.updateCurrentRender(gaze, payload.image);
        session.gazePad = gaze;
        break;
      }
      case "resample": {
        const node = session.current;
        if (!node) throw new Error("resample before sample");
        const payload = await client.edit({
          latent_id: node.latentId,
          component: action.component,
          action: "resample",
          seed: action.seed,
          force: action.force ?? false,
          return_mask: session.maskOverlay,
        });
        session.addChild(payload.latent_id, `resample[${action.component}]`, node.gaze, payload.image);
        break;
      }
      case "undo": {
        session.undo();
        break;
      }
      case "domain_toggle": {
        const node = session.current;
        if (!node) throw new Error("domain_toggle before sample");
        // Same latent and gaze rendered by both models, side by side.
        await client.redirect({ latent_id: node.latentId, gaze: node.gaze });
        await client.redirect({
          latent_id: node.latentId,
          gaze: node.gaze,
          model_id: action.other_model,
        });
        break;
      }
      case "mask_toggle": {
        session.toggleMask();
        break;
      }
      case "basket_add": {
        session.addToBasket();
        break;
      }
      case "export": {
        exports.push(exportBasket(session));
        break;
      }
      default: {
        const exhaustive: never = action;
        throw new Error(`unknown action ${JSON.stringify(exhaustive)}`);
      }
    }
  }
  return { session, exports };
}

/** Gaze pad geometry: linear map between pad coordinates and gaze angles. */

export interface GazeRange {
  lo: [number, number]; // [yaw_min, pitch_min]
  hi: [number, number];
}

export interface PadPoint {
  x: number; // 0..1 across the pad, left to right
  y: number; // 0..1 top to bottom
}

/** Pad center maps to the range midpoint; corners map to the extremes.
 * Out-of-pad positions clamp to the range boundary (reported via clamped). */
export function padToGaze(point: PadPoint, range: GazeRange): { gaze: [number, number]; clamped: boolean } {
  const x = Math.min(1, Math.max(0, point.x));
  const y = Math.min(1, Math.max(0, point.y));
  const clamped = x !== point.x || y !== point.y;
  const yaw = range.lo[0] + x * (range.hi[0] - range.lo[0]);
  const pitch = range.lo[1] + y * (range.hi[1] - range.lo[1]);
  return { gaze: [yaw, pitch], clamped };
}

export function gazeToPad(gaze: [number, number], range: GazeRange): PadPoint {
  const span0 = range.hi[0] - range.lo[0] || 1;
  const span1 = range.hi[1] - range.lo[1] || 1;
  return { x: (gaze[0] - range.lo[0]) / span0, y: (gaze[1] - range.lo[1]) / span1 };
}

/** Trailing-edge debounce used while dragging the pad. */
export function debounce<A extends unknown[]>(fn: (...args: A) => void, waitMs: number) {
  let handle: ReturnType<typeof setTimeout> | undefined;
  return (...args: A) => {
    if (handle !== undefined) clearTimeout(handle);
    handle = setTimeout(() => fn(...args), waitMs);
  };
}

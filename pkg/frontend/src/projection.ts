// Equirectangular sampling math, mirrored by the WebGL fragment shader.
// Keeping it in TypeScript makes "two view states render the same frame"
// a pure unit test.

import type { ViewState } from "./state.js";
import { wrapYaw } from "./state.js";

const DEG = Math.PI / 180;

export type Vec3 = [number, number, number];

/** Unit view direction for a yaw/pitch pair (yaw 0 looks along +z, grows eastward). */
export function yawPitchToDir(yawDeg: number, pitchDeg: number): Vec3 {
  const yaw = wrapYaw(yawDeg) * DEG;
  const pitch = pitchDeg * DEG;
  const c = Math.cos(pitch);
  return [c * Math.sin(yaw), Math.sin(pitch), c * Math.cos(yaw)];
}

/** Texture coordinates of a direction: u wraps yaw over [0,1), v runs top (+90) to bottom (-90). */
export function dirToEquirectUV(dir: Vec3): [number, number] {
  const [x, y, z] = dir;
  const yaw = Math.atan2(x, z); // [-pi, pi]
  const pitch = Math.asin(Math.max(-1, Math.min(1, y)));
  const u = ((yaw / (2 * Math.PI)) % 1 + 1) % 1;
  const v = 0.5 - pitch / Math.PI;
  return [u, v];
}

/** Ray direction through a screen point (sx, sy in [-1, 1], y up) for the view. */
export function viewRayDir(state: ViewState, sx: number, sy: number, aspect: number): Vec3 {
  const halfTan = Math.tan((state.fov / 2) * DEG);
  // camera space: x right, y up, -z forward... use +z forward to match yawPitchToDir
  const cx = sx * halfTan * aspect;
  const cy = sy * halfTan;
  const yaw = wrapYaw(state.yaw) * DEG;
  const pitch = state.pitch * DEG;
  const cosYaw = Math.cos(yaw), sinYaw = Math.sin(yaw);
  const cosP = Math.cos(pitch), sinP = Math.sin(pitch);
  // rotate (cx, cy, 1): pitch about x, then yaw about y
  const y1 = cy * cosP + sinP;
  const z1 = -cy * sinP + cosP;
  const x2 = cx * cosYaw + z1 * sinYaw;
  const z2 = -cx * sinYaw + z1 * cosYaw;
  const n = Math.hypot(x2, y1, z2);
  return [x2 / n, y1 / n, z2 / n];
}

/** Sample a grid of texture coordinates for the whole frame: the pure-logic
 * stand-in for rendering, used to compare frames across view states. */
export function frameSampleUVs(state: ViewState, gridW: number, gridH: number, aspect = 2.0): Float64Array {
  const out = new Float64Array(gridW * gridH * 2);
  let i = 0;
  for (let gy = 0; gy < gridH; gy++) {
    const sy = 1 - 2 * (gy + 0.5) / gridH;
    for (let gx = 0; gx < gridW; gx++) {
      const sx = 2 * (gx + 0.5) / gridW - 1;
      const [u, v] = dirToEquirectUV(viewRayDir(state, sx, sy, aspect));
      out[i++] = u;
      out[i++] = v;
    }
  }
  return out;
}

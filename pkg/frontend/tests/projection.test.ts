import { describe, expect, it } from "vitest";

import { dirToEquirectUV, frameSampleUVs, yawPitchToDir } from "../src/projection.js";
import { DEFAULT_FOV } from "../src/state.js";

describe("direction math", () => {
  it("yaw 0 pitch 0 looks along +z and samples the texture centre column", () => {
    const dir = yawPitchToDir(0, 0);
    expect(dir[2]).toBeCloseTo(1, 12);
    const [u, v] = dirToEquirectUV(dir);
    expect(u).toBeCloseTo(0, 12);
    expect(v).toBeCloseTo(0.5, 12);
  });

  it("uv tracks yaw linearly", () => {
    for (const yaw of [45, 90, 180, 270]) {
      const [u] = dirToEquirectUV(yawPitchToDir(yaw, 0));
      expect(u).toBeCloseTo(yaw / 360, 10);
    }
  });

  it("pitch maps to the vertical coordinate", () => {
    const [, vUp] = dirToEquirectUV(yawPitchToDir(0, 45));
    const [, vDown] = dirToEquirectUV(yawPitchToDir(0, -45));
    expect(vUp).toBeCloseTo(0.25, 10);
    expect(vDown).toBeCloseTo(0.75, 10);
  });
});

describe("frame identity at the wrap seam", () => {
  it("yaw 0 and yaw 360 render identical frames", () => {
    const a = frameSampleUVs({ yaw: 0, pitch: 0, fov: DEFAULT_FOV }, 16, 9);
    const b = frameSampleUVs({ yaw: 360, pitch: 0, fov: DEFAULT_FOV }, 16, 9);
    expect(Array.from(b)).toEqual(Array.from(a));
  });

  it("other yaws do change the frame", () => {
    const a = frameSampleUVs({ yaw: 0, pitch: 0, fov: DEFAULT_FOV }, 8, 5);
    const c = frameSampleUVs({ yaw: 90, pitch: 0, fov: DEFAULT_FOV }, 8, 5);
    expect(Array.from(c)).not.toEqual(Array.from(a));
  });

  it("clamped pitch never samples outside [0, 1] vertically", () => {
    const uv = frameSampleUVs({ yaw: 10, pitch: 50, fov: DEFAULT_FOV }, 12, 12);
    for (let i = 1; i < uv.length; i += 2) {
      expect(uv[i]).toBeGreaterThanOrEqual(0);
      expect(uv[i]).toBeLessThanOrEqual(1);
    }
  });
});

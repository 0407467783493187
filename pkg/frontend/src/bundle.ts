// Bundle contract: panorama.png + panorama.json as written by the pipeline's
// panorama command. The image must be exactly 2:1 (width = 2 * height).

export interface SceneAnchor {
  index: number;
  anchor_yaw: number;
}

export interface Seam {
  yaw: number;
  prompt: string;
}

export interface BundleMeta {
  image: string;
  width: number;
  height: number;
  band_fraction: number;
  seed: number;
  scenes: SceneAnchor[];
  seams: Seam[];
  initial_yaw: number;
  initial_pitch: number;
}

export class BundleError extends Error {}

export function validateBundle(meta: BundleMeta, imageWidth: number, imageHeight: number): BundleMeta {
  if (imageWidth !== 2 * imageHeight) {
    throw new BundleError(
      `panorama must be 2:1 equirectangular, got ${imageWidth}x${imageHeight}`,
    );
  }
  if (meta.width !== imageWidth || meta.height !== imageHeight) {
    throw new BundleError(
      `metadata size ${meta.width}x${meta.height} does not match image ${imageWidth}x${imageHeight}`,
    );
  }
  if (!(meta.band_fraction > 0 && meta.band_fraction <= 1)) {
    throw new BundleError(`band_fraction ${meta.band_fraction} outside (0, 1]`);
  }
  for (const scene of meta.scenes) {
    if (scene.anchor_yaw < 0 || scene.anchor_yaw >= 360) {
      throw new BundleError(`scene ${scene.index} anchor yaw ${scene.anchor_yaw} outside [0, 360)`);
    }
  }
  for (const seam of meta.seams) {
    if (seam.yaw < 0 || seam.yaw >= 360) {
      throw new BundleError(`seam yaw ${seam.yaw} outside [0, 360)`);
    }
  }
  return meta;
}

/** The seam within `tolerance` degrees of the yaw, if any (for the boundary overlay). */
export function seamNear(yawDeg: number, seams: Seam[], tolerance = 4): Seam | null {
  for (const seam of seams) {
    let d = Math.abs(((yawDeg - seam.yaw) % 360 + 360) % 360);
    d = Math.min(d, 360 - d);
    if (d <= tolerance) return seam;
  }
  return null;
}

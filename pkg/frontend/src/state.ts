// Pure view-state logic: (state, event) -> state, no side effects.
// Yaw wraps modulo 360; pitch is clamped to the panorama's vertical band
// plus a 5 degree allowance, so the camera never samples the flat fill
// tones head-on.

import type { BundleMeta } from "./bundle.js";

export interface ViewState {
  yaw: number; // degrees, [0, 360)
  pitch: number; // degrees, positive looks up
  fov: number; // vertical field of view, degrees
}

export type ViewEvent =
  | { type: "drag"; dx: number; dy: number }
  | { type: "key"; key: string };

export const DRAG_DEG_PER_PIXEL = 0.2;
export const KEY_STEP_DEG = 5;
export const PITCH_ALLOWANCE_DEG = 5;
export const DEFAULT_FOV = 75;

export function wrapYaw(yaw: number): number {
  const m = yaw % 360;
  return m < 0 ? m + 360 : m; // single correction keeps in-range yaws bit-exact
}

/** The band covers the central `fraction` of image height, i.e. +/-90*fraction
 * degrees of pitch; the camera may tilt 5 degrees beyond it. */
export function pitchLimit(bandFraction: number): number {
  return 90 * bandFraction + PITCH_ALLOWANCE_DEG;
}

export function clampPitch(pitch: number, bandFraction: number): number {
  const limit = pitchLimit(bandFraction);
  return Math.max(-limit, Math.min(limit, pitch));
}

export function initialState(meta: BundleMeta): ViewState {
  return {
    yaw: wrapYaw(meta.initial_yaw),
    pitch: clampPitch(meta.initial_pitch, meta.band_fraction),
    fov: DEFAULT_FOV,
  };
}

export function update(state: ViewState, event: ViewEvent, meta: BundleMeta): ViewState {
  if (event.type === "drag") {
    if (event.dx === 0 && event.dy === 0) {
      return state;
    }
    return {
      ...state,
      yaw: wrapYaw(state.yaw - event.dx * DRAG_DEG_PER_PIXEL),
      pitch: clampPitch(state.pitch + event.dy * DRAG_DEG_PER_PIXEL, meta.band_fraction),
    };
  }
  if (event.key === "ArrowLeft") {
    return { ...state, yaw: wrapYaw(state.yaw - KEY_STEP_DEG) };
  }
  if (event.key === "ArrowRight") {
    return { ...state, yaw: wrapYaw(state.yaw + KEY_STEP_DEG) };
  }
  const digit = Number.parseInt(event.key, 10);
  if (Number.isInteger(digit) && digit >= 1 && digit <= meta.scenes.length) {
    return { ...state, yaw: wrapYaw(meta.scenes[digit - 1].anchor_yaw) };
  }
  return state;
}

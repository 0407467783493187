// Entry point: load panorama.json + panorama.png from the bundle directory
// (same directory as index.html by default, or ?bundle=path), then wire
// pointer and keyboard controls into the pure state reducer.

import { BundleMeta, seamNear, validateBundle } from "./bundle.js";
import { Renderer } from "./render.js";
import { ViewState, initialState, update } from "./state.js";

function hud(meta: BundleMeta, state: ViewState): string {
  const seam = seamNear(state.yaw, meta.seams);
  const lines = [
    `yaw ${state.yaw.toFixed(1)} deg, pitch ${state.pitch.toFixed(1)} deg`,
    `scenes: ${meta.scenes.map((s) => `${s.index + 1}@${s.anchor_yaw.toFixed(0)} deg`).join("  ")}`,
    "drag to look, arrows step 5 deg, number keys jump to scenes",
  ];
  if (seam) {
    lines.unshift(`scene boundary: "${seam.prompt}"`);
  }
  return lines.join("\n");
}

async function boot() {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("bundle") ?? ".";
  const overlay = document.getElementById("overlay") as HTMLPreElement;
  const canvas = document.getElementById("view") as HTMLCanvasElement;
  try {
    const meta = (await (await fetch(`${base}/panorama.json`)).json()) as BundleMeta;
    const image = new Image();
    image.src = `${base}/${meta.image}`;
    await image.decode();
    validateBundle(meta, image.naturalWidth, image.naturalHeight);

    const renderer = new Renderer(canvas);
    renderer.setTexture(image);
    let state = initialState(meta);
    let frame = 0;
    const redraw = () => {
      if (frame) return;
      frame = requestAnimationFrame(() => {
        frame = 0;
        renderer.draw(state);
        overlay.textContent = hud(meta, state);
      });
    };

    let dragging = false;
    let lastX = 0;
    let lastY = 0;
    canvas.addEventListener("pointerdown", (e) => {
      dragging = true;
      lastX = e.clientX;
      lastY = e.clientY;
      canvas.setPointerCapture(e.pointerId);
    });
    canvas.addEventListener("pointermove", (e) => {
      if (!dragging) return;
      state = update(state, { type: "drag", dx: e.clientX - lastX, dy: e.clientY - lastY }, meta);
      lastX = e.clientX;
      lastY = e.clientY;
      redraw();
    });
    canvas.addEventListener("pointerup", () => {
      dragging = false;
    });
    window.addEventListener("keydown", (e) => {
      state = update(state, { type: "key", key: e.key }, meta);
      redraw();
    });
    window.addEventListener("resize", redraw);
    redraw();
  } catch (err) {
    overlay.textContent = `failed to load bundle: ${err}`;
    throw err;
  }
}

boot();

/**
 * Canvas display: nearest-neighbor upscale of streamed frames plus a light
 * overlay drawn from the locally known pose (wrist markers only; the full
 * skeleton lives server-side in the conditioning renders).
 */

import { FrameChunk } from "./protocol.js";
import { HandState, OrbitState, orbitCameraVector } from "./pose.js";

export function frameToImageData(chunk: FrameChunk, frame: number): ImageData {
  if (frame < 0 || frame >= chunk.frames) throw new RangeError("frame out of chunk");
  const n = chunk.height * chunk.width;
  const rgba = new Uint8ClampedArray(n * 4);
  const base = frame * n * 3;
  for (let i = 0; i < n; i++) {
    rgba[i * 4] = chunk.pixels[base + i * 3];
    rgba[i * 4 + 1] = chunk.pixels[base + i * 3 + 1];
    rgba[i * 4 + 2] = chunk.pixels[base + i * 3 + 2];
    rgba[i * 4 + 3] = 255;
  }
  return new ImageData(rgba, chunk.width, chunk.height);
}

/** Pixel position of a world point under the current orbit camera, or null
 * when it is behind the camera. */
export function projectPoint(
  world: [number, number, number],
  orbit: OrbitState,
  intrinsics: Float32Array,
): [number, number] | null {
  const m = orbitCameraVector(orbit);
  const x = m[0] * world[0] + m[1] * world[1] + m[2] * world[2] + m[9];
  const y = m[3] * world[0] + m[4] * world[1] + m[5] * world[2] + m[10];
  const z = m[6] * world[0] + m[7] * world[1] + m[8] * world[2] + m[11];
  if (z <= 1e-6) return null;
  return [
    (intrinsics[0] * x) / z + intrinsics[2],
    (intrinsics[1] * y) / z + intrinsics[3],
  ];
}

export interface OverlayOptions {
  enabled: boolean;
  scale: number; // canvas pixels per frame pixel
}

export function drawChunkFrame(
  ctx: CanvasRenderingContext2D,
  chunk: FrameChunk,
  frame: number,
  scratch: HTMLCanvasElement,
  opts: OverlayOptions,
  hands: { left: HandState; right: HandState },
  orbit: OrbitState,
  intrinsics: Float32Array,
): void {
  const img = frameToImageData(chunk, frame);
  scratch.width = chunk.width;
  scratch.height = chunk.height;
  const sctx = scratch.getContext("2d");
  if (!sctx) return;
  sctx.putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(
    scratch,
    0,
    0,
    chunk.width * opts.scale,
    chunk.height * opts.scale,
  );
  if (!opts.enabled) return;
  ctx.save();
  for (const [hand, color] of [
    [hands.left, "#4ade80"],
    [hands.right, "#60a5fa"],
  ] as const) {
    const uv = projectPoint(hand.wristPos, orbit, intrinsics);
    if (!uv) continue;
    ctx.strokeStyle = color;
    ctx.lineWidth = 1.5;
    const [u, v] = [uv[0] * opts.scale, uv[1] * opts.scale];
    ctx.beginPath();
    ctx.moveTo(u - 6, v);
    ctx.lineTo(u + 6, v);
    ctx.moveTo(u, v - 6);
    ctx.lineTo(u, v + 6);
    ctx.stroke();
  }
  ctx.restore();
}

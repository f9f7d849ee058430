/**
 * Browser entry point: connects to the streaming gateway over a WebSocket,
 * drives a fixed-rate pose tick loop from the current orbit/gesture UI state,
 * and plays received frame chunks with a HUD of fps / latency / staleness.
 */

import { ClientSession, nextTickDelayMs } from "./session.js";
import { FrameChunk } from "./protocol.js";
import { GESTURE_PRESETS, GestureName } from "./pose.js";
import { drawChunkFrame } from "./render.js";

interface PendingChunk {
  chunk: FrameChunk;
  poseSeq: number | null;
  stalenessMs: number | null;
}

function param(name: string, fallback: string): string {
  const v = new URLSearchParams(window.location.search).get(name);
  return v === null || v === "" ? fallback : v;
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function main(): void {
  const host = param("host", window.location.hostname || "127.0.0.1");
  const port = param("port", "8765");
  const tickHz = Number(param("tick", "16"));
  const canvas = el<HTMLCanvasElement>("view");
  const hudNode = el<HTMLElement>("hud");
  const statusNode = el<HTMLElement>("status");
  const overlayBox = el<HTMLInputElement>("overlay");
  const blendSlider = el<HTMLInputElement>("blend");
  const leftSelect = el<HTMLSelectElement>("left-gesture");
  const rightSelect = el<HTMLSelectElement>("right-gesture");
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("2d canvas unavailable");
  const scratch = document.createElement("canvas");

  const url = `ws://${host}:${port}/stream`;
  const ws = new WebSocket(url);
  ws.binaryType = "arraybuffer";

  // Playback queue: chunks are shown in arrival order, one frame per paint.
  const queue: PendingChunk[] = [];
  let current: PendingChunk | null = null;
  let frameIdx = 0;
  let warning = "";

  const session = new ClientSession(
    { send: (data) => ws.send(data) },
    {
      onHello(info) {
        statusNode.textContent = `connected: ${JSON.stringify(info)}`;
      },
      onChunk(chunk, stats) {
        queue.push({
          chunk,
          poseSeq: stats ? Number(stats.pose_seq) : null,
          stalenessMs: stats ? Number(stats.staleness_ms) : null,
        });
      },
      onServerError(message) {
        statusNode.textContent = `server error: ${message}`;
      },
    },
    { tickHz, nowMs: () => performance.now() },
  );

  ws.onmessage = (ev) => session.handleData(new Uint8Array(ev.data as ArrayBuffer));
  ws.onclose = () => {
    statusNode.textContent = "disconnected";
  };
  ws.onerror = () => {
    statusNode.textContent = `websocket error (${url})`;
  };

  // Pose tick loop: strictly increasing seq at the requested rate. setTimeout
  // re-arms against the ideal schedule so drift does not accumulate.
  let tickIndex = 0;
  let t0 = 0;
  const tickLoop = (): void => {
    if (ws.readyState === WebSocket.OPEN) {
      session.tick();
      tickIndex += 1;
    }
    const delay = nextTickDelayMs(t0, tickIndex, session.tickPeriodMs, performance.now());
    window.setTimeout(tickLoop, delay);
  };
  ws.onopen = () => {
    statusNode.textContent = "connected, waiting for hello";
    t0 = performance.now();
    tickLoop();
  };

  // Render loop: advance through the current chunk frame by frame.
  const renderLoop = (): void => {
    if (!current || frameIdx >= current.chunk.frames) {
      const next = queue.shift();
      if (next) {
        if (session.hud.hasGapBefore(next.chunk.index)) {
          warning = `gap before chunk ${next.chunk.index}`;
        }
        current = next;
        frameIdx = 0;
        session.hud.chunkShown(
          next.chunk.index,
          next.chunk.frames,
          next.poseSeq,
          next.stalenessMs,
          performance.now(),
        );
      }
    }
    if (current && frameIdx < current.chunk.frames) {
      const scale = Math.max(1, Math.floor(canvas.width / current.chunk.width));
      drawChunkFrame(
        ctx,
        current.chunk,
        frameIdx,
        scratch,
        { enabled: overlayBox.checked, scale },
        { left: session.leftHand, right: session.rightHand },
        session.orbit,
        session.intrinsics,
      );
      frameIdx += 1;
    }
    const snap = session.hud.snapshot(performance.now());
    hudNode.textContent =
      `fps ${snap.fps === null ? "-" : snap.fps.toFixed(1)}` +
      ` | latency ${snap.latencyMs === null ? "-" : snap.latencyMs.toFixed(0) + "ms"}` +
      ` | staleness ${snap.stalenessMs === null ? "-" : snap.stalenessMs.toFixed(0) + "ms"}` +
      ` | chunks ${snap.chunksShown} | gaps ${snap.indexGaps}` +
      (warning ? ` | ${warning}` : "");
    window.requestAnimationFrame(renderLoop);
  };
  window.requestAnimationFrame(renderLoop);

  // Orbit: drag to rotate, wheel to zoom.
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
    session.rotateOrbit((e.clientX - lastX) * 0.01, (e.clientY - lastY) * 0.01);
    lastX = e.clientX;
    lastY = e.clientY;
  });
  canvas.addEventListener("pointerup", () => {
    dragging = false;
  });
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    session.zoomOrbit(e.deltaY > 0 ? 1.05 : 1 / 1.05);
  });

  // Gesture controls: target preset per hand plus a shared blend slider.
  for (const select of [leftSelect, rightSelect]) {
    for (const name of Object.keys(GESTURE_PRESETS)) {
      const opt = document.createElement("option");
      opt.value = name;
      opt.textContent = name;
      select.appendChild(opt);
    }
  }
  leftSelect.value = "grip";
  rightSelect.value = "pinch";
  const applyGesture = (): void => {
    session.setGesture("left", leftSelect.value as GestureName, Number(blendSlider.value));
    session.setGesture("right", rightSelect.value as GestureName, Number(blendSlider.value));
  };
  blendSlider.addEventListener("input", applyGesture);
  leftSelect.addEventListener("change", applyGesture);
  rightSelect.addEventListener("change", applyGesture);

  el<HTMLButtonElement>("reset").addEventListener("click", () => {
    session.requestReset();
    queue.length = 0;
    current = null;
    frameIdx = 0;
    warning = "";
  });
}

main();

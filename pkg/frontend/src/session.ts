/**
 * Client session: owns the pose tick, the wire decoder, and the HUD log.
 * Transport-agnostic so the browser WebSocket and the node test client share
 * one implementation; the transport just moves bytes.
 */

import { LatencyHud } from "./hud.js";
import {
  FrameChunk,
  MSG_ERROR,
  MSG_FRAME_CHUNK,
  MSG_HELLO,
  MSG_POSE_UPDATE,
  MSG_RESET,
  MSG_STATS,
  MessageDecoder,
  decodeFrameChunk,
  decodeJsonPayload,
  encodeMessage,
  encodePoseUpdate,
} from "./protocol.js";
import {
  GestureName,
  HandState,
  OrbitState,
  buildHpp,
  defaultHand,
  defaultOrbit,
  orbitCameraVector,
} from "./pose.js";

export interface Transport {
  send(data: Uint8Array): void;
}

/** Per-chunk stats the service sends right after each FrameChunk. */
export interface ChunkStats {
  chunk_index?: number;
  chunk_ms?: number;
  cond_ms?: number;
  fps?: number;
  staleness_ms?: number;
  pose_seq?: number;
  pose_timestamp_us?: number;
  dropped?: number;
  [key: string]: unknown;
}

export interface SessionEvents {
  onHello?(hello: Record<string, unknown>): void;
  /** A chunk paired with its stats; stats is null when the server never sent
   * them (playback still proceeds). */
  onChunk?(chunk: FrameChunk, stats: ChunkStats | null, recvMs: number): void;
  onStats?(stats: ChunkStats, recvMs: number): void;
  onServerError?(message: string): void;
}

export interface SessionConfig {
  tickHz?: number;
  intrinsics?: Float32Array; // fx fy cx cy
  nowMs?: () => number;
}

/** Drift-free tick schedule: delay until tick k of a period grid. */
export function nextTickDelayMs(
  startMs: number,
  tickIndex: number,
  periodMs: number,
  nowMs: number,
): number {
  return Math.max(0, startMs + tickIndex * periodMs - nowMs);
}

const MAX_ELEVATION = 1.4;

export class ClientSession {
  readonly hud = new LatencyHud();
  readonly tickPeriodMs: number;
  readonly intrinsics: Float32Array;
  leftHand: HandState = defaultHand(true);
  rightHand: HandState = defaultHand(false);
  orbit: OrbitState = defaultOrbit();
  hello: Record<string, unknown> | null = null;

  private readonly transport: Transport;
  private readonly events: SessionEvents;
  private readonly decoder = new MessageDecoder();
  private readonly nowMs: () => number;
  private seq = 0;
  private pendingChunk: FrameChunk | null = null;

  constructor(transport: Transport, events: SessionEvents = {}, cfg: SessionConfig = {}) {
    this.transport = transport;
    this.events = events;
    this.tickPeriodMs = 1000 / (cfg.tickHz ?? 16);
    this.intrinsics = cfg.intrinsics ?? Float32Array.from([48, 48, 24, 24]);
    this.nowMs = cfg.nowMs ?? (() => Date.now());
  }

  get lastSeq(): number {
    return this.seq;
  }

  /** Serializes the current pose state and sends one PoseUpdate. Sequence
   * numbers are strictly increasing for the life of the session. */
  tick(): number {
    this.seq += 1;
    const atMs = this.nowMs();
    const payload = encodePoseUpdate({
      seq: BigInt(this.seq),
      timestampUs: BigInt(Math.round(atMs * 1000)),
      hpp: buildHpp(this.leftHand, this.rightHand),
      camera: orbitCameraVector(this.orbit),
      intrinsics: this.intrinsics,
    });
    this.transport.send(encodeMessage(MSG_POSE_UPDATE, payload));
    this.hud.poseSent(this.seq, atMs);
    return this.seq;
  }

  requestReset(): void {
    this.transport.send(encodeMessage(MSG_RESET, new Uint8Array(0)));
  }

  setGesture(hand: "left" | "right", target: GestureName, blend: number): void {
    const h = hand === "left" ? this.leftHand : this.rightHand;
    h.gestureTo = target;
    h.blend = Math.min(1, Math.max(0, blend));
  }

  rotateOrbit(dAzimuthRad: number, dElevationRad: number): void {
    this.orbit.azimuthRad += dAzimuthRad;
    this.orbit.elevationRad = Math.min(
      MAX_ELEVATION,
      Math.max(-MAX_ELEVATION, this.orbit.elevationRad + dElevationRad),
    );
  }

  zoomOrbit(factor: number): void {
    this.orbit.radius = Math.min(3.0, Math.max(0.15, this.orbit.radius * factor));
  }

  /** Feed raw bytes from the transport; dispatches decoded messages. */
  handleData(data: Uint8Array): void {
    for (const { msgType, payload } of this.decoder.feed(data)) {
      const recvMs = this.nowMs();
      switch (msgType) {
        case MSG_HELLO: {
          this.hello = decodeJsonPayload(payload);
          this.events.onHello?.(this.hello);
          break;
        }
        case MSG_FRAME_CHUNK: {
          if (this.pendingChunk) {
            // stats for the previous chunk never came; deliver it unpaired
            this.events.onChunk?.(this.pendingChunk, null, recvMs);
          }
          this.pendingChunk = decodeFrameChunk(payload);
          break;
        }
        case MSG_STATS: {
          const stats = decodeJsonPayload(payload) as ChunkStats;
          if (
            this.pendingChunk !== null &&
            Number(stats.chunk_index) === this.pendingChunk.index
          ) {
            const chunk = this.pendingChunk;
            this.pendingChunk = null;
            this.events.onChunk?.(chunk, stats, recvMs);
          } else {
            this.events.onStats?.(stats, recvMs);
          }
          break;
        }
        case MSG_ERROR: {
          const doc = decodeJsonPayload(payload);
          this.events.onServerError?.(String(doc.error ?? "unknown server error"));
          break;
        }
        default:
          // unknown or client-bound-only types are ignored, stream continues
          break;
      }
    }
  }
}

/**
 * Binary wire protocol shared with the pose-streaming service.
 *
 * Framing: u32 little-endian payload length, u8 message type, payload.
 * The framing is transport-agnostic; over a WebSocket each binary frame
 * carries exactly one framed message, bytes preserved.
 */

export const MSG_HELLO = 0;
export const MSG_POSE_UPDATE = 1;
export const MSG_FRAME_CHUNK = 2;
export const MSG_STATS = 3;
export const MSG_ERROR = 4;
export const MSG_RESET = 5;

export const HPP_FLOATS = 52;
export const CAMERA_FLOATS = 12;
export const INTRINSIC_FLOATS = 4;
export const POSE_FLOATS = HPP_FLOATS + CAMERA_FLOATS + INTRINSIC_FLOATS;
/** u64 seq + u64 timestamp_us + 68 f32. */
export const POSE_PAYLOAD_BYTES = 8 + 8 + 4 * POSE_FLOATS;
export const CHUNK_HEADER_BYTES = 16;
export const HEADER_BYTES = 5;
export const MAX_PAYLOAD_BYTES = 1 << 24;

export class WireError extends Error {}

export interface PoseUpdate {
  seq: bigint;
  timestampUs: bigint;
  hpp: Float32Array; // (52,)
  camera: Float32Array; // (12,) row-major world-to-camera R then t
  intrinsics: Float32Array; // (4,) fx fy cx cy
}

export interface FrameChunk {
  index: number;
  frames: number;
  height: number;
  width: number;
  /** frame-major RGB, row-major pixels: frames*height*width*3 bytes. */
  pixels: Uint8Array;
}

export function encodeMessage(msgType: number, payload: Uint8Array): Uint8Array {
  if (!Number.isInteger(msgType) || msgType < 0 || msgType > 255) {
    throw new WireError("message type must fit in one byte");
  }
  if (payload.byteLength > MAX_PAYLOAD_BYTES) {
    throw new WireError("payload too large");
  }
  const out = new Uint8Array(HEADER_BYTES + payload.byteLength);
  const view = new DataView(out.buffer);
  view.setUint32(0, payload.byteLength, true);
  view.setUint8(4, msgType);
  out.set(payload, HEADER_BYTES);
  return out;
}

export interface WireMessage {
  msgType: number;
  payload: Uint8Array;
}

/**
 * Incremental decoder for the length-prefixed framing. feed() returns every
 * complete message buffered so far and keeps the remainder. An advertised
 * length beyond the cap raises: framing is unrecoverable at that point.
 */
export class MessageDecoder {
  private buf = new Uint8Array(0);

  get pendingBytes(): number {
    return this.buf.byteLength;
  }

  feed(data: Uint8Array): WireMessage[] {
    const merged = new Uint8Array(this.buf.byteLength + data.byteLength);
    merged.set(this.buf, 0);
    merged.set(data, this.buf.byteLength);
    this.buf = merged;

    const out: WireMessage[] = [];
    for (;;) {
      if (this.buf.byteLength < HEADER_BYTES) break;
      const view = new DataView(this.buf.buffer, this.buf.byteOffset);
      const length = view.getUint32(0, true);
      if (length > MAX_PAYLOAD_BYTES) {
        throw new WireError(`advertised payload of ${length} bytes exceeds cap`);
      }
      if (this.buf.byteLength < HEADER_BYTES + length) break;
      const msgType = view.getUint8(4);
      const payload = this.buf.slice(HEADER_BYTES, HEADER_BYTES + length);
      this.buf = this.buf.slice(HEADER_BYTES + length);
      out.push({ msgType, payload });
    }
    return out;
  }
}

export function encodePoseUpdate(p: PoseUpdate): Uint8Array {
  if (p.hpp.length !== HPP_FLOATS) throw new WireError("hpp must have 52 floats");
  if (p.camera.length !== CAMERA_FLOATS) throw new WireError("camera must have 12 floats");
  if (p.intrinsics.length !== INTRINSIC_FLOATS) {
    throw new WireError("intrinsics must have 4 floats");
  }
  const out = new Uint8Array(POSE_PAYLOAD_BYTES);
  const view = new DataView(out.buffer);
  view.setBigUint64(0, p.seq, true);
  view.setBigUint64(8, p.timestampUs, true);
  let off = 16;
  for (const arr of [p.hpp, p.camera, p.intrinsics]) {
    for (let i = 0; i < arr.length; i++, off += 4) {
      if (!Number.isFinite(arr[i])) throw new WireError("pose contains non-finite values");
      view.setFloat32(off, arr[i], true);
    }
  }
  return out;
}

export function decodePoseUpdate(payload: Uint8Array): PoseUpdate {
  if (payload.byteLength !== POSE_PAYLOAD_BYTES) {
    throw new WireError(
      `pose payload must be ${POSE_PAYLOAD_BYTES} bytes, got ${payload.byteLength}`,
    );
  }
  const view = new DataView(payload.buffer, payload.byteOffset);
  const seq = view.getBigUint64(0, true);
  const timestampUs = view.getBigUint64(8, true);
  const floats = new Float32Array(POSE_FLOATS);
  for (let i = 0; i < POSE_FLOATS; i++) {
    const v = view.getFloat32(16 + 4 * i, true);
    if (!Number.isFinite(v)) throw new WireError("pose contains non-finite values");
    floats[i] = v;
  }
  return {
    seq,
    timestampUs,
    hpp: floats.slice(0, HPP_FLOATS),
    camera: floats.slice(HPP_FLOATS, HPP_FLOATS + CAMERA_FLOATS),
    intrinsics: floats.slice(HPP_FLOATS + CAMERA_FLOATS),
  };
}

export function encodeFrameChunk(c: FrameChunk): Uint8Array {
  const expected = c.frames * c.height * c.width * 3;
  if (c.pixels.byteLength !== expected) {
    throw new WireError(`chunk pixels must be ${expected} bytes`);
  }
  const out = new Uint8Array(CHUNK_HEADER_BYTES + expected);
  const view = new DataView(out.buffer);
  view.setUint32(0, c.index, true);
  view.setUint32(4, c.frames, true);
  view.setUint32(8, c.height, true);
  view.setUint32(12, c.width, true);
  out.set(c.pixels, CHUNK_HEADER_BYTES);
  return out;
}

export function decodeFrameChunk(payload: Uint8Array): FrameChunk {
  if (payload.byteLength < CHUNK_HEADER_BYTES) {
    throw new WireError("chunk payload shorter than its header");
  }
  const view = new DataView(payload.buffer, payload.byteOffset);
  const index = view.getUint32(0, true);
  const frames = view.getUint32(4, true);
  const height = view.getUint32(8, true);
  const width = view.getUint32(12, true);
  const expected = CHUNK_HEADER_BYTES + frames * height * width * 3;
  if (payload.byteLength !== expected) {
    throw new WireError(
      `chunk payload must be ${expected} bytes for its header, got ${payload.byteLength}`,
    );
  }
  return { index, frames, height, width, pixels: payload.slice(CHUNK_HEADER_BYTES) };
}

export function decodeJsonPayload(payload: Uint8Array): Record<string, unknown> {
  let doc: unknown;
  try {
    doc = JSON.parse(new TextDecoder("utf-8", { fatal: true }).decode(payload));
  } catch (e) {
    throw new WireError(`bad JSON payload: ${e}`);
  }
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new WireError("JSON payload must be an object");
  }
  return doc as Record<string, unknown>;
}

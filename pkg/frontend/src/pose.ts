/**
 * Local pose state: gesture presets blended per angle, wrist placement, and
 * an orbit camera, converted to the 68-float conditioning block of a
 * PoseUpdate (52 hand floats + 12 camera floats + 4 intrinsics).
 *
 * Hand layout per hand: wrist axis-angle (3), wrist translation (3), then 20
 * hinge angles in radians; left block first, right block second.
 */

export const NUM_ANGLES = 20;

/** Every preset stays inside [-0.15, 0.95] rad, the intersection of all
 * default joint limits, so any blend of presets is a valid pose. */
export const ANGLE_CLAMP: readonly [number, number] = [-0.15, 0.95];

function angles(thumb: number, index: number, rest: number): Float64Array {
  // joints 1..20 in skeleton order: 4 thumb, then 4 per remaining finger
  const a = new Float64Array(NUM_ANGLES);
  for (let i = 0; i < 4; i++) a[i] = thumb;
  for (let i = 4; i < 8; i++) a[i] = index;
  for (let i = 8; i < NUM_ANGLES; i++) a[i] = rest;
  return a;
}

export const GESTURE_PRESETS: Record<string, Float64Array> = {
  open: angles(0.05, 0.05, 0.05),
  pinch: angles(0.85, 0.6, 0.15),
  grip: angles(0.9, 0.9, 0.9),
  point: angles(0.9, 0.05, 0.9),
};

export type GestureName = "open" | "pinch" | "grip" | "point";

export function clampAngle(v: number): number {
  return Math.min(ANGLE_CLAMP[1], Math.max(ANGLE_CLAMP[0], v));
}

/** Per-angle linear interpolation between two presets, clamped to limits.
 * weight 0 returns `from` exactly; weight 1 returns `to` exactly. */
export function blendAngles(
  from: Float64Array,
  to: Float64Array,
  weight: number,
): Float64Array {
  const out = new Float64Array(NUM_ANGLES);
  for (let i = 0; i < NUM_ANGLES; i++) {
    out[i] = clampAngle(from[i] + (to[i] - from[i]) * weight);
  }
  return out;
}

export interface HandState {
  gestureFrom: string;
  gestureTo: string;
  blend: number; // 0..1
  wristPos: [number, number, number]; // metres, world frame
  wristRot: [number, number, number]; // axis-angle
}

export function defaultHand(left: boolean): HandState {
  return {
    gestureFrom: "open",
    gestureTo: "grip",
    blend: 0,
    wristPos: [left ? -0.08 : 0.08, 0.28, 0.12],
    wristRot: [0, 0, 0],
  };
}

export function handBlock(h: HandState): Float64Array {
  const from = GESTURE_PRESETS[h.gestureFrom] ?? GESTURE_PRESETS.open;
  const to = GESTURE_PRESETS[h.gestureTo] ?? GESTURE_PRESETS.open;
  const a = blendAngles(from, to, h.blend);
  const block = new Float64Array(26);
  block.set(h.wristRot, 0);
  block.set(h.wristPos, 3);
  block.set(a, 6);
  return block;
}

export function buildHpp(left: HandState, right: HandState): Float32Array {
  const out = new Float32Array(52);
  out.set(Float32Array.from(handBlock(left)), 0);
  out.set(Float32Array.from(handBlock(right)), 26);
  return out;
}

// ---------------------------------------------------------------------------
// orbit camera

export interface OrbitState {
  azimuthRad: number;
  elevationRad: number; // clamped away from the poles, scene is z-up
  radius: number;
  target: [number, number, number];
}

export function defaultOrbit(): OrbitState {
  return { azimuthRad: -1.57, elevationRad: 0.45, radius: 0.55, target: [0, 0, 0.1] };
}

const MAX_ELEVATION = 1.4; // keep the up vector non-parallel to the view

export function orbitEye(o: OrbitState): [number, number, number] {
  const el = Math.min(MAX_ELEVATION, Math.max(-MAX_ELEVATION, o.elevationRad));
  const ce = Math.cos(el);
  return [
    o.target[0] + o.radius * ce * Math.cos(o.azimuthRad),
    o.target[1] + o.radius * ce * Math.sin(o.azimuthRad),
    o.target[2] + o.radius * Math.sin(el),
  ];
}

function norm3(v: number[]): number {
  return Math.hypot(v[0], v[1], v[2]);
}

function cross3(a: number[], b: number[]): [number, number, number] {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

/**
 * World-to-camera pose as the flat wire 12-vector: row-major R then t, with
 * rows of R being the camera x/y/z axes in world coordinates, +z toward the
 * target, world +z as the up reference, t = -R eye.
 */
export function lookAtVector(
  eye: [number, number, number],
  target: [number, number, number],
): Float32Array {
  const fwd = [target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]];
  const n = norm3(fwd);
  if (n < 1e-12) throw new Error("eye and target coincide");
  const z = [fwd[0] / n, fwd[1] / n, fwd[2] / n];
  let x = cross3(z, [0, 0, 1]);
  const nx = norm3(x);
  if (nx < 1e-9) throw new Error("view direction parallel to up");
  x = [x[0] / nx, x[1] / nx, x[2] / nx];
  const y = cross3(z, x);
  const out = new Float32Array(12);
  out.set(x, 0);
  out.set(y, 3);
  out.set(z, 6);
  out[9] = -(x[0] * eye[0] + x[1] * eye[1] + x[2] * eye[2]);
  out[10] = -(y[0] * eye[0] + y[1] * eye[1] + y[2] * eye[2]);
  out[11] = -(z[0] * eye[0] + z[1] * eye[1] + z[2] * eye[2]);
  return out;
}

export function orbitCameraVector(o: OrbitState): Float32Array {
  return lookAtVector(orbitEye(o), o.target);
}

/** Shared wire and UI state types for the viewer. */

/** Response shape of GET /api/meta. */
export interface Meta {
    version: number;
    resolution: number;
    counts: { total: number; unconstrained: number; bound: number };
    n_shape: number;
    n_expression: number;
    n_basis: number;
    joint_names: string[];
    part_names: string[];
    motions: string[];
}

/** Orbit camera parameters as understood by GET /api/frame. */
export interface CameraParams {
    az: number;   // azimuth, degrees
    el: number;   // polar angle, degrees; 90 = equator
    r: number;    // orbit radius
    fov: number;  // vertical field of view, degrees
}

export const CAMERA_BOUNDS = {
    az: { min: 0, max: 360 },
    el: { min: 1, max: 179 },
    r: { min: 0.5, max: 6 },
    fov: { min: 20, max: 120 },
} as const;

export const DEFAULT_CAMERA: CameraParams = { az: 0, el: 90, r: 1.8, fov: 55 };

/** Body of POST /api/pose; every field optional, merged server-side. */
export interface PoseBody {
    preset?: string;
    joints?: Record<string, [number, number, number, number]>;
    expression?: number[];
}

/** One decoded frame response. */
export interface FrameResult {
    version: number;
    blob: Blob;
}

/** A state-changing request; kinds coalesce independently while debouncing. */
export type Mutation =
    | { kind: "shape"; delta: number[] }
    | { kind: "pose"; body: PoseBody }
    | { kind: "reset" };

/**
 * Everything the UI tracks. Pixels always come from the service; this is
 * only the controls' view of the world plus the last seen frame version.
 */
export interface ViewerState {
    shapeSliders: number[];        // one per basis coefficient
    expressionSliders: number[];   // one per expression coefficient
    selectedJoint: string;
    jointAngles: [number, number, number];  // axis-angle widget, radians
    camera: CameraParams;
    frameVersion: number;          // version of the displayed frame
}

export const SHAPE_SLIDER_BOUND = 2.0;       // |delta_i| allowed in the UI
export const EXPRESSION_SLIDER_BOUND = 2.0;
export const JOINT_ANGLE_BOUND = Math.PI;

export function initialState(meta: Meta): ViewerState {
    return {
        shapeSliders: new Array(meta.n_basis).fill(0),
        expressionSliders: new Array(meta.n_expression).fill(0),
        selectedJoint: meta.joint_names[0] ?? "",
        jointAngles: [0, 0, 0],
        camera: { ...DEFAULT_CAMERA },
        frameVersion: meta.version,
    };
}

/** Reset button semantics: every slider back to zero, camera untouched. */
export function resetControls(state: ViewerState): ViewerState {
    return {
        ...state,
        shapeSliders: state.shapeSliders.map(() => 0),
        expressionSliders: state.expressionSliders.map(() => 0),
        jointAngles: [0, 0, 0],
    };
}

export function clamp(x: number, min: number, max: number): number {
    return x < min ? min : x > max ? max : x;
}

/** Clamp a camera move into the documented parameter bounds. */
export function clampCamera(cam: CameraParams): CameraParams {
    const b = CAMERA_BOUNDS;
    // azimuth wraps instead of clamping so orbit dragging never sticks
    const az = ((cam.az % 360) + 360) % 360;
    return {
        az,
        el: clamp(cam.el, b.el.min, b.el.max),
        r: clamp(cam.r, b.r.min, b.r.max),
        fov: clamp(cam.fov, b.fov.min, b.fov.max),
    };
}

/** Axis-angle (radians) to unit quaternion [w, x, y, z]. */
export function axisAngleToQuat(
    v: [number, number, number],
): [number, number, number, number] {
    const angle = Math.hypot(v[0], v[1], v[2]);
    if (angle < 1e-12) return [1, 0, 0, 0];
    const s = Math.sin(angle / 2) / angle;
    return [Math.cos(angle / 2), v[0] * s, v[1] * s, v[2] * s];
}

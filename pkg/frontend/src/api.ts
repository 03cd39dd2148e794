/** Thin typed client for the session service; all I/O goes through here. */

import type { CameraParams, FrameResult, Meta, Mutation } from "./types.js";

export class ApiError extends Error {
    constructor(
        readonly status: number,
        readonly code: string,
        message: string,
    ) {
        super(message);
    }
}

async function raise(res: Response): Promise<never> {
    let code = "unknown";
    let message = `HTTP ${res.status}`;
    try {
        const body = await res.json();
        code = body?.error?.code ?? code;
        message = body?.error?.message ?? message;
    } catch {
        // non-JSON error body; keep the status text
    }
    throw new ApiError(res.status, code, message);
}

function version(res: Response): number {
    const v = Number(res.headers.get("X-State-Version"));
    return Number.isFinite(v) ? v : 0;
}

export function frameQuery(cam: CameraParams): string {
    return `az=${cam.az}&el=${cam.el}&r=${cam.r}&fov=${cam.fov}`;
}

/**
 * HTTP transport used by the sync loop. `base` is "" when the bundle is
 * served by the session process itself.
 */
export class Client {
    constructor(readonly base: string = "") {}

    async meta(): Promise<Meta> {
        const res = await fetch(`${this.base}/api/meta`);
        if (!res.ok) await raise(res);
        return (await res.json()) as Meta;
    }

    /** Apply one mutation; resolves to the service's new state version. */
    async mutate(m: Mutation): Promise<number> {
        let path: string;
        let body: unknown;
        switch (m.kind) {
            case "shape":
                path = "/api/shape";
                body = { delta: m.delta };
                break;
            case "pose":
                path = "/api/pose";
                body = m.body;
                break;
            case "reset":
                path = "/api/reset";
                body = {};
                break;
        }
        const res = await fetch(`${this.base}${path}`, {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify(body),
        });
        if (!res.ok) await raise(res);
        return version(res);
    }

    /** Fetch one rendered frame (or the skeleton overlay) as a PNG blob. */
    async frame(cam: CameraParams, skeleton = false): Promise<FrameResult> {
        const route = skeleton ? "/api/skeleton" : "/api/frame";
        const res = await fetch(`${this.base}${route}?${frameQuery(cam)}`);
        if (!res.ok) await raise(res);
        return { version: version(res), blob: await res.blob() };
    }
}

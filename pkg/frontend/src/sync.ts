/**
 * The viewer's only moving part: a debounced mutation queue plus a frame
 * fetch loop with at most one request in flight.
 *
 * Ordering contract:
 *   - mutations coalesce per kind inside the debounce window, then POST
 *     serially in queue order (never two POSTs in flight);
 *   - a frame response whose version is below the last acknowledged
 *     mutation is stale: it is dropped and a fresh frame is fetched;
 *   - the displayed frame version never decreases.
 *
 * Failures raise a banner via `onError` and retry with exponential
 * backoff; the first success clears the banner via `onRecovered`.
 */

import type { CameraParams, FrameResult, Mutation } from "./types.js";

export interface Transport {
    mutate(m: Mutation): Promise<number>;
    frame(cam: CameraParams): Promise<FrameResult>;
}

export interface SyncEvents {
    /** Called only with frames safe to display (fresh, in order). */
    onFrame(f: FrameResult): void;
    onError(message: string): void;
    onRecovered(): void;
}

export interface SyncOptions {
    debounceMs?: number;
    /** Retry delays; the last entry repeats. */
    backoffMs?: number[];
}

const DEFAULTS = { debounceMs: 150, backoffMs: [500, 1000, 2000, 4000] };

export class SyncLoop {
    private pending = new Map<Mutation["kind"], Mutation>();
    private debounceTimer: ReturnType<typeof setTimeout> | null = null;
    private posting = false;
    private frameInFlight = false;
    private frameDirty = false;
    private ackVersion = 0;       // highest version a mutation POST returned
    private displayedVersion = 0;
    private failures = 0;
    private banner = false;
    private stopped = false;
    private camera: CameraParams;
    private readonly debounceMs: number;
    private readonly backoffMs: number[];

    constructor(
        private readonly transport: Transport,
        private readonly events: SyncEvents,
        camera: CameraParams,
        opts: SyncOptions = {},
    ) {
        this.camera = camera;
        this.debounceMs = opts.debounceMs ?? DEFAULTS.debounceMs;
        this.backoffMs = opts.backoffMs ?? DEFAULTS.backoffMs;
    }

    /** Highest state version any mutation POST has acknowledged. */
    get acknowledgedVersion(): number {
        return this.ackVersion;
    }

    /** Fetch the first frame; call once after construction. */
    start(): void {
        this.requestFrame();
    }

    /** Drop timers; in-flight promises resolve into a no-op. */
    stop(): void {
        this.stopped = true;
        if (this.debounceTimer !== null) clearTimeout(this.debounceTimer);
    }

    /**
     * Record a control change. Changes of one kind inside the debounce
     * window collapse to the latest value, so a slider drag costs one POST.
     */
    queueMutation(m: Mutation): void {
        this.pending.set(m.kind, m);
        if (this.debounceTimer !== null) clearTimeout(this.debounceTimer);
        this.debounceTimer = setTimeout(() => {
            this.debounceTimer = null;
            this.flush();
        }, this.debounceMs);
    }

    /** Camera moves need no POST: refetch with the new parameters. */
    setCamera(cam: CameraParams): void {
        this.camera = cam;
        this.requestFrame();
    }

    private flush(): void {
        if (this.stopped || this.posting) return;
        const next = this.pending.entries().next();
        if (next.done) return;
        const [kind, mutation] = next.value;
        this.pending.delete(kind);
        this.posting = true;
        this.transport.mutate(mutation).then(
            (v) => {
                this.posting = false;
                this.recovered();
                if (v > this.ackVersion) this.ackVersion = v;
                this.requestFrame();
                this.flush(); // drain anything queued while posting
            },
            (err) => {
                this.posting = false;
                // retry the same payload unless a newer one superseded it
                if (!this.pending.has(kind)) this.pending.set(kind, mutation);
                this.fail(err, () => this.flush());
            },
        );
    }

    private requestFrame(): void {
        if (this.stopped) return;
        if (this.frameInFlight) {
            this.frameDirty = true;
            return;
        }
        this.frameInFlight = true;
        const cam = this.camera;
        this.transport.frame(cam).then(
            (res) => {
                this.frameInFlight = false;
                this.recovered();
                if (res.version < this.ackVersion) {
                    // rendered before our last edit landed; try again
                    this.frameDirty = true;
                } else if (res.version >= this.displayedVersion) {
                    this.displayedVersion = res.version;
                    if (!this.stopped) this.events.onFrame(res);
                }
                if (this.frameDirty || cam !== this.camera) {
                    this.frameDirty = false;
                    this.requestFrame();
                }
            },
            (err) => {
                this.frameInFlight = false;
                this.fail(err, () => this.requestFrame());
            },
        );
    }

    private fail(err: unknown, retry: () => void): void {
        if (this.stopped) return;
        const delay =
            this.backoffMs[Math.min(this.failures, this.backoffMs.length - 1)];
        this.failures += 1;
        this.banner = true;
        this.events.onError(err instanceof Error ? err.message : String(err));
        setTimeout(() => {
            if (!this.stopped) retry();
        }, delay);
    }

    private recovered(): void {
        this.failures = 0;
        if (this.banner) {
            this.banner = false;
            if (!this.stopped) this.events.onRecovered();
        }
    }
}

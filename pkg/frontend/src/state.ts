/** Viewer state machine, kept free of DOM so it can be tested headlessly.
 *
 * Request discipline: at most one render request is in flight. Slider bursts
 * overwrite a single pending slot (latest wins); a response that was
 * superseded while in flight is discarded, so the displayed frame always
 * converges to the most recent state once requests settle. A failed request
 * is retried once, then surfaced through the error callback.
 */

import { ApiClient, EffectSettings, ModelMeta, clamp01 } from "./api.js";

export interface DisplayedFrame {
    blob: Blob;
    url: string;
    coord: number[];
}

export interface ViewerCallbacks {
    onFrame: (frame: DisplayedFrame) => void;
    onError: (message: string) => void;
}

export class ViewerController {
    meta: ModelMeta | null = null;
    coord: number[] = [];
    effect: EffectSettings = { axis: 0, radius: 0, n: 8 };
    effectEnabled = false;

    /** instrumentation: how many HTTP image requests were actually issued */
    requestsIssued = 0;

    private inFlight = false;
    private pending: string | null = null;
    private lastDisplayed: DisplayedFrame | null = null;

    constructor(
        private readonly api: ApiClient,
        private readonly callbacks: ViewerCallbacks,
    ) {}

    /** Fetch model metadata and render the centroid frame. */
    async init(): Promise<ModelMeta> {
        try {
            this.meta = await this.api.meta();
        } catch (err) {
            this.callbacks.onError(`cannot reach render service: ${String(err)}`);
            throw err;
        }
        this.coord = this.meta.dims.map(() => 0.5);
        this.request(this.currentUrl());
        return this.meta;
    }

    get displayed(): DisplayedFrame | null {
        return this.lastDisplayed;
    }

    /** True once no request is running and none is queued. */
    get settled(): boolean {
        return !this.inFlight && this.pending === null;
    }

    setCoordinate(dim: number, value: number): void {
        if (!this.meta || dim < 0 || dim >= this.coord.length) {
            return;
        }
        this.coord[dim] = clamp01(value);
        this.request(this.currentUrl());
    }

    setEffect(settings: Partial<EffectSettings> & { enabled?: boolean }): void {
        if (settings.axis !== undefined) this.effect.axis = settings.axis;
        if (settings.radius !== undefined) this.effect.radius = Math.max(0, settings.radius);
        if (settings.n !== undefined) this.effect.n = Math.max(1, Math.round(settings.n));
        if (settings.enabled !== undefined) this.effectEnabled = settings.enabled;
        this.request(this.currentUrl());
    }

    private currentUrl(): string {
        return this.effectEnabled
            ? this.api.effectUrl(this.coord, this.effect)
            : this.api.renderUrl(this.coord);
    }

    /** Wait until the queue drains (for scripted sweeps and tests). */
    async settle(timeoutMs = 30000): Promise<void> {
        const start = Date.now();
        while (!this.settled) {
            if (Date.now() - start > timeoutMs) {
                throw new Error("viewer did not settle in time");
            }
            await new Promise((r) => setTimeout(r, 5));
        }
    }

    private request(url: string): void {
        if (this.inFlight) {
            this.pending = url; // latest wins: older queued coordinates are dropped
            return;
        }
        this.inFlight = true;
        void this.run(url);
    }

    private async run(url: string): Promise<void> {
        const coordAtRequest = [...this.coord];
        let blob: Blob | null = null;
        try {
            this.requestsIssued += 1;
            blob = await this.api.fetchImage(url);
        } catch {
            try {
                this.requestsIssued += 1;
                blob = await this.api.fetchImage(url); // one retry
            } catch (err) {
                this.callbacks.onError(`render request failed twice: ${String(err)}`);
            }
        }

        const superseded = this.pending !== null;
        if (blob !== null && !superseded) {
            const frame: DisplayedFrame = {
                blob,
                url,
                coord: coordAtRequest,
            };
            this.lastDisplayed = frame;
            this.callbacks.onFrame(frame);
        }

        const next = this.pending;
        this.pending = null;
        if (next !== null) {
            void this.run(next);
        } else {
            this.inFlight = false;
        }
    }
}

/** Typed client for the render service's HTTP API. */

export interface DimensionMeta {
    name: string;
    kind: string;
    min: number;
    max: number;
}

export interface ModelMeta {
    name: string;
    dims: DimensionMeta[];
    resolution: [number, number];
}

export interface EffectSettings {
    axis: number;
    radius: number;
    n: number;
}

export type FetchLike = (url: string) => Promise<Response>;

export class ApiError extends Error {
    constructor(readonly status: number, message: string) {
        super(message);
    }
}

export class ApiClient {
    constructor(readonly baseUrl: string, private readonly fetchImpl: FetchLike = (u) => fetch(u)) {}

    async meta(): Promise<ModelMeta> {
        const resp = await this.fetchImpl(`${this.baseUrl}/api/meta`);
        if (!resp.ok) {
            throw new ApiError(resp.status, `meta request failed with ${resp.status}`);
        }
        return (await resp.json()) as ModelMeta;
    }

    renderUrl(coord: number[]): string {
        return `${this.baseUrl}/api/render?c=${coord.join(",")}`;
    }

    effectUrl(coord: number[], effect: EffectSettings): string {
        const c = coord.join(",");
        return `${this.baseUrl}/api/effect?c=${c}&axis=${effect.axis}&radius=${effect.radius}&n=${effect.n}`;
    }

    async fetchImage(url: string): Promise<Blob> {
        const resp = await this.fetchImpl(url);
        if (!resp.ok) {
            throw new ApiError(resp.status, `image request failed with ${resp.status}`);
        }
        return await resp.blob();
    }
}

/** Normalized coordinates are clamped exactly like the server clamps them. */
export function clamp01(value: number): number {
    return Math.min(1, Math.max(0, value));
}

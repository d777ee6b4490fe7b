/**
 * REST client for the icseg service.  The UI never segments locally; every
 * prediction goes through these calls.  All calls are recorded in a replay
 * log exportable as a shell script, and prediction responses superseded by
 * a newer request are dropped.
 */

export interface ApiError {
    code: string;
    message: string;
}

export interface ExampleInfo {
    id: string;
    width: number;
    height: number;
    thumbnail_png: string;
}

export interface PredictResponse {
    prediction_png: string;
    mask_png: string;
    palette: { background: number[]; entries: Record<string, number[]> };
    timings_ms: Record<string, number>;
}

export interface ReplayEntry {
    method: string;
    path: string;
    form?: Record<string, string>;
    files?: string[];
}

export class ServiceError extends Error {
    constructor(readonly status: number, readonly detail: ApiError) {
        super(`${detail.code}: ${detail.message}`);
    }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
    private replay: ReplayEntry[] = [];
    private predictSeq = 0;

    constructor(
        readonly baseUrl: string,
        private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
    ) {}

    private record(entry: ReplayEntry): void {
        this.replay.push(entry);
    }

    /** The session's action history as replayable curl commands. */
    exportScript(): string {
        const lines = this.replay.map((e) => {
            const parts = [`curl -X ${e.method} '${this.baseUrl}${e.path}'`];
            for (const [k, v] of Object.entries(e.form ?? {})) {
                parts.push(`-F '${k}=${v}'`);
            }
            for (const f of e.files ?? []) {
                parts.push(`-F '${f}=@<${f}.png>'`);
            }
            return parts.join(" \\\n  ");
        });
        return lines.join("\n");
    }

    private async request(method: string, path: string, init?: RequestInit): Promise<Response> {
        const response = await this.fetchImpl(`${this.baseUrl}${path}`, { ...init, method });
        if (!response.ok) {
            let detail: ApiError;
            try {
                detail = (await response.json()) as ApiError;
            } catch {
                detail = { code: "http_error", message: response.statusText };
            }
            throw new ServiceError(response.status, detail);
        }
        return response;
    }

    async health(): Promise<boolean> {
        try {
            const r = await this.request("GET", "/healthz");
            return ((await r.json()) as { status: string }).status === "ok";
        } catch {
            return false;
        }
    }

    async listModels(): Promise<{ id: string; config: Record<string, number> }[]> {
        const r = await this.request("GET", "/models");
        return ((await r.json()) as { models: { id: string; config: Record<string, number> }[] }).models;
    }

    async createSession(modelId?: string): Promise<string> {
        this.record({ method: "POST", path: "/sessions" });
        const init: RequestInit = modelId
            ? { body: JSON.stringify({ model_id: modelId }), headers: { "content-type": "application/json" } }
            : {};
        const r = await this.request("POST", "/sessions", init);
        return ((await r.json()) as { id: string }).id;
    }

    async addExample(
        sessionId: string,
        sourcePng: Uint8Array,
        maskPng: Uint8Array,
        paletteJson: string,
    ): Promise<ExampleInfo[]> {
        const path = `/sessions/${sessionId}/examples`;
        this.record({ method: "POST", path, form: { palette: paletteJson }, files: ["source", "mask"] });
        const form = new FormData();
        form.append("source", new Blob([sourcePng as BlobPart], { type: "image/png" }), "source.png");
        form.append("mask", new Blob([maskPng as BlobPart], { type: "image/png" }), "mask.png");
        form.append("palette", paletteJson);
        const r = await this.request("POST", path, { body: form });
        return ((await r.json()) as { examples: ExampleInfo[] }).examples;
    }

    async listExamples(sessionId: string): Promise<ExampleInfo[]> {
        const r = await this.request("GET", `/sessions/${sessionId}/examples`);
        return ((await r.json()) as { examples: ExampleInfo[] }).examples;
    }

    async deleteExample(sessionId: string, exampleId: string): Promise<ExampleInfo[]> {
        const path = `/sessions/${sessionId}/examples/${exampleId}`;
        this.record({ method: "DELETE", path });
        const r = await this.request("DELETE", path);
        return ((await r.json()) as { examples: ExampleInfo[] }).examples;
    }

    /**
     * Run a prediction.  At most one in-flight prediction wins per client:
     * responses arriving after a newer predict() call resolve to null.
     */
    async predict(
        sessionId: string,
        queryPng: Uint8Array,
        options: { strategy: string; gridN?: number; taskKind?: string },
    ): Promise<PredictResponse | null> {
        const seq = ++this.predictSeq;
        const path = `/sessions/${sessionId}/predict`;
        this.record({
            method: "POST",
            path,
            form: {
                strategy: options.strategy,
                grid_n: String(options.gridN ?? 0),
                task_kind: options.taskKind ?? "category",
            },
            files: ["query"],
        });
        const form = new FormData();
        form.append("query", new Blob([queryPng as BlobPart], { type: "image/png" }), "query.png");
        form.append("strategy", options.strategy);
        form.append("grid_n", String(options.gridN ?? 0));
        form.append("task_kind", options.taskKind ?? "category");
        const r = await this.request("POST", path, { body: form });
        const body = (await r.json()) as PredictResponse;
        if (seq !== this.predictSeq) {
            return null; // superseded by a newer request
        }
        return body;
    }
}

export function b64ToBytes(b64: string): Uint8Array {
    if (typeof atob === "function") {
        const bin = atob(b64);
        const out = new Uint8Array(bin.length);
        for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
        return out;
    }
    return new Uint8Array(Buffer.from(b64, "base64"));
}

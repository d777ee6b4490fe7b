import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
    return new Response(JSON.stringify(body), {
        status,
        headers: { "content-type": "application/json" },
    });
}

describe("api client", () => {
    it("records every mutating call in the replay script", async () => {
        const calls: string[] = [];
        const client = new ApiClient("http://x", async (input, init) => {
            calls.push(`${init?.method} ${input}`);
            if (input.endsWith("/sessions")) return jsonResponse({ id: "s1" });
            return jsonResponse({ examples: [] });
        });
        const sid = await client.createSession();
        await client.addExample(sid, new Uint8Array([1]), new Uint8Array([2]), "{}");
        await client.deleteExample(sid, "e1");
        const script = client.exportScript();
        expect(script).toContain("curl -X POST 'http://x/sessions'");
        expect(script).toContain("/sessions/s1/examples");
        expect(script).toContain("-F 'palette={}'");
        expect(script).toContain("curl -X DELETE 'http://x/sessions/s1/examples/e1'");
        expect(calls.length).toBe(3);
    });

    it("raises typed errors with the service's code and message", async () => {
        const client = new ApiClient("http://x", async () =>
            jsonResponse({ code: "empty_examples", message: "no examples" }, 409),
        );
        await expect(client.listExamples("s")).rejects.toMatchObject({
            status: 409,
            detail: { code: "empty_examples" },
        });
    });

    it("drops prediction responses superseded by a newer request", async () => {
        const resolvers: ((r: Response) => void)[] = [];
        const client = new ApiClient("http://x", (input) => {
            if (input.endsWith("/predict")) {
                return new Promise<Response>((resolve) => resolvers.push(resolve));
            }
            return Promise.resolve(jsonResponse({ id: "s1" }));
        });
        const first = client.predict("s1", new Uint8Array([0]), { strategy: "single" });
        const second = client.predict("s1", new Uint8Array([0]), { strategy: "feature" });
        const payload = {
            prediction_png: "",
            mask_png: "",
            palette: { background: [0, 0, 0], entries: {} },
            timings_ms: { total: 1 },
        };
        // resolve in submission order: the first response is stale by then
        resolvers[0](jsonResponse({ ...payload, mask_png: "old" }));
        resolvers[1](jsonResponse({ ...payload, mask_png: "new" }));
        expect(await first).toBeNull();
        expect((await second)?.mask_png).toBe("new");
    });
});

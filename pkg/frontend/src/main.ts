/**
 * Browser wiring for the prompt-painting client.
 *
 * Workflow: upload an example image, paint its mask with the brush (one
 * palette color per segment id), add it to the session, upload a query,
 * predict with a chosen ensemble strategy, inspect the overlay, iterate.
 */

import { ApiClient, b64ToBytes, PredictResponse } from "./api.js";
import {
    BrushState,
    createIdMap,
    defaultColor,
    encodeMask,
    IdMap,
    paletteJson,
    Rgb,
} from "./mask.js";
import { decodePng } from "./png.js";
import { renderOverlay, RgbImage } from "./overlay.js";

const $ = <T extends HTMLElement>(id: string): T => {
    const el = document.getElementById(id);
    if (!el) throw new Error(`missing element #${id}`);
    return el as T;
};

const ZOOM = 4; // nearest-neighbor display scale

interface AppState {
    api: ApiClient;
    sessionId: string | null;
    exampleImage: { png: Uint8Array; width: number; height: number; rgba: Uint8ClampedArray } | null;
    queryImage: { png: Uint8Array; width: number; height: number; rgba: Uint8ClampedArray } | null;
    brush: BrushState | null;
    lastPrediction: PredictResponse | null;
    hiddenIds: Set<number>;
}

const state: AppState = {
    api: new ApiClient(""),
    sessionId: null,
    exampleImage: null,
    queryImage: null,
    brush: null,
    lastPrediction: null,
    hiddenIds: new Set(),
};

function status(text: string): void {
    $("status").textContent = text;
}

async function fileToImage(file: File) {
    const png = new Uint8Array(await file.arrayBuffer());
    const decoded = await decodePng(png);
    if (decoded.bitDepth !== 8 || decoded.colorType !== 2) {
        throw new Error("please upload an 8-bit RGB PNG");
    }
    const rgba = new Uint8ClampedArray(decoded.width * decoded.height * 4);
    for (let i = 0; i < decoded.width * decoded.height; i++) {
        rgba[i * 4] = decoded.data[i * 3] as number;
        rgba[i * 4 + 1] = decoded.data[i * 3 + 1] as number;
        rgba[i * 4 + 2] = decoded.data[i * 3 + 2] as number;
        rgba[i * 4 + 3] = 255;
    }
    return { png, width: decoded.width, height: decoded.height, rgba };
}

function drawScaled(canvas: HTMLCanvasElement, image: RgbImage): void {
    canvas.width = image.width * ZOOM;
    canvas.height = image.height * ZOOM;
    const ctx = canvas.getContext("2d")!;
    const off = new OffscreenCanvas(image.width, image.height);
    const offCtx = off.getContext("2d")!;
    offCtx.putImageData(new ImageData(new Uint8ClampedArray(image.data), image.width, image.height), 0, 0);
    ctx.imageSmoothingEnabled = false; // nearest-neighbor zoom
    ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function paintView(): void {
    if (!state.exampleImage || !state.brush) return;
    const { width, height, rgba } = state.exampleImage;
    const colors = new Map<number, Rgb>(state.brush.palette);
    const view = renderOverlay(
        { width, height, data: rgba, channels: 4 },
        state.brush.map,
        colors,
        { alpha: 0.55 },
    );
    drawScaled($("paint-canvas") as unknown as HTMLCanvasElement, view);
}

function refreshPaletteList(): void {
    if (!state.brush) return;
    const holder = $("palette-list");
    holder.innerHTML = "";
    for (const [id, color] of state.brush.palette) {
        const button = document.createElement("button");
        button.textContent = `id ${id}`;
        button.style.background = `rgb(${color[0]},${color[1]},${color[2]})`;
        button.className = state.brush.activeId === id ? "swatch active" : "swatch";
        button.onclick = () => {
            state.brush!.setActive(id);
            refreshPaletteList();
        };
        holder.appendChild(button);
    }
}

async function refreshExamples(): Promise<void> {
    if (!state.sessionId) return;
    const examples = await state.api.listExamples(state.sessionId);
    const holder = $("example-list");
    holder.innerHTML = "";
    for (const ex of examples) {
        const wrap = document.createElement("span");
        wrap.className = "thumb";
        const img = document.createElement("img");
        img.src = `data:image/png;base64,${ex.thumbnail_png}`;
        img.title = `${ex.width}x${ex.height}`;
        const del = document.createElement("button");
        del.textContent = "x";
        del.onclick = async () => {
            await state.api.deleteExample(state.sessionId!, ex.id);
            await refreshExamples();
        };
        wrap.append(img, del);
        holder.appendChild(wrap);
    }
    status(`${examples.length} example(s) in session`);
}

async function showPrediction(): Promise<void> {
    const pred = state.lastPrediction;
    if (!pred || !state.queryImage) return;
    const maskPng = b64ToBytes(pred.mask_png);
    const decoded = await decodePng(maskPng);
    const mask: IdMap = {
        width: decoded.width,
        height: decoded.height,
        data: Uint16Array.from(decoded.data as Uint16Array),
    };
    const colors = new Map<number, Rgb>();
    for (const [id, c] of Object.entries(pred.palette.entries)) {
        colors.set(Number(id), c as Rgb);
    }
    const alpha = Number(($("alpha") as unknown as HTMLInputElement).value) / 100;
    const view = renderOverlay(
        {
            width: state.queryImage.width,
            height: state.queryImage.height,
            data: state.queryImage.rgba,
            channels: 4,
        },
        mask,
        colors,
        { alpha, hidden: state.hiddenIds },
    );
    drawScaled($("overlay-canvas") as unknown as HTMLCanvasElement, view);

    const toggles = $("id-toggles");
    toggles.innerHTML = "";
    for (const [id] of colors) {
        const label = document.createElement("label");
        const box = document.createElement("input");
        box.type = "checkbox";
        box.checked = !state.hiddenIds.has(id);
        box.onchange = () => {
            if (box.checked) state.hiddenIds.delete(id);
            else state.hiddenIds.add(id);
            void showPrediction();
        };
        label.append(box, ` id ${id}`);
        toggles.appendChild(label);
    }
    const ms = pred.timings_ms;
    $("timings").textContent = `forward ${ms.forward.toFixed(1)} ms, total ${ms.total.toFixed(1)} ms`;
}

function wirePainting(): void {
    const canvas = $("paint-canvas") as unknown as HTMLCanvasElement;
    let painting = false;
    let last: [number, number] | null = null;
    const toMap = (ev: MouseEvent): [number, number] => {
        const rect = canvas.getBoundingClientRect();
        return [
            Math.floor((ev.clientX - rect.left) / ZOOM),
            Math.floor((ev.clientY - rect.top) / ZOOM),
        ];
    };
    canvas.addEventListener("mousedown", (ev) => {
        if (!state.brush) return;
        painting = true;
        state.brush.beginStroke();
        const [x, y] = toMap(ev);
        state.brush.paint(x, y);
        last = [x, y];
        paintView();
    });
    canvas.addEventListener("mousemove", (ev) => {
        if (!painting || !state.brush || !last) return;
        const [x, y] = toMap(ev);
        state.brush.paintLine(last[0], last[1], x, y);
        last = [x, y];
        paintView();
    });
    window.addEventListener("mouseup", () => {
        painting = false;
        last = null;
    });
}

async function init(): Promise<void> {
    state.api = new ApiClient("");
    if (!(await state.api.health())) {
        status("service unreachable; start it with: icseg serve --checkpoint <ckpt>");
    }
    state.sessionId = await state.api.createSession();
    status(`session ${state.sessionId}`);

    ($("example-file") as unknown as HTMLInputElement).onchange = async (ev) => {
        const file = (ev.target as HTMLInputElement).files?.[0];
        if (!file) return;
        state.exampleImage = await fileToImage(file);
        state.brush = new BrushState(createIdMap(state.exampleImage.width, state.exampleImage.height));
        state.brush.setPaletteEntry(1, defaultColor(0));
        state.brush.setActive(1);
        refreshPaletteList();
        paintView();
    };

    ($("query-file") as unknown as HTMLInputElement).onchange = async (ev) => {
        const file = (ev.target as HTMLInputElement).files?.[0];
        if (!file) return;
        state.queryImage = await fileToImage(file);
        status("query loaded");
    };

    $("add-id").onclick = () => {
        if (!state.brush) return;
        const next = state.brush.palette.size + 1;
        state.brush.setPaletteEntry(next, defaultColor(next - 1));
        state.brush.setActive(next);
        refreshPaletteList();
    };

    ($("radius") as unknown as HTMLInputElement).onchange = (ev) => {
        if (state.brush) state.brush.radius = Number((ev.target as HTMLInputElement).value);
    };

    $("undo").onclick = () => {
        state.brush?.undo();
        paintView();
    };
    $("redo").onclick = () => {
        state.brush?.redo();
        paintView();
    };

    $("add-example").onclick = async () => {
        if (!state.sessionId || !state.exampleImage || !state.brush) return;
        try {
            await state.api.addExample(
                state.sessionId,
                state.exampleImage.png,
                encodeMask(state.brush.map),
                paletteJson(state.brush),
            );
            await refreshExamples();
        } catch (err) {
            status(String(err));
        }
    };

    $("predict").onclick = async () => {
        if (!state.sessionId || !state.queryImage) {
            status("upload a query image first");
            return;
        }
        const strategy = ($("strategy") as unknown as HTMLSelectElement).value;
        const taskKind = ($("task-kind") as unknown as HTMLSelectElement).value;
        status("predicting...");
        try {
            const result = await state.api.predict(state.sessionId, state.queryImage.png, {
                strategy,
                taskKind,
            });
            if (result === null) return; // superseded by a newer request
            state.lastPrediction = result;
            await showPrediction();
            status("done");
        } catch (err) {
            status(String(err));
        }
    };

    ($("alpha") as unknown as HTMLInputElement).oninput = () => void showPrediction();

    $("export-mask").onclick = () => {
        if (!state.brush) return;
        const blob = new Blob([encodeMask(state.brush.map) as BlobPart], { type: "image/png" });
        const a = document.createElement("a");
        a.href = URL.createObjectURL(blob);
        a.download = "mask.png";
        a.click();
    };

    $("export-script").onclick = () => {
        const blob = new Blob([state.api.exportScript()], { type: "text/plain" });
        const a = document.createElement("a");
        a.href = URL.createObjectURL(blob);
        a.download = "replay.sh";
        a.click();
    };

    wirePainting();
}

void init();

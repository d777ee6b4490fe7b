/**
 * Brush-painted id maps.  The painting lives at native image resolution as a
 * Uint16Array of segment ids; the canvas layer only visualizes it, so the
 * exported mask is exactly what was painted (lossless).
 */

import { decodePng, encodePng16 } from "./png.js";

export type Rgb = [number, number, number];

export interface IdMap {
    width: number;
    height: number;
    data: Uint16Array;
}

export function createIdMap(width: number, height: number): IdMap {
    return { width, height, data: new Uint16Array(width * height) };
}

export function cloneIdMap(map: IdMap): IdMap {
    return { width: map.width, height: map.height, data: map.data.slice() };
}

const MAX_UNDO = 50;

export class BrushState {
    activeId = 1;
    radius = 4;
    readonly palette = new Map<number, Rgb>();
    background: Rgb = [0, 0, 0];
    private undoStack: Uint16Array[] = [];
    private redoStack: Uint16Array[] = [];

    constructor(readonly map: IdMap) {}

    setPaletteEntry(id: number, color: Rgb): void {
        this.palette.set(id, color);
    }

    colorOf(id: number): Rgb {
        if (id === 0) return this.background;
        const color = this.palette.get(id);
        if (!color) throw new Error(`no palette color for id ${id}`);
        return color;
    }

    setActive(id: number): void {
        if (id !== 0 && !this.palette.has(id)) throw new Error(`no palette color for id ${id}`);
        this.activeId = id;
    }

    /** Snapshot before a stroke; bounded to the last 50 states. */
    beginStroke(): void {
        this.undoStack.push(this.map.data.slice());
        if (this.undoStack.length > MAX_UNDO) this.undoStack.shift();
        this.redoStack.length = 0;
    }

    get undoDepth(): number {
        return this.undoStack.length;
    }

    undo(): boolean {
        const prev = this.undoStack.pop();
        if (!prev) return false;
        this.redoStack.push(this.map.data.slice());
        this.map.data.set(prev);
        return true;
    }

    redo(): boolean {
        const next = this.redoStack.pop();
        if (!next) return false;
        this.undoStack.push(this.map.data.slice());
        this.map.data.set(next);
        return true;
    }

    /** Paint a filled disc of the active id at (cx, cy). */
    paint(cx: number, cy: number): void {
        paintDisc(this.map, cx, cy, this.radius, this.activeId);
    }

    /** Paint along a segment so fast strokes leave no gaps. */
    paintLine(x0: number, y0: number, x1: number, y1: number): void {
        const steps = Math.max(Math.abs(x1 - x0), Math.abs(y1 - y0), 1);
        for (let i = 0; i <= steps; i++) {
            const t = i / steps;
            this.paint(Math.round(x0 + (x1 - x0) * t), Math.round(y0 + (y1 - y0) * t));
        }
    }
}

export function paintDisc(map: IdMap, cx: number, cy: number, radius: number, id: number): void {
    const r2 = radius * radius;
    const y0 = Math.max(0, Math.ceil(cy - radius));
    const y1 = Math.min(map.height - 1, Math.floor(cy + radius));
    for (let y = y0; y <= y1; y++) {
        const x0 = Math.max(0, Math.ceil(cx - radius));
        const x1 = Math.min(map.width - 1, Math.floor(cx + radius));
        for (let x = x0; x <= x1; x++) {
            const dx = x - cx;
            const dy = y - cy;
            if (dx * dx + dy * dy <= r2) {
                map.data[y * map.width + x] = id;
            }
        }
    }
}

/** Export the painting as the server's 16-bit single-channel PNG format. */
export function encodeMask(map: IdMap): Uint8Array {
    return encodePng16(map.width, map.height, map.data);
}

/** Re-import an exported (or server-produced) mask PNG. */
export async function importMask(bytes: Uint8Array): Promise<IdMap> {
    const png = await decodePng(bytes);
    if (png.colorType !== 0) throw new Error("mask PNG must be single-channel");
    const data = new Uint16Array(png.width * png.height);
    data.set(png.data);
    return { width: png.width, height: png.height, data };
}

/** Palette JSON in the server wire format. */
export function paletteJson(state: BrushState): string {
    const entries: Record<string, Rgb> = {};
    for (const [id, color] of [...state.palette.entries()].sort((a, b) => a[0] - b[0])) {
        entries[String(id)] = color;
    }
    return JSON.stringify({ background: state.background, entries });
}

/** Distinct, well-separated default colors for newly added ids. */
export function defaultColor(index: number): Rgb {
    const table: Rgb[] = [
        [230, 60, 60],
        [60, 200, 80],
        [70, 90, 230],
        [230, 200, 60],
        [200, 70, 220],
        [70, 210, 210],
        [240, 140, 60],
        [140, 240, 140],
    ];
    return table[index % table.length];
}

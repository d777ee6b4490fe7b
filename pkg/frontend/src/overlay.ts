/**
 * Prediction overlay: alpha-blend per-id palette colors over the query
 * image.  Pure pixel math on ImageData-shaped buffers so it runs (and is
 * tested) without a DOM.
 */

import type { IdMap, Rgb } from "./mask.js";

export interface RgbImage {
    width: number;
    height: number;
    /** RGBA or RGB interleaved bytes. */
    data: Uint8ClampedArray | Uint8Array;
    channels: 3 | 4;
}

export interface OverlayOptions {
    alpha: number;
    /** ids hidden from the overlay (toggled off in the UI) */
    hidden?: Set<number>;
}

/**
 * c = alpha * color + (1 - alpha) * image, per pixel, foreground ids only.
 * Background (id 0) pixels are never overlaid.
 */
export function renderOverlay(
    image: RgbImage,
    mask: IdMap,
    colors: Map<number, Rgb>,
    options: OverlayOptions,
): RgbImage {
    if (image.width !== mask.width || image.height !== mask.height) {
        throw new Error(
            `image ${image.width}x${image.height} vs mask ${mask.width}x${mask.height}`,
        );
    }
    const { alpha } = options;
    const hidden = options.hidden ?? new Set<number>();
    const out = new Uint8ClampedArray(image.width * image.height * 4);
    const ic = image.channels;
    for (let i = 0; i < image.width * image.height; i++) {
        const r = image.data[i * ic];
        const g = image.data[i * ic + 1];
        const b = image.data[i * ic + 2];
        const id = mask.data[i];
        let or = r;
        let og = g;
        let ob = b;
        if (id !== 0 && !hidden.has(id)) {
            const color = colors.get(id);
            if (color) {
                or = alpha * color[0] + (1 - alpha) * r;
                og = alpha * color[1] + (1 - alpha) * g;
                ob = alpha * color[2] + (1 - alpha) * b;
            }
        }
        out[i * 4] = Math.round(or);
        out[i * 4 + 1] = Math.round(og);
        out[i * 4 + 2] = Math.round(ob);
        out[i * 4 + 3] = 255;
    }
    return { width: image.width, height: image.height, data: out, channels: 4 };
}

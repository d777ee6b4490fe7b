/**
 * Minimal PNG codec for the mask formats the service speaks:
 *  - encode: 16-bit single-channel (id maps), lossless, stored-deflate blocks
 *  - decode: 8/16-bit grayscale and 8-bit RGB, any standard filter
 *
 * Decoding inflates IDAT with the platform DecompressionStream, so it works
 * in browsers and in node without dependencies.
 */

const PNG_SIGNATURE = new Uint8Array([137, 80, 78, 71, 13, 10, 26, 10]);

const CRC_TABLE = (() => {
    const table = new Uint32Array(256);
    for (let n = 0; n < 256; n++) {
        let c = n;
        for (let k = 0; k < 8; k++) {
            c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
        }
        table[n] = c >>> 0;
    }
    return table;
})();

function crc32(bytes: Uint8Array): number {
    let c = 0xffffffff;
    for (let i = 0; i < bytes.length; i++) {
        c = CRC_TABLE[(c ^ bytes[i]) & 0xff] ^ (c >>> 8);
    }
    return (c ^ 0xffffffff) >>> 0;
}

function adler32(bytes: Uint8Array): number {
    let a = 1;
    let b = 0;
    for (let i = 0; i < bytes.length; i++) {
        a = (a + bytes[i]) % 65521;
        b = (b + a) % 65521;
    }
    return ((b << 16) | a) >>> 0;
}

function chunk(type: string, payload: Uint8Array): Uint8Array {
    const out = new Uint8Array(12 + payload.length);
    const view = new DataView(out.buffer);
    view.setUint32(0, payload.length);
    for (let i = 0; i < 4; i++) {
        out[4 + i] = type.charCodeAt(i);
    }
    out.set(payload, 8);
    view.setUint32(8 + payload.length, crc32(out.subarray(4, 8 + payload.length)));
    return out;
}

/** zlib stream built from stored (uncompressed) deflate blocks. */
function zlibStored(data: Uint8Array): Uint8Array {
    const blocks: Uint8Array[] = [new Uint8Array([0x78, 0x01])];
    const max = 65535;
    for (let off = 0; off < data.length || off === 0; off += max) {
        const part = data.subarray(off, Math.min(off + max, data.length));
        const last = off + max >= data.length ? 1 : 0;
        const header = new Uint8Array(5);
        header[0] = last;
        header[1] = part.length & 0xff;
        header[2] = part.length >>> 8;
        header[3] = ~part.length & 0xff;
        header[4] = (~part.length >>> 8) & 0xff;
        blocks.push(header, part);
        if (last) break;
    }
    const trailer = new Uint8Array(4);
    new DataView(trailer.buffer).setUint32(0, adler32(data));
    blocks.push(trailer);
    const total = blocks.reduce((n, b) => n + b.length, 0);
    const out = new Uint8Array(total);
    let pos = 0;
    for (const b of blocks) {
        out.set(b, pos);
        pos += b.length;
    }
    return out;
}

/** Encode a 16-bit single-channel id map as PNG (grayscale, depth 16). */
export function encodePng16(width: number, height: number, ids: Uint16Array): Uint8Array {
    if (ids.length !== width * height) {
        throw new Error(`expected ${width * height} ids, got ${ids.length}`);
    }
    const ihdr = new Uint8Array(13);
    const view = new DataView(ihdr.buffer);
    view.setUint32(0, width);
    view.setUint32(4, height);
    ihdr[8] = 16; // bit depth
    ihdr[9] = 0; // grayscale
    // compression/filter/interlace stay 0

    const rowBytes = width * 2;
    const raw = new Uint8Array(height * (rowBytes + 1));
    for (let y = 0; y < height; y++) {
        const row = y * (rowBytes + 1);
        raw[row] = 0; // filter: none
        for (let x = 0; x < width; x++) {
            const v = ids[y * width + x];
            raw[row + 1 + 2 * x] = v >>> 8;
            raw[row + 2 + 2 * x] = v & 0xff;
        }
    }
    const parts = [
        PNG_SIGNATURE,
        chunk("IHDR", ihdr),
        chunk("IDAT", zlibStored(raw)),
        chunk("IEND", new Uint8Array(0)),
    ];
    const total = parts.reduce((n, p) => n + p.length, 0);
    const out = new Uint8Array(total);
    let pos = 0;
    for (const p of parts) {
        out.set(p, pos);
        pos += p.length;
    }
    return out;
}

export interface DecodedPng {
    width: number;
    height: number;
    bitDepth: 8 | 16;
    /** 0 = grayscale, 2 = RGB */
    colorType: 0 | 2;
    channels: number;
    /** Row-major samples, channel-interleaved; Uint16Array iff bitDepth 16. */
    data: Uint8Array | Uint16Array;
}

async function inflate(zdata: Uint8Array): Promise<Uint8Array> {
    const ds = new DecompressionStream("deflate");
    const stream = new Blob([zdata as BlobPart]).stream().pipeThrough(ds);
    const buf = await new Response(stream).arrayBuffer();
    return new Uint8Array(buf);
}

function paeth(a: number, b: number, c: number): number {
    const p = a + b - c;
    const pa = Math.abs(p - a);
    const pb = Math.abs(p - b);
    const pc = Math.abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

export async function decodePng(bytes: Uint8Array): Promise<DecodedPng> {
    for (let i = 0; i < 8; i++) {
        if (bytes[i] !== PNG_SIGNATURE[i]) throw new Error("not a PNG");
    }
    const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
    let off = 8;
    let width = 0;
    let height = 0;
    let bitDepth = 0;
    let colorType = 0;
    const idats: Uint8Array[] = [];
    while (off < bytes.length) {
        const len = view.getUint32(off);
        const type = String.fromCharCode(bytes[off + 4], bytes[off + 5], bytes[off + 6], bytes[off + 7]);
        const payload = bytes.subarray(off + 8, off + 8 + len);
        if (type === "IHDR") {
            const h = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
            width = h.getUint32(0);
            height = h.getUint32(4);
            bitDepth = payload[8];
            colorType = payload[9];
            if (payload[12] !== 0) throw new Error("interlaced PNG not supported");
        } else if (type === "IDAT") {
            idats.push(payload);
        } else if (type === "IEND") {
            break;
        }
        off += 12 + len;
    }
    if ((bitDepth !== 8 && bitDepth !== 16) || (colorType !== 0 && colorType !== 2)) {
        throw new Error(`unsupported PNG: depth ${bitDepth} color type ${colorType}`);
    }
    const channels = colorType === 2 ? 3 : 1;
    const zdata = new Uint8Array(idats.reduce((n, c) => n + c.length, 0));
    let zpos = 0;
    for (const c of idats) {
        zdata.set(c, zpos);
        zpos += c.length;
    }
    const raw = await inflate(zdata);

    const sampleBytes = bitDepth === 16 ? 2 : 1;
    const bpp = channels * sampleBytes;
    const rowBytes = width * bpp;
    const recon = new Uint8Array(height * rowBytes);
    for (let y = 0; y < height; y++) {
        const filter = raw[y * (rowBytes + 1)];
        const src = y * (rowBytes + 1) + 1;
        const dst = y * rowBytes;
        for (let x = 0; x < rowBytes; x++) {
            const rawByte = raw[src + x];
            const left = x >= bpp ? recon[dst + x - bpp] : 0;
            const up = y > 0 ? recon[dst + x - rowBytes] : 0;
            const upLeft = y > 0 && x >= bpp ? recon[dst + x - rowBytes - bpp] : 0;
            let value: number;
            switch (filter) {
                case 0:
                    value = rawByte;
                    break;
                case 1:
                    value = rawByte + left;
                    break;
                case 2:
                    value = rawByte + up;
                    break;
                case 3:
                    value = rawByte + ((left + up) >> 1);
                    break;
                case 4:
                    value = rawByte + paeth(left, up, upLeft);
                    break;
                default:
                    throw new Error(`unknown PNG filter ${filter}`);
            }
            recon[dst + x] = value & 0xff;
        }
    }

    if (bitDepth === 8) {
        return { width, height, bitDepth: 8, colorType: colorType as 0 | 2, channels, data: recon };
    }
    const out = new Uint16Array(width * height * channels);
    for (let i = 0; i < out.length; i++) {
        out[i] = (recon[2 * i] << 8) | recon[2 * i + 1];
    }
    return { width, height, bitDepth: 16, colorType: colorType as 0 | 2, channels, data: out };
}

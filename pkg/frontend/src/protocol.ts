// Wire protocol: one JSON session-info message on connect, then binary frames
// downlink; JSON control messages uplink.

export interface SessionInfo {
    fps: number;
    H: number;
    W: number;
    omega: number;
    p: number;
}

export interface FrameMessage {
    index: number;
    w: number;
    h: number;
    pixels: Uint8Array;
}

const FRAME_HEADER_BYTES = 16;
// "FRM1" read as a little-endian u32
const FRAME_MAGIC = 0x314d5246;

export function parseSessionInfo(text: string): SessionInfo {
    let doc: any;
    try {
        doc = JSON.parse(text);
    } catch {
        throw new Error("session info is not JSON");
    }
    if (doc === null || typeof doc !== "object" || doc.type !== "session_info") {
        throw new Error(`expected session_info, got ${doc && doc.type}`);
    }
    for (const key of ["fps", "H", "W", "omega", "p"]) {
        if (typeof doc[key] !== "number" || !isFinite(doc[key])) {
            throw new Error(`session info missing numeric ${key}`);
        }
    }
    return { fps: doc.fps, H: doc.H, W: doc.W, omega: doc.omega, p: doc.p };
}

export function decodeFrame(buf: ArrayBuffer): FrameMessage {
    if (buf.byteLength < FRAME_HEADER_BYTES) {
        throw new Error("frame shorter than its header");
    }
    const view = new DataView(buf);
    if (view.getUint32(0, true) !== FRAME_MAGIC) {
        throw new Error("bad frame magic");
    }
    const index = view.getUint32(4, true);
    const w = view.getUint16(8, true);
    const h = view.getUint16(10, true);
    const pixels = new Uint8Array(buf, FRAME_HEADER_BYTES);
    if (pixels.length !== w * h) {
        throw new Error(`frame payload ${pixels.length} != ${w}x${h}`);
    }
    return { index, w, h, pixels };
}

export function encodeControl(keys: string[], seq: number): string {
    return JSON.stringify({ type: "control", keys, seq });
}

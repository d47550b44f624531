// Cockpit session wiring. The socket and paint surface are injected so the
// same logic runs under a browser WebSocket + canvas and under tests.
//
// The socket reader never blocks on painting: incoming frames land in a
// one-slot latest-frame buffer and paintTick() draws whatever is newest.

import { HudStats } from "./hud.js";
import { KeyTracker } from "./keymap.js";
import {
    FrameMessage,
    SessionInfo,
    decodeFrame,
    encodeControl,
    parseSessionInfo,
} from "./protocol.js";

export const CONTROL_HZ = 10;

export interface CockpitSocket {
    binaryType: string;
    send(data: string): void;
    close(): void;
    addEventListener(type: string, listener: (ev: any) => void): void;
}

export type SessionState = "connecting" | "live" | "error" | "closed";

export interface CockpitHooks {
    onSession?(info: SessionInfo): void;
    onPaint?(frame: FrameMessage): void;
    onState?(state: SessionState, detail?: string): void;
}

export class CockpitClient {
    readonly keys = new KeyTracker();
    readonly hud: HudStats;
    session: SessionInfo | null = null;
    state: SessionState = "connecting";

    private latest: FrameMessage | null = null;
    private dirty = false;
    private seq = 0;

    constructor(
        private socket: CockpitSocket,
        private hooks: CockpitHooks = {},
        now: () => number = () => Date.now(),
    ) {
        this.hud = new HudStats(now);
        socket.binaryType = "arraybuffer";
        socket.addEventListener("message", (ev: any) => this.onMessage(ev.data));
        socket.addEventListener("close", () => this.setState("closed"));
        socket.addEventListener("error", () => this.setState("error", "socket error"));
    }

    private setState(state: SessionState, detail?: string): void {
        this.state = state;
        this.hooks.onState?.(state, detail);
    }

    private onMessage(data: any): void {
        if (typeof data === "string") {
            this.onText(data);
            return;
        }
        try {
            const frame = decodeFrame(data as ArrayBuffer);
            this.hud.onFrame(frame.index);
            this.latest = frame; // stale undrawn frames are overwritten
            this.dirty = true;
        } catch {
            this.hud.onBadFrame();
        }
    }

    private onText(text: string): void {
        if (this.session === null) {
            try {
                this.session = parseSessionInfo(text);
            } catch (e) {
                this.setState("error", (e as Error).message);
                this.socket.close();
                return;
            }
            this.setState("live");
            this.hooks.onSession?.(this.session);
            return;
        }
        try {
            const doc = JSON.parse(text);
            if (doc.type === "error") {
                this.setState("error", doc.message);
            }
        } catch {
            // non-JSON text after the handshake: ignore
        }
    }

    /** One 10 Hz key sample; sends a control message or stays silent. */
    sampleKeys(): string | null {
        const symbol = this.keys.symbol();
        if (symbol === null || this.state !== "live") {
            return null;
        }
        this.socket.send(encodeControl(this.keys.intents(), this.seq));
        this.seq += 1;
        this.hud.onControl(symbol);
        return symbol;
    }

    get nextSeq(): number {
        return this.seq;
    }

    /** Paint the newest frame if one arrived since the last tick. */
    paintTick(): FrameMessage | null {
        if (!this.dirty || this.latest === null) {
            return null;
        }
        this.dirty = false;
        this.hooks.onPaint?.(this.latest);
        return this.latest;
    }

    close(): void {
        this.socket.close();
    }
}

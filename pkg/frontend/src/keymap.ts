// Held-key state and its total mapping onto the drive vocabulary: every key
// state maps to exactly one message-or-silence outcome.

export type DriveSymbol = "D" | "DL" | "DR";

const KEY_INTENTS: Record<string, string> = {
    KeyW: "forward",
    ArrowUp: "forward",
    KeyA: "left",
    ArrowLeft: "left",
    KeyD: "right",
    ArrowRight: "right",
};

export class KeyTracker {
    private held = new Set<string>();

    keyDown(code: string): void {
        const intent = KEY_INTENTS[code];
        if (intent) {
            this.held.add(intent);
        }
    }

    keyUp(code: string): void {
        const intent = KEY_INTENTS[code];
        if (intent) {
            this.held.delete(intent);
        }
    }

    clear(): void {
        this.held.clear();
    }

    /** Key names for the wire message, stable order. */
    intents(): string[] {
        return ["forward", "left", "right"].filter((k) => this.held.has(k));
    }

    /** The symbol this state maps to, or null for silence (no forward). */
    symbol(): DriveSymbol | null {
        if (!this.held.has("forward")) {
            return null;
        }
        if (this.held.has("left")) {
            return "DL"; // left beats right, matching the server
        }
        if (this.held.has("right")) {
            return "DR";
        }
        return "D";
    }
}

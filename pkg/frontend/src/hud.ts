// HUD statistics: effective fps over a 1 s sliding window, frame-index gap
// accounting, stall detection, last-sent control.

const FPS_WINDOW_MS = 1000;
const STALL_MS = 2000;

export class HudStats {
    drops = 0;
    framesSeen = 0;
    badFrames = 0;
    lastControl = "none";

    private times: number[] = [];
    private lastIndex = -1;
    private lastFrameAt = -1;

    constructor(private now: () => number) {}

    onFrame(index: number): void {
        if (this.lastIndex >= 0 && index > this.lastIndex + 1) {
            this.drops += index - this.lastIndex - 1;
        }
        this.lastIndex = index;
        this.framesSeen += 1;
        const t = this.now();
        this.lastFrameAt = t;
        this.times.push(t);
        while (this.times.length && this.times[0] < t - FPS_WINDOW_MS) {
            this.times.shift();
        }
    }

    onBadFrame(): void {
        this.badFrames += 1;
    }

    onControl(symbol: string): void {
        this.lastControl = symbol;
    }

    fps(): number {
        const t = this.now();
        const inWindow = this.times.filter((x) => x >= t - FPS_WINDOW_MS).length;
        return (inWindow * 1000) / FPS_WINDOW_MS;
    }

    stalled(): boolean {
        return this.lastFrameAt >= 0 && this.now() - this.lastFrameAt >= STALL_MS;
    }
}

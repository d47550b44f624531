// Browser entry: canvas + keyboard against a live server.

import { CONTROL_HZ, CockpitClient } from "./client.js";
import { FrameMessage } from "./protocol.js";

const params = new URLSearchParams(location.search);
const url = params.get("server") ?? "ws://127.0.0.1:8080";

const canvas = document.getElementById("view") as HTMLCanvasElement;
const status = document.getElementById("status") as HTMLElement;
const hudBox = document.getElementById("hud") as HTMLElement;
const retry = document.getElementById("retry") as HTMLButtonElement;

let client: CockpitClient | null = null;
let timers: number[] = [];

function paint(frame: FrameMessage): void {
    if (canvas.width !== frame.w || canvas.height !== frame.h) {
        canvas.width = frame.w;
        canvas.height = frame.h;
    }
    const ctx = canvas.getContext("2d")!;
    const img = ctx.createImageData(frame.w, frame.h);
    for (let i = 0; i < frame.pixels.length; i++) {
        const v = frame.pixels[i];
        img.data[4 * i] = v;
        img.data[4 * i + 1] = v;
        img.data[4 * i + 2] = v;
        img.data[4 * i + 3] = 255;
    }
    ctx.putImageData(img, 0, 0); // CSS image-rendering: pixelated upscales it
}

function connect(): void {
    timers.forEach(clearInterval);
    timers = [];
    retry.hidden = true;
    status.textContent = `connecting to ${url}`;
    const ws = new WebSocket(url);
    client = new CockpitClient(ws, {
        onSession: (info) =>
            (status.textContent =
                `live: ${info.W}x${info.H} @ ${info.fps} fps, omega=${info.omega}`),
        onPaint: paint,
        onState: (state, detail) => {
            if (state === "error" || state === "closed") {
                status.textContent = `${state}${detail ? ": " + detail : ""}`;
                retry.hidden = false;
            }
        },
    });
    timers.push(window.setInterval(() => client?.sampleKeys(), 1000 / CONTROL_HZ));
    timers.push(
        window.setInterval(() => {
            if (!client) return;
            const stalled = client.hud.stalled() ? " | STALLED" : "";
            hudBox.textContent =
                `fps ${client.hud.fps().toFixed(1)} | drops ${client.hud.drops}` +
                ` | control ${client.hud.lastControl}${stalled}`;
        }, 250),
    );
    const loop = () => {
        client?.paintTick();
        requestAnimationFrame(loop);
    };
    requestAnimationFrame(loop);
}

document.addEventListener("keydown", (e) => {
    client?.keys.keyDown(e.code);
    if (e.code.startsWith("Arrow")) e.preventDefault();
});
document.addEventListener("keyup", (e) => client?.keys.keyUp(e.code));
window.addEventListener("blur", () => client?.keys.clear());
retry.addEventListener("click", connect);

connect();

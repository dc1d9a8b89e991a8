/**
 * Session client: one WebSocket, one tick timer, one render path.
 *
 * At most one action message leaves per tick. Frames render strictly in
 * index order through the OrderingGate; the HUD tracks frame-arrival gaps
 * and the server's stats stream.
 */

import { hudText, HudState, LatencyRing } from "./hud.js";
import { InputTracker } from "./input.js";
import { CanvasBlitter, OrderingGate } from "./render.js";
import { actionMessage, decodeFrame, initMessage, parseServerMessage } from "./protocol.js";

export interface ClientOptions {
  seed: number;
  tickMs: number;
  debug: boolean;
  canvas: HTMLCanvasElement;
  hud: HTMLElement;
}

export class SessionClient {
  private ws: WebSocket | null = null;
  private input = new InputTracker();
  private gate = new OrderingGate();
  private blitter: CanvasBlitter;
  private state: HudState;
  private timer: number | null = null;
  private lastFrameAt = 0;

  constructor(private opts: ClientOptions) {
    this.blitter = new CanvasBlitter(opts.canvas);
    this.state = {
      connected: false,
      tick: 0,
      stats: null,
      ring: new LatencyRing(),
      debug: opts.debug,
    };
  }

  connect(): void {
    const proto = location.protocol === "https:" ? "wss" : "ws";
    this.ws = new WebSocket(`${proto}://${location.host}/session`);
    this.ws.binaryType = "arraybuffer";
    this.ws.onopen = () => {
      this.ws!.send(initMessage(this.opts.seed));
    };
    this.ws.onmessage = (ev) => this.onMessage(ev);
    this.ws.onclose = () => {
      this.state.connected = false;
      this.stopTicking();
      this.renderHud();
    };
  }

  bindDom(): void {
    window.addEventListener("keydown", (e) => {
      if (!e.repeat) this.input.keyDown(e.code);
    });
    window.addEventListener("keyup", (e) => this.input.keyUp(e.code));
    this.opts.canvas.addEventListener("click", () => {
      this.opts.canvas.requestPointerLock();
    });
    window.addEventListener("mousemove", (e) => {
      if (document.pointerLockElement === this.opts.canvas) {
        this.input.mouseMove(e.movementX);
      }
    });
    window.addEventListener("blur", () => this.input.clear());
  }

  private onMessage(ev: MessageEvent): void {
    if (ev.data instanceof ArrayBuffer) {
      const frame = decodeFrame(ev.data);
      if (!frame) {
        console.error("undecodable frame dropped");
        return;
      }
      if (!this.gate.admit(frame.index)) return;
      const now = performance.now();
      if (this.lastFrameAt > 0) this.state.ring.push(now - this.lastFrameAt);
      this.lastFrameAt = now;
      this.blitter.blit(frame);
      this.renderHud();
      return;
    }
    const msg = parseServerMessage(String(ev.data));
    if (!msg) return;
    if (msg.type === "ready") {
      this.state.connected = true;
      this.startTicking();
    } else if (msg.type === "stats") {
      this.state.stats = msg;
    } else if (msg.type === "error") {
      console.error("server error:", msg.code);
    }
    this.renderHud();
  }

  private startTicking(): void {
    this.timer = window.setInterval(() => {
      if (!this.ws || this.ws.readyState !== WebSocket.OPEN) return;
      this.ws.send(actionMessage(this.input.sample(), this.state.tick));
      this.state.tick += 1;
    }, this.opts.tickMs);
  }

  private stopTicking(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  private renderHud(): void {
    this.opts.hud.textContent = hudText(this.state);
  }
}

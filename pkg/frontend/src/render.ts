/**
 * Frame ordering gate and canvas blitting.
 *
 * Frames must render strictly in index order; late or duplicate frames are
 * dropped, never shown. The gate is pure logic so it is testable without a
 * browser; the canvas side converts RGB8 to RGBA and upscales with
 * nearest-neighbor to keep the toy resolution honest.
 */

import type { DecodedFrame } from "./protocol.js";

export class OrderingGate {
  private last = -1;
  dropped = 0;
  rendered = 0;

  /** Returns true when the frame should be displayed. */
  admit(index: number): boolean {
    if (index <= this.last) {
      this.dropped += 1;
      return false;
    }
    this.last = index;
    this.rendered += 1;
    return true;
  }

  get lastIndex(): number {
    return this.last;
  }
}

export function rgbToRgba(pixels: Uint8Array, width: number,
                          height: number): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(new ArrayBuffer(width * height * 4));
  for (let i = 0, j = 0; i < pixels.length; i += 3, j += 4) {
    out[j] = pixels[i];
    out[j + 1] = pixels[i + 1];
    out[j + 2] = pixels[i + 2];
    out[j + 3] = 255;
  }
  return out;
}

export class CanvasBlitter {
  private ctx: CanvasRenderingContext2D;
  private off: HTMLCanvasElement | null = null;

  constructor(private canvas: HTMLCanvasElement) {
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d context unavailable");
    this.ctx = ctx;
    this.ctx.imageSmoothingEnabled = false; // nearest-neighbor upscale
  }

  blit(frame: DecodedFrame): void {
    if (!this.off || this.off.width !== frame.width || this.off.height !== frame.height) {
      this.off = document.createElement("canvas");
      this.off.width = frame.width;
      this.off.height = frame.height;
    }
    const octx = this.off.getContext("2d")!;
    const img = new ImageData(rgbToRgba(frame.pixels, frame.width, frame.height),
      frame.width, frame.height);
    octx.putImageData(img, 0, 0);
    this.ctx.imageSmoothingEnabled = false;
    this.ctx.drawImage(this.off, 0, 0, this.canvas.width, this.canvas.height);
  }
}

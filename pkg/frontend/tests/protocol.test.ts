import { describe, expect, it } from "vitest";

import {
  actionMessage,
  decodeFrame,
  FRAME_VERSION,
  HEADER_BYTES,
  parseServerMessage,
} from "../src/protocol.js";

function craftFrame(index: number, width: number, height: number, pixels: number[]): ArrayBuffer {
  const buf = new ArrayBuffer(HEADER_BYTES + pixels.length);
  const view = new DataView(buf);
  view.setUint8(0, 0x57); // W
  view.setUint8(1, 0x50); // P
  view.setUint8(2, 0x4c); // L
  view.setUint8(3, 0x59); // Y
  view.setUint8(4, FRAME_VERSION);
  view.setBigUint64(5, BigInt(index), true);
  view.setUint16(13, width, true);
  view.setUint16(15, height, true);
  view.setUint8(17, 0);
  new Uint8Array(buf, HEADER_BYTES).set(pixels);
  return buf;
}

describe("decodeFrame", () => {
  it("decodes a crafted 2x2 frame with exact pixels", () => {
    const pixels = Array.from({ length: 12 }, (_, i) => i * 3);
    const frame = decodeFrame(craftFrame(42, 2, 2, pixels));
    expect(frame).not.toBeNull();
    expect(frame!.index).toBe(42);
    expect(frame!.width).toBe(2);
    expect(frame!.height).toBe(2);
    expect([...frame!.pixels]).toEqual(pixels);
  });

  it("drops truncated payloads without crashing", () => {
    const whole = craftFrame(0, 2, 2, new Array(12).fill(0));
    expect(decodeFrame(whole.slice(0, whole.byteLength - 1))).toBeNull();
    expect(decodeFrame(whole.slice(0, 6))).toBeNull();
    expect(decodeFrame(new ArrayBuffer(0))).toBeNull();
  });

  it("rejects bad magic and version", () => {
    const buf = craftFrame(0, 2, 2, new Array(12).fill(0));
    const bad = new Uint8Array(buf.slice(0));
    bad[0] = 0x58;
    expect(decodeFrame(bad.buffer)).toBeNull();
    const badVersion = new Uint8Array(buf.slice(0));
    badVersion[4] = 99;
    expect(decodeFrame(badVersion.buffer)).toBeNull();
  });

  it("decodes a large index via u64", () => {
    const frame = decodeFrame(craftFrame(4294967296 + 5, 1, 1, [1, 2, 3]));
    expect(frame!.index).toBe(4294967301);
  });
});

describe("messages", () => {
  it("action message masks to 6 bits", () => {
    expect(JSON.parse(actionMessage(0xff, 3))).toEqual({ type: "action", keys: 63, tick: 3 });
  });

  it("parses server messages and tolerates junk", () => {
    expect(parseServerMessage('{"type":"lag"}')).toEqual({ type: "lag" });
    expect(parseServerMessage("not json")).toBeNull();
    expect(parseServerMessage("{}")).toBeNull();
  });
});

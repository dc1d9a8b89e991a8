/**
 * Wire protocol shared with the session server.
 *
 * Client -> server: JSON text messages. Server -> client: JSON text plus
 * binary frames: "WPLY" | version u8=1 | frame_index u64 LE | width u16 LE |
 * height u16 LE | format u8=0 (RGB8) | payload.
 *
 * The key bitmask layout mirrors the simulator exactly; the loopback test
 * pins it against a shared fixture.
 */

export const KEY_FORWARD = 1;
export const KEY_BACK = 2;
export const KEY_STRAFE_LEFT = 4;
export const KEY_STRAFE_RIGHT = 8;
export const KEY_TURN_LEFT = 16;
export const KEY_TURN_RIGHT = 32;

export const FRAME_MAGIC = 0x57504c59; // "WPLY" big-endian read
export const FRAME_VERSION = 1;
export const FORMAT_RGB8 = 0;
export const HEADER_BYTES = 18;

export interface DecodedFrame {
  index: number;
  width: number;
  height: number;
  pixels: Uint8Array; // RGB8, row-major
}

export function decodeFrame(buffer: ArrayBuffer): DecodedFrame | null {
  if (buffer.byteLength < HEADER_BYTES) return null;
  const view = new DataView(buffer);
  if (view.getUint32(0, false) !== FRAME_MAGIC) return null;
  if (view.getUint8(4) !== FRAME_VERSION) return null;
  const index = Number(view.getBigUint64(5, true));
  const width = view.getUint16(13, true);
  const height = view.getUint16(15, true);
  if (view.getUint8(17) !== FORMAT_RGB8) return null;
  const payload = new Uint8Array(buffer, HEADER_BYTES);
  if (payload.byteLength !== width * height * 3) return null;
  return { index, width, height, pixels: payload };
}

export interface InitMessage {
  type: "init";
  seed: number;
}

export interface ActionMessage {
  type: "action";
  keys: number;
  tick: number;
}

export function initMessage(seed: number): string {
  const msg: InitMessage = { type: "init", seed };
  return JSON.stringify(msg);
}

export function actionMessage(keys: number, tick: number): string {
  const msg: ActionMessage = { type: "action", keys: keys & 0x3f, tick };
  return JSON.stringify(msg);
}

export interface StatsMessage {
  type: "stats";
  session: number;
  tick: number;
  chunk: number;
  chunk_ms: number;
  fps: number;
  memory: number[];
  pose: [number, number, number];
}

export type ServerMessage =
  | { type: "ready"; session: number; w: number; h: number }
  | StatsMessage
  | { type: "lag" }
  | { type: "error"; code: string };

export function parseServerMessage(text: string): ServerMessage | null {
  try {
    const msg = JSON.parse(text);
    if (typeof msg.type === "string") return msg as ServerMessage;
  } catch {
    /* fall through */
  }
  return null;
}

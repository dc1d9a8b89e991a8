/**
 * Keyboard and pointer-lock mouse capture, reduced to a per-tick bitmask.
 *
 * WASD moves, Q/E turn; horizontal mouse motion under pointer lock
 * accumulates and converts to discrete turn bits at a fixed pixels-per-step
 * threshold (look is discrete, matching the action lattice). Identical key
 * timelines always produce identical action sequences.
 */

import {
  KEY_BACK,
  KEY_FORWARD,
  KEY_STRAFE_LEFT,
  KEY_STRAFE_RIGHT,
  KEY_TURN_LEFT,
  KEY_TURN_RIGHT,
} from "./protocol.js";

export const KEY_BINDINGS: Record<string, number> = {
  KeyW: KEY_FORWARD,
  KeyS: KEY_BACK,
  KeyA: KEY_STRAFE_LEFT,
  KeyD: KEY_STRAFE_RIGHT,
  KeyQ: KEY_TURN_LEFT,
  KeyE: KEY_TURN_RIGHT,
  ArrowUp: KEY_FORWARD,
  ArrowDown: KEY_BACK,
  ArrowLeft: KEY_TURN_LEFT,
  ArrowRight: KEY_TURN_RIGHT,
};

export const MOUSE_PIXELS_PER_TURN = 24;

export class InputTracker {
  private pressed = new Set<string>();
  private mouseAccum = 0;

  keyDown(code: string): void {
    if (code in KEY_BINDINGS) this.pressed.add(code);
  }

  keyUp(code: string): void {
    this.pressed.delete(code);
  }

  mouseMove(dx: number): void {
    this.mouseAccum += dx;
  }

  clear(): void {
    this.pressed.clear();
    this.mouseAccum = 0;
  }

  /** Bitmask for this tick; consumes one accumulated mouse turn step. */
  sample(): number {
    let keys = 0;
    for (const code of this.pressed) keys |= KEY_BINDINGS[code];
    if (this.mouseAccum <= -MOUSE_PIXELS_PER_TURN) {
      keys |= KEY_TURN_LEFT;
      this.mouseAccum += MOUSE_PIXELS_PER_TURN;
    } else if (this.mouseAccum >= MOUSE_PIXELS_PER_TURN) {
      keys |= KEY_TURN_RIGHT;
      this.mouseAccum -= MOUSE_PIXELS_PER_TURN;
    }
    // opposing pairs cancel rather than travel together
    if ((keys & KEY_FORWARD) && (keys & KEY_BACK)) keys &= ~(KEY_FORWARD | KEY_BACK);
    if ((keys & KEY_STRAFE_LEFT) && (keys & KEY_STRAFE_RIGHT))
      keys &= ~(KEY_STRAFE_LEFT | KEY_STRAFE_RIGHT);
    if ((keys & KEY_TURN_LEFT) && (keys & KEY_TURN_RIGHT))
      keys &= ~(KEY_TURN_LEFT | KEY_TURN_RIGHT);
    return keys;
  }
}

export interface TimelineEvent {
  tick: number;
  down?: string[];
  up?: string[];
  mouse_dx?: number;
}

/** Replay a scripted key timeline into the per-tick action sequence. */
export function replayTimeline(events: TimelineEvent[], ticks: number): number[] {
  const tracker = new InputTracker();
  const byTick = new Map<number, TimelineEvent[]>();
  for (const ev of events) {
    const list = byTick.get(ev.tick) ?? [];
    list.push(ev);
    byTick.set(ev.tick, list);
  }
  const out: number[] = [];
  for (let t = 0; t < ticks; t++) {
    for (const ev of byTick.get(t) ?? []) {
      for (const code of ev.down ?? []) tracker.keyDown(code);
      for (const code of ev.up ?? []) tracker.keyUp(code);
      if (ev.mouse_dx) tracker.mouseMove(ev.mouse_dx);
    }
    out.push(tracker.sample());
  }
  return out;
}

/**
 * Latency/FPS HUD state: a ring buffer of recent frame-arrival gaps plus the
 * server's last stats message, rendered as overlay text. Percentiles are
 * defined by the nearest-rank rule so an offline recomputation can match
 * them exactly.
 */

import type { StatsMessage } from "./protocol.js";

export const RING_SIZE = 120;

export class LatencyRing {
  private values: number[] = [];

  push(ms: number): void {
    this.values.push(ms);
    if (this.values.length > RING_SIZE) this.values.shift();
  }

  get size(): number {
    return this.values.length;
  }

  snapshot(): number[] {
    return [...this.values];
  }

  percentile(p: number): number {
    if (this.values.length === 0) return NaN;
    return nearestRank(this.values, p);
  }
}

/** Nearest-rank percentile over a copy of the data. */
export function nearestRank(values: number[], p: number): number {
  const sorted = [...values].sort((a, b) => a - b);
  const rank = Math.max(1, Math.ceil((p / 100) * sorted.length));
  return sorted[rank - 1];
}

export interface HudState {
  connected: boolean;
  tick: number;
  stats: StatsMessage | null;
  ring: LatencyRing;
  debug: boolean;
}

export function hudText(state: HudState): string {
  const lines: string[] = [];
  if (!state.connected) {
    lines.push("disconnected");
    return lines.join("\n");
  }
  const fps = state.stats ? state.stats.fps.toFixed(1) : "--";
  const chunkMs = state.stats ? state.stats.chunk_ms.toFixed(1) : "--";
  lines.push(`${fps} fps  chunk ${chunkMs} ms  tick ${state.tick}`);
  if (state.ring.size >= 2) {
    lines.push(
      `frame gap p50 ${state.ring.percentile(50).toFixed(1)} ms` +
        `  p95 ${state.ring.percentile(95).toFixed(1)} ms`,
    );
  }
  if (state.debug && state.stats) {
    const mem = state.stats.memory.length ? state.stats.memory.join(",") : "-";
    lines.push(`memory chunks [${mem}]  pose ${state.stats.pose
      .map((v) => v.toFixed(2)).join(", ")}`);
  }
  return lines.join("\n");
}

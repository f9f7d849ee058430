/**
 * Latency HUD bookkeeping. Every number shown is derived from an append-only
 * event log, so a test (or a suspicious user) can recompute the HUD from the
 * logged events and get the same values.
 */

export interface HudEvent {
  kind: "pose_sent" | "chunk_shown";
  atMs: number;
  seq?: number; // pose_sent: sequence number of the pose
  chunkIndex?: number; // chunk_shown
  frames?: number; // chunk_shown: frames delivered
  poseSeq?: number; // chunk_shown: newest pose the server conditioned on
  stalenessMs?: number; // chunk_shown: from the server Stats message
}

export interface HudSnapshot {
  fps: number | null;
  latencyMs: number | null;
  stalenessMs: number | null;
  chunksShown: number;
  indexGaps: number;
  unmatchedChunks: number;
}

const FPS_WINDOW_MS = 3000;

export class LatencyHud {
  readonly log: HudEvent[] = [];
  private lastIndex: number | null = null;

  poseSent(seq: number, atMs: number): void {
    this.log.push({ kind: "pose_sent", atMs, seq });
  }

  /** Records a displayed chunk; stats carry the server-side pose match. */
  chunkShown(
    chunkIndex: number,
    frames: number,
    poseSeq: number | null,
    stalenessMs: number | null,
    atMs: number,
  ): void {
    this.log.push({
      kind: "chunk_shown",
      atMs,
      chunkIndex,
      frames,
      poseSeq: poseSeq ?? undefined,
      stalenessMs: stalenessMs ?? undefined,
    });
    this.lastIndex = chunkIndex;
  }

  /** True when the stream skipped indices (a warning, not an error). */
  hasGapBefore(chunkIndex: number): boolean {
    return this.lastIndex !== null && chunkIndex > this.lastIndex + 1;
  }

  snapshot(nowMs: number): HudSnapshot {
    return LatencyHud.recompute(this.log, nowMs);
  }

  /** Pure recomputation from the event log; the HUD itself calls this. */
  static recompute(log: readonly HudEvent[], nowMs: number): HudSnapshot {
    const sentAt = new Map<number, number>();
    let frames = 0;
    let shown = 0;
    let gaps = 0;
    let unmatched = 0;
    let lastIndex: number | null = null;
    let latency: number | null = null;
    let staleness: number | null = null;
    for (const ev of log) {
      if (ev.kind === "pose_sent") {
        sentAt.set(ev.seq as number, ev.atMs);
        continue;
      }
      shown += 1;
      if (ev.atMs >= nowMs - FPS_WINDOW_MS) frames += ev.frames ?? 0;
      if (lastIndex !== null && (ev.chunkIndex as number) > lastIndex + 1) gaps += 1;
      lastIndex = ev.chunkIndex as number;
      // end-to-end latency: display time minus send time of the matched pose
      if (ev.poseSeq !== undefined && sentAt.has(ev.poseSeq)) {
        latency = ev.atMs - (sentAt.get(ev.poseSeq) as number);
      } else if (ev.poseSeq !== undefined) {
        unmatched += 1;
      }
      staleness = ev.stalenessMs ?? staleness;
    }
    const windowS = Math.min(FPS_WINDOW_MS, Math.max(1, nowMs - (log[0]?.atMs ?? nowMs))) / 1000;
    return {
      fps: shown ? frames / windowS : null,
      latencyMs: latency,
      stalenessMs: staleness,
      chunksShown: shown,
      indexGaps: gaps,
      unmatchedChunks: unmatched,
    };
  }
}

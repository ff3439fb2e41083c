/**
 * Playback state shared by every panel.
 *
 * A single frame index drives the 3-D view, both metric cursors, and the
 * state badge; renderState() derives all of them from that one index in
 * the same tick, so panels can never drift apart.
 */

export interface SessionData {
  trajId: number;
  nFrames: number;
  rg: number[];
  sasa: number[];
  states: number[];
  chi: number[][];
}

export interface RenderState {
  frameIndex: number;
  rgCursorIndex: number;
  rgCursorValue: number;
  sasaCursorIndex: number;
  sasaCursorValue: number;
  stateBadge: number;
  stateProbabilities: number[];
  playing: boolean;
}

export class SessionViewModel {
  private frameIndex = 0;
  private fractionalFrame = 0;
  private rate = 60; // frames per second
  private isPlaying = false;

  constructor(private readonly data: SessionData) {
    if (data.nFrames < 1) throw new Error("session needs at least one frame");
    const lengths = [data.rg.length, data.sasa.length, data.states.length, data.chi.length];
    if (lengths.some((n) => n !== data.nFrames)) {
      throw new Error(`series lengths ${lengths} do not match ${data.nFrames} frames`);
    }
  }

  get currentFrame(): number {
    return this.frameIndex;
  }

  get playing(): boolean {
    return this.isPlaying;
  }

  get playbackRate(): number {
    return this.rate;
  }

  scrubTo(index: number): void {
    const clamped = Math.min(Math.max(Math.trunc(index), 0), this.data.nFrames - 1);
    this.frameIndex = clamped;
    this.fractionalFrame = clamped;
  }

  stepForward(): void {
    this.scrubTo(this.frameIndex + 1);
  }

  stepBack(): void {
    this.scrubTo(this.frameIndex - 1);
  }

  play(rate?: number): void {
    if (rate !== undefined) {
      if (!(rate > 0)) throw new Error(`playback rate must be positive, got ${rate}`);
      this.rate = rate;
    }
    this.isPlaying = true;
  }

  pause(): void {
    this.isPlaying = false;
  }

  /** Advance playback by elapsed wall time; wraps at the end. */
  advance(elapsedMs: number): void {
    if (!this.isPlaying) return;
    this.fractionalFrame += (elapsedMs / 1000) * this.rate;
    this.fractionalFrame %= this.data.nFrames;
    this.frameIndex = Math.trunc(this.fractionalFrame);
  }

  renderState(): RenderState {
    const i = this.frameIndex;
    return {
      frameIndex: i,
      rgCursorIndex: i,
      rgCursorValue: this.data.rg[i],
      sasaCursorIndex: i,
      sasaCursorValue: this.data.sasa[i],
      stateBadge: this.data.states[i],
      stateProbabilities: this.data.chi[i],
      playing: this.isPlaying,
    };
  }
}

/** Frame-window cache: fetch in blocks so playback never round-trips per frame. */
export class FrameWindowCache {
  private readonly windows = new Map<number, Promise<ArrayBuffer>>();

  constructor(
    private readonly fetchWindow: (start: number, count: number) => Promise<ArrayBuffer>,
    private readonly nFrames: number,
    readonly windowSize = 512,
  ) {}

  windowStart(frame: number): number {
    return Math.trunc(frame / this.windowSize) * this.windowSize;
  }

  get(frame: number): Promise<ArrayBuffer> {
    const start = this.windowStart(frame);
    let pending = this.windows.get(start);
    if (!pending) {
      const count = Math.min(this.windowSize, this.nFrames - start);
      pending = this.fetchWindow(start, count);
      this.windows.set(start, pending);
    }
    return pending;
  }
}

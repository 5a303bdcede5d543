import type { ApiClient } from './api.js';
import type { Outbox } from './outbox.js';
import type { CandidateCard, Decision, Progress, Verdict } from './types.js';

export interface ControllerState {
  card: CandidateCard | null;
  done: boolean;
  offline: boolean;
  tally: Record<Verdict, number>;
  progress: Progress | null;
  canUndo: boolean;
}

interface HistoryEntry {
  card: CandidateCard;
  decision: Decision;
}

/**
 * Queue state machine behind the card view. One verdict maps to exactly one
 * posted decision; undo posts one skip marker and re-presents the card so the
 * next verdict supersedes the original by timestamp. All delivery goes
 * through the outbox, so nothing is lost offline.
 */
export class ReviewController {
  private queue: CandidateCard[] = [];
  private history: HistoryEntry[] = [];
  private listeners: Array<(s: ControllerState) => void> = [];
  private lastTimestamp = 0;
  private serverDone = false;

  state: ControllerState = {
    card: null,
    done: false,
    offline: false,
    tally: { background_only: 0, contains_foreground: 0, skip: 0 },
    progress: null,
    canUndo: false,
  };

  constructor(
    private api: ApiClient,
    private outbox: Outbox,
    private annotatorId: string,
    private opts: { batchSize?: number; now?: () => number } = {},
  ) {}

  onChange(fn: (s: ControllerState) => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    this.state = {
      ...this.state,
      card: this.queue[0] ?? null,
      canUndo: this.history.length > 0,
    };
    for (const fn of this.listeners) fn(this.state);
  }

  /** Strictly increasing timestamps keep rapid corrections ordered and
   * distinct (identical tuples would be deduplicated server-side). */
  private nextTimestamp(): number {
    const now = this.opts.now ? this.opts.now() : Date.now() / 1000;
    this.lastTimestamp = Math.max(now, this.lastTimestamp + 0.001);
    return this.lastTimestamp;
  }

  async start(): Promise<void> {
    await this.drainOutbox();
    await this.refreshProgress();
    await this.fillQueue();
    this.emit();
  }

  private async drainOutbox(): Promise<void> {
    const drained = await this.outbox.flush((d) => this.api.postDecision(d));
    this.state.offline = !drained;
  }

  private async refreshProgress(): Promise<void> {
    try {
      this.state.progress = await this.api.getProgress();
    } catch {
      this.state.offline = true;
    }
  }

  private async fillQueue(): Promise<void> {
    if (this.queue.length > 0 || this.serverDone) return;
    try {
      const batch = await this.api.getBatch(
        this.annotatorId,
        this.opts.batchSize ?? 10,
      );
      // pairs already decided locally but still queued for delivery must not
      // be presented again
      this.queue = batch.items.filter(
        (item) => !this.outbox.hasPending(item.sample_id, item.class_name),
      );
      if (batch.done) {
        this.serverDone = true;
        this.state.done = true;
      }
    } catch {
      this.state.offline = true;
    }
  }

  /** Issue a verdict for the visible card. No card, no decision. */
  async decide(verdict: Verdict): Promise<void> {
    const card = this.queue[0];
    if (!card) return;
    const decision: Decision = {
      sample_id: card.sample_id,
      class_name: card.class_name,
      verdict,
      annotator_id: this.annotatorId,
      timestamp: this.nextTimestamp(),
    };
    this.queue = this.queue.slice(1);
    this.history.push({ card, decision });
    this.state.tally = {
      ...this.state.tally,
      [verdict]: this.state.tally[verdict] + 1,
    };
    this.outbox.push(decision);
    await this.drainOutbox();
    await this.refreshProgress();
    await this.fillQueue();
    if (this.queue.length === 0 && this.serverDone) this.state.done = true;
    this.emit();
  }

  /**
   * Retract the last verdict of this session: posts one skip marker for the
   * same (sample, class) and puts the card back on screen. The server keeps
   * every line; assembly honors the latest non-skip verdict, so deciding the
   * re-presented card supersedes the original.
   */
  async undoLast(): Promise<boolean> {
    const entry = this.history.pop();
    if (!entry) return false; // nothing to undo: no request
    const marker: Decision = {
      sample_id: entry.card.sample_id,
      class_name: entry.card.class_name,
      verdict: 'skip',
      annotator_id: this.annotatorId,
      timestamp: this.nextTimestamp(),
    };
    this.state.tally = {
      ...this.state.tally,
      [entry.decision.verdict]: this.state.tally[entry.decision.verdict] - 1,
    };
    this.queue = [entry.card, ...this.queue];
    this.state.done = false;
    this.outbox.push(marker);
    await this.drainOutbox();
    this.emit();
    return true;
  }

  /** Retry delivery after a network failure. */
  async retry(): Promise<void> {
    await this.drainOutbox();
    if (!this.state.offline) {
      await this.refreshProgress();
      await this.fillQueue();
    }
    this.emit();
  }

  pendingCount(): number {
    return this.outbox.pending().length;
  }
}

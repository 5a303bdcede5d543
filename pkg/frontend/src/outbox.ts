import type { Decision } from './types.js';

// localStorage-shaped; tests substitute an in-memory map
export interface KeyValueStore {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
}

export class MemoryStore implements KeyValueStore {
  private data = new Map<string, string>();
  getItem(key: string) { return this.data.get(key) ?? null; }
  setItem(key: string, value: string) { this.data.set(key, value); }
}

/**
 * Persistent FIFO of decisions awaiting delivery.
 *
 * Decisions are stored with their original timestamps and re-sent verbatim,
 * so a replay after a lost response is an exact duplicate the server
 * acknowledges without a second log line.
 */
export class Outbox {
  constructor(
    private store: KeyValueStore,
    private key = 'review-outbox',
  ) {}

  pending(): Decision[] {
    try {
      return JSON.parse(this.store.getItem(this.key) ?? '[]') as Decision[];
    } catch {
      return [];
    }
  }

  private save(queue: Decision[]): void {
    this.store.setItem(this.key, JSON.stringify(queue));
  }

  push(decision: Decision): void {
    const queue = this.pending();
    queue.push(decision);
    this.save(queue);
  }

  /** Send queued decisions in order; stops at the first failure. Returns
   * true when the queue drained. */
  async flush(post: (d: Decision) => Promise<unknown>): Promise<boolean> {
    let queue = this.pending();
    while (queue.length > 0) {
      try {
        await post(queue[0]);
      } catch {
        return false;
      }
      queue = queue.slice(1);
      this.save(queue);
    }
    return true;
  }

  hasPending(sampleId: string, className: string): boolean {
    return this.pending().some(
      (d) => d.sample_id === sampleId && d.class_name === className,
    );
  }
}

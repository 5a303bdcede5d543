import type { ReviewController } from './controller.js';
import type { ControllerState } from './controller.js';

const KEY_BINDINGS: Record<string, 'background_only' | 'contains_foreground' | 'skip' | 'undo'> = {
  b: 'background_only',
  f: 'contains_foreground',
  s: 'skip',
  u: 'undo',
};

export function mountApp(root: HTMLElement, controller: ReviewController): void {
  root.innerHTML = `
    <div class="app">
      <div id="banner" class="banner" hidden>
        Network trouble: decisions are queued locally.
        <button id="retry">Retry now</button>
      </div>
      <div id="card" hidden>
        <div id="meta"></div>
        <img id="photo" alt="candidate image" />
        <div class="controls">
          <button id="btn-b" title="keyboard: B">Background only (B)</button>
          <button id="btn-f" title="keyboard: F">Contains foreground (F)</button>
          <button id="btn-s" title="keyboard: S">Skip (S)</button>
          <button id="btn-u" title="keyboard: U">Undo (U)</button>
        </div>
      </div>
      <div id="done" hidden>
        <h2>Queue complete</h2>
        <div id="final-counts"></div>
      </div>
      <div id="tally"></div>
      <div id="progress"></div>
    </div>`;

  const el = (id: string) => root.querySelector<HTMLElement>(`#${id}`)!;
  const banner = el('banner');
  const cardBox = el('card');
  const doneBox = el('done');
  const photo = el('photo') as HTMLImageElement;

  function render(state: ControllerState): void {
    banner.hidden = !state.offline;
    cardBox.hidden = state.card === null;
    doneBox.hidden = !(state.done && state.card === null);
    if (state.card) {
      el('meta').textContent =
        `${state.card.class_name}  ·  score ${state.card.score.toFixed(3)}` +
        `  ·  rank ${state.card.rank}`;
      photo.src = state.card.image_url;
    }
    const t = state.tally;
    el('tally').textContent =
      `kept ${t.background_only} · rejected ${t.contains_foreground} · skipped ${t.skip}`;
    if (state.done && state.card === null) {
      el('final-counts').textContent = el('tally').textContent ?? '';
    }
    if (state.progress) {
      const p = state.progress;
      const fraction = p.decided + p.remaining > 0
        ? p.decided / (p.decided + p.remaining)
        : 1;
      el('progress').textContent =
        `${p.decided} decided, ${p.remaining} remaining ` +
        `(${(fraction * 100).toFixed(0)}%) · ` +
        `est. ${Math.ceil(p.estimated_remaining_reviews)} reviews to target`;
    }
    (el('btn-u') as HTMLButtonElement).disabled = !state.canUndo;
  }

  controller.onChange(render);

  const act = (action: string) => {
    if (action === 'undo') void controller.undoLast();
    else void controller.decide(action as 'background_only' | 'contains_foreground' | 'skip');
  };
  el('btn-b').addEventListener('click', () => act('background_only'));
  el('btn-f').addEventListener('click', () => act('contains_foreground'));
  el('btn-s').addEventListener('click', () => act('skip'));
  el('btn-u').addEventListener('click', () => act('undo'));
  root.ownerDocument.addEventListener('keydown', (ev: KeyboardEvent) => {
    const action = KEY_BINDINGS[ev.key.toLowerCase()];
    if (action) act(action);
  });

  el('retry').addEventListener('click', () => void controller.retry());
}

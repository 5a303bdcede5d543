// @vitest-environment jsdom
import { beforeEach, describe, expect, it } from 'vitest';

import { ApiClient } from '../src/api.js';
import { ReviewController } from '../src/controller.js';
import { MemoryStore, Outbox } from '../src/outbox.js';
import { mountApp } from '../src/view.js';
import { FakeServer, cards } from './fakeServer.js';

function mount(server: FakeServer) {
  document.body.innerHTML = '<div id="root"></div>';
  const api = new ApiClient('http://fake', server.fetch);
  let t = 0;
  const controller = new ReviewController(api, new Outbox(new MemoryStore()), 'alice', {
    now: () => ++t,
  });
  mountApp(document.getElementById('root')!, controller);
  return controller;
}

function press(key: string) {
  document.dispatchEvent(new KeyboardEvent('keydown', { key }));
}

async function settle() {
  // let the fire-and-forget keyboard handlers finish their POST round trips
  for (let i = 0; i < 8; i += 1) await Promise.resolve();
  await new Promise((resolve) => setTimeout(resolve, 0));
}

describe('card view', () => {
  beforeEach(() => {
    document.body.innerHTML = '';
  });

  it('binds B to a background_only decision for the visible card', async () => {
    const server = new FakeServer(cards(3));
    const controller = mount(server);
    await controller.start();
    expect(document.querySelector('#meta')!.textContent).toContain('square');

    press('b');
    await settle();
    expect(server.log).toHaveLength(1);
    expect(server.log[0]).toMatchObject({ sample_id: 'c0', verdict: 'background_only' });
    expect((document.querySelector('#photo') as HTMLImageElement).src)
      .toContain('/image/c1');
  });

  it('maps F and S and shows the running tally', async () => {
    const server = new FakeServer(cards(3));
    const controller = mount(server);
    await controller.start();
    press('f');
    await settle();
    press('s');
    await settle();
    expect(server.log.map((d) => d.verdict)).toEqual(['contains_foreground', 'skip']);
    expect(document.querySelector('#tally')!.textContent)
      .toContain('kept 0 · rejected 1 · skipped 1');
  });

  it('shows the completion screen with final counts when done', async () => {
    const server = new FakeServer(cards(1));
    const controller = mount(server);
    await controller.start();
    press('b');
    await settle();
    const done = document.querySelector('#done') as HTMLElement;
    expect(done.hidden).toBe(false);
    expect(document.querySelector('#final-counts')!.textContent).toContain('kept 1');
  });

  it('U undoes and re-presents the card; undo is disabled with no history', async () => {
    const server = new FakeServer(cards(2));
    const controller = mount(server);
    await controller.start();
    expect((document.querySelector('#btn-u') as HTMLButtonElement).disabled).toBe(true);
    press('b');
    await settle();
    press('u');
    await settle();
    expect((document.querySelector('#photo') as HTMLImageElement).src)
      .toContain('/image/c0');
    expect(server.log.map((d) => d.verdict)).toEqual(['background_only', 'skip']);
  });

  it('raises the retry banner when the network fails and clears it after retry', async () => {
    const server = new FakeServer(cards(2));
    let offline = true;
    const flaky: typeof server.fetch = async (url, init) => {
      if (offline && String(url).includes('/decision')) throw new TypeError('down');
      return server.fetch(url, init);
    };
    document.body.innerHTML = '<div id="root"></div>';
    const api = new ApiClient('http://fake', flaky);
    let t = 0;
    const controller = new ReviewController(api, new Outbox(new MemoryStore()), 'alice', {
      now: () => ++t,
    });
    mountApp(document.getElementById('root')!, controller);
    await controller.start();
    press('b');
    await settle();
    const banner = document.querySelector('#banner') as HTMLElement;
    expect(banner.hidden).toBe(false);
    expect(server.log).toHaveLength(0);

    offline = false;
    (document.querySelector('#retry') as HTMLButtonElement).click();
    await settle();
    expect(server.log).toHaveLength(1);
    expect(banner.hidden).toBe(true);
  });
});

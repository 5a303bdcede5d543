import { ApiClient } from './api.js';
import { Outbox } from './outbox.js';
import { ReviewController } from './controller.js';
import { mountApp } from './view.js';

function annotatorId(): string {
  const fromQuery = new URLSearchParams(window.location.search).get('annotator');
  if (fromQuery) {
    window.localStorage.setItem('annotator_id', fromQuery);
    return fromQuery;
  }
  const stored = window.localStorage.getItem('annotator_id');
  if (stored) return stored;
  const fresh = `annotator-${Math.random().toString(36).slice(2, 8)}`;
  window.localStorage.setItem('annotator_id', fresh);
  return fresh;
}

const api = new ApiClient(''); // same origin: the review service hosts us
const outbox = new Outbox(window.localStorage);
const controller = new ReviewController(api, outbox, annotatorId());

mountApp(document.getElementById('root')!, controller);
void controller.start();

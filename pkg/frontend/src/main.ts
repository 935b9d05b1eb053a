// Entrypoint: wire the websocket client, canvas renderer, pointer dragging,
// and the control panel together.

import { Client } from './client.js';
import { DragController } from './drag.js';
import { panelActions } from './panel.js';
import { render } from './render.js';
import { makeViewport } from './transform.js';
import { ViewModel } from './viewmodel.js';

const params = new URLSearchParams(window.location.search);
const wsUrl = params.get('ws') ?? 'ws://127.0.0.1:8765';

const canvas = document.getElementById('scene') as HTMLCanvasElement;
const ctx = canvas.getContext('2d') as CanvasRenderingContext2D;
const vm = new ViewModel();
const viewport = () => makeViewport(canvas.width, canvas.height);

let dirty = true;
const client = new Client(wsUrl, vm, () => {
  dirty = true;
  syncPanel();
});
const drag = new DragController(vm, (cmd) => client.send(cmd), viewport);
const actions = panelActions();

function pointerPoint(ev: PointerEvent) {
  const rect = canvas.getBoundingClientRect();
  return { px: ev.clientX - rect.left, py: ev.clientY - rect.top, timeMs: performance.now() };
}

canvas.addEventListener('pointerdown', (ev) => {
  if (drag.pointerDown(pointerPoint(ev))) {
    canvas.setPointerCapture(ev.pointerId);
  }
});
canvas.addEventListener('pointermove', (ev) => drag.pointerMove(pointerPoint(ev)));
canvas.addEventListener('pointerup', (ev) => {
  drag.pointerUp(pointerPoint(ev));
  canvas.releasePointerCapture(ev.pointerId);
});

function button(id: string, handler: () => void) {
  const el = document.getElementById(id);
  if (el) el.addEventListener('click', handler);
}

button('pause', () => client.send(actions.pause()));
button('resume', () => client.send(actions.resume()));
button('reset', () => {
  const scenario = (document.getElementById('scenario') as HTMLSelectElement | null)?.value;
  const interference = (document.getElementById('interference') as HTMLSelectElement | null)?.value;
  client.send(actions.reset(scenario || undefined, interference || undefined));
});
button('inject', () => {
  const interference = (document.getElementById('interference') as HTMLSelectElement | null)?.value;
  if (interference) client.send(actions.inject(interference));
});

const systemSelect = document.getElementById('system') as HTMLSelectElement | null;
systemSelect?.addEventListener('change', () => {
  client.send(actions.selectSystem(systemSelect.value));
});

function fillSelect(id: string, values: string[], keep = true) {
  const el = document.getElementById(id) as HTMLSelectElement | null;
  if (!el || (keep && el.options.length === values.length)) return;
  const old = el.value;
  el.innerHTML = '';
  for (const v of values) {
    const opt = document.createElement('option');
    opt.value = v;
    opt.textContent = v;
    el.appendChild(opt);
  }
  if (values.includes(old)) el.value = old;
}

function syncPanel() {
  if (!vm.meta) return;
  fillSelect('interference', vm.meta.interferences);
  fillSelect('system', vm.meta.systems);
  fillSelect('scenario', ['tower', 'stick', 'handover']);
  const conn = document.getElementById('connection');
  if (conn) conn.textContent = vm.connection + (vm.lastError ? ` (${vm.lastError})` : '');
}

function loop() {
  if (dirty) {
    render(ctx, viewport(), vm);
    dirty = false;
  }
  requestAnimationFrame(loop);
}

client.connect();
requestAnimationFrame(loop);

// Canvas rendering: pure function of the view model.  Arms draw as link
// segments (frame to parent frame), objects by their shapes, plus chain and
// status overlays.

import { FramePose } from './protocol.js';
import { Viewport, worldToScreen } from './transform.js';
import { ViewModel } from './viewmodel.js';

// The subset of CanvasRenderingContext2D the renderer uses; tests stub it.
export interface Ctx2D {
  clearRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  rect(x: number, y: number, w: number, h: number): void;
  stroke(): void;
  fill(): void;
  fillText(text: string, x: number, y: number): void;
  save(): void;
  restore(): void;
  translate(x: number, y: number): void;
  rotate(angle: number): void;
  setLineDash(segments: number[]): void;
  lineWidth: number;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  fillStyle: string | CanvasGradient | CanvasPattern;
  font: string;
}

const OBJECT_COLORS: Record<string, string> = {
  green: '#2e9e4f',
  blue: '#2a6fd6',
  red: '#d64040',
  block: '#d64040',
  stick: '#8a6b3d',
};

function drawShape(ctx: Ctx2D, vp: Viewport, frame: FramePose, color: string): void {
  const [sx, sy] = worldToScreen(vp, frame.x, frame.y);
  const s = vp.scale;
  ctx.save();
  ctx.translate(sx, sy);
  ctx.rotate(-frame.theta);
  ctx.fillStyle = color;
  ctx.strokeStyle = '#222';
  ctx.beginPath();
  const shape = frame.shape;
  if (shape.type === 'disk') {
    ctx.arc(0, 0, shape.params[0] * s, 0, Math.PI * 2);
    ctx.fill();
  } else if (shape.type === 'box') {
    const [w, h] = shape.params;
    ctx.rect((-w / 2) * s, (-h / 2) * s, w * s, h * s);
    ctx.fill();
  } else if (shape.type === 'hook') {
    const [a, b] = shape.params;
    ctx.lineWidth = 4;
    ctx.moveTo(0, 0);
    ctx.lineTo(a * s, 0);
    ctx.lineTo(a * s, -b * s);
    ctx.stroke();
  }
  ctx.restore();
}

export function render(ctx: Ctx2D, vp: Viewport, vm: ViewModel): void {
  ctx.clearRect(0, 0, vp.width, vp.height);
  const state = vm.state;
  if (!state || !vm.meta) {
    ctx.fillStyle = '#666';
    ctx.font = '16px sans-serif';
    ctx.fillText(vm.connection === 'connected' ? 'waiting for frames' : 'connecting...', 20, 30);
    return;
  }
  const poses = new Map(state.frames.map((f) => [f.name, f]));
  const parents = new Map(vm.meta.topology.map((t) => [t.name, t.parent]));

  // Robot links: a segment from each non-free frame to its parent.
  ctx.strokeStyle = '#444';
  ctx.lineWidth = 5;
  for (const entry of vm.meta.topology) {
    if (entry.joint === 'free' || !entry.parent || entry.parent === 'world') continue;
    const child = poses.get(entry.name);
    const parent = poses.get(entry.parent);
    if (!child || !parent) continue;
    const [x0, y0] = worldToScreen(vp, parent.x, parent.y);
    const [x1, y1] = worldToScreen(vp, child.x, child.y);
    ctx.beginPath();
    ctx.moveTo(x0, y0);
    ctx.lineTo(x1, y1);
    ctx.stroke();
  }

  // Free objects and their children (hook tips ride along).
  for (const frame of state.frames) {
    const isFreeRooted = (() => {
      let name: string | null = frame.name;
      while (name && name !== 'world') {
        const entry = vm.meta.topology.find((t) => t.name === name);
        if (!entry) return false;
        if (entry.joint === 'free') return true;
        name = parents.get(name) ?? null;
      }
      return false;
    })();
    if (isFreeRooted && frame.shape.type !== 'none') {
      drawShape(ctx, vp, frame, OBJECT_COLORS[frame.name] ?? '#888');
    }
    if (frame.shape.type === 'disk' && !isFreeRooted) {
      drawShape(ctx, vp, frame, '#777'); // gripper body
    }
  }

  // Grasp lines for active attachments.
  ctx.strokeStyle = '#c59b00';
  ctx.lineWidth = 2;
  ctx.setLineDash([4, 3]);
  for (const att of state.attachments) {
    const a = poses.get(att.parent);
    const b = poses.get(att.child);
    if (!a || !b) continue;
    const [x0, y0] = worldToScreen(vp, a.x, a.y);
    const [x1, y1] = worldToScreen(vp, b.x, b.y);
    ctx.beginPath();
    ctx.moveTo(x0, y0);
    ctx.lineTo(x1, y1);
    ctx.stroke();
  }
  ctx.setLineDash([]);

  // Overlays: status banner, chain-feasibility badge, active controller.
  ctx.font = '14px sans-serif';
  ctx.fillStyle = '#222';
  ctx.fillText(`t=${state.t.toFixed(2)}s  scenario=${vm.meta.scenario}`, 12, 20);
  const badge =
    state.chain_feasible === null ? 'checking' : state.chain_feasible ? 'feasible' : 'infeasible';
  ctx.fillStyle = state.chain_feasible === false ? '#b00020' : '#22682f';
  ctx.fillText(`chain: ${badge}`, 12, 40);
  if (state.active_chain) {
    ctx.fillStyle = '#333';
    ctx.fillText(`active[${state.active_index}]: ${state.active_chain}`, 12, 60);
  }
  ctx.font = 'bold 18px sans-serif';
  if (state.status === 'success') {
    ctx.fillStyle = '#1d7a33';
    ctx.fillText('SUCCESS', 12, 86);
  } else if (state.status === 'infeasible') {
    ctx.fillStyle = '#b00020';
    ctx.fillText('TASK INFEASIBLE', 12, 86);
  } else if (state.status === 'timeout') {
    ctx.fillStyle = '#b00020';
    ctx.fillText('TIMEOUT', 12, 86);
  } else if (state.status === 'paused') {
    ctx.fillStyle = '#8a6d00';
    ctx.fillText('PAUSED', 12, 86);
  }
  if (state.last_event) {
    ctx.font = '12px sans-serif';
    ctx.fillStyle = '#555';
    ctx.fillText(state.last_event, 12, vp.height - 12);
  }
}

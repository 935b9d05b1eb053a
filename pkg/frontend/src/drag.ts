// Pointer-drag of free objects: hit-test on press (robot links ignored),
// throttled drag commands while moving (<= 30 Hz), a final clamped pose on
// release.  Dragging emits teleports; the engine treats them exactly like
// scripted interferences.

import { Command } from './protocol.js';
import { clampToBounds, screenToWorld, Viewport, WorldBounds, DEFAULT_BOUNDS } from './transform.js';
import { ViewModel } from './viewmodel.js';

export const DRAG_MIN_INTERVAL_MS = 1000 / 30;

export interface PointerPoint {
  px: number;
  py: number;
  timeMs: number;
}

export class DragController {
  private dragging: string | null = null;
  private lastSentMs = -Infinity;

  constructor(
    private readonly vm: ViewModel,
    private readonly send: (cmd: Command) => void,
    private readonly viewport: () => Viewport,
    private readonly bounds: WorldBounds = DEFAULT_BOUNDS,
    private readonly grabRadius = 0.07,
  ) {}

  get active(): string | null {
    return this.dragging;
  }

  /** Hit-test draggable objects; nearest within the grab radius wins. */
  pointerDown(p: PointerPoint): boolean {
    const [wx, wy] = screenToWorld(this.viewport(), p.px, p.py);
    let best: string | null = null;
    let bestD = this.grabRadius;
    for (const name of this.vm.draggableObjects()) {
      const pose = this.vm.framePose(name);
      if (!pose) continue;
      const d = Math.hypot(pose.x - wx, pose.y - wy);
      if (d < bestD) {
        best = name;
        bestD = d;
      }
    }
    this.dragging = best;
    if (best) {
      this.vm.selectedObject = best;
    }
    return best !== null;
  }

  pointerMove(p: PointerPoint): void {
    if (!this.dragging) return;
    if (p.timeMs - this.lastSentMs < DRAG_MIN_INTERVAL_MS) return;
    this.lastSentMs = p.timeMs;
    this.emit(p);
  }

  pointerUp(p: PointerPoint): void {
    if (!this.dragging) return;
    this.emit(p); // final pose always goes out
    this.dragging = null;
    this.vm.selectedObject = null;
  }

  private emit(p: PointerPoint): void {
    if (!this.dragging) return;
    const [wx, wy] = screenToWorld(this.viewport(), p.px, p.py);
    const [cx, cy] = clampToBounds(this.bounds, wx, wy);
    const pose = this.vm.framePose(this.dragging);
    this.send({
      type: 'drag',
      object: this.dragging,
      x: Number(cx.toFixed(6)),
      y: Number(cy.toFixed(6)),
      theta: pose ? pose.theta : 0,
    });
  }
}

// The view model holds exactly the last server frame: the UI never simulates
// or extrapolates, and frames older than the newest seen are discarded.

import { MetaFrame, ServerFrame, StateFrame } from './protocol.js';

export type ConnectionStatus = 'connecting' | 'connected' | 'disconnected';

export class ViewModel {
  state: StateFrame | null = null;
  meta: MetaFrame | null = null;
  connection: ConnectionStatus = 'connecting';
  selectedObject: string | null = null;
  lastError: string | null = null;

  /** Returns true when the frame changed the model. */
  ingest(frame: ServerFrame): boolean {
    if (frame.type === 'meta') {
      this.meta = frame;
      this.state = null; // a new session invalidates old poses
      return true;
    }
    if (frame.type === 'error') {
      this.lastError = frame.message;
      return true;
    }
    if (this.state !== null && frame.t < this.state.t) {
      return false; // stale frame: out-of-order delivery is dropped
    }
    this.state = frame;
    return true;
  }

  /** Names of frames a drag may grab: free objects only, never robot links. */
  draggableObjects(): string[] {
    if (!this.meta) return [];
    return this.meta.topology.filter((t) => t.joint === 'free').map((t) => t.name);
  }

  framePose(name: string): { x: number; y: number; theta: number } | null {
    const f = this.state?.frames.find((fr) => fr.name === name);
    return f ? { x: f.x, y: f.y, theta: f.theta } : null;
  }
}

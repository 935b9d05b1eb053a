// Wire protocol: newline-free single-object JSON messages over one websocket.
// Server frames: state | meta | error.  Client commands: drag | pause |
// resume | reset | inject | select_system.

export interface ShapeSpec {
  type: 'none' | 'disk' | 'box' | 'hook';
  params: number[];
}

export interface FramePose {
  name: string;
  x: number;
  y: number;
  theta: number;
  shape: ShapeSpec;
}

export interface AttachmentSpec {
  parent: string;
  child: string;
}

export interface StateFrame {
  type: 'state';
  t: number;
  frames: FramePose[];
  attachments: AttachmentSpec[];
  active_chain: string | null;
  active_index: number | null;
  chain_feasible: boolean | null;
  status: string;
  last_event: string | null;
}

export interface TopologyEntry {
  name: string;
  parent: string | null;
  joint: string;
  shape: ShapeSpec;
}

export interface MetaFrame {
  type: 'meta';
  scenario: string;
  system: string;
  interference: string;
  topology: TopologyEntry[];
  systems: string[];
  interferences: string[];
}

export interface ErrorFrame {
  type: 'error';
  message: string;
}

export type ServerFrame = StateFrame | MetaFrame | ErrorFrame;

export type Command =
  | { type: 'drag'; object: string; x: number; y: number; theta: number }
  | { type: 'pause' }
  | { type: 'resume' }
  | { type: 'reset'; scenario?: string; interference?: string }
  | { type: 'inject'; interference: string }
  | { type: 'select_system'; system: string };

function isNumber(v: unknown): v is number {
  return typeof v === 'number' && Number.isFinite(v);
}

function isShape(v: unknown): v is ShapeSpec {
  if (typeof v !== 'object' || v === null) return false;
  const s = v as Record<string, unknown>;
  return typeof s.type === 'string' && Array.isArray(s.params);
}

export function isStateFrame(v: unknown): v is StateFrame {
  if (typeof v !== 'object' || v === null) return false;
  const f = v as Record<string, unknown>;
  if (f.type !== 'state' || !isNumber(f.t) || !Array.isArray(f.frames)) return false;
  if (!Array.isArray(f.attachments)) return false;
  if (typeof f.status !== 'string') return false;
  for (const fr of f.frames as unknown[]) {
    const p = fr as Record<string, unknown>;
    if (typeof p.name !== 'string' || !isNumber(p.x) || !isNumber(p.y) || !isNumber(p.theta)) {
      return false;
    }
    if (!isShape(p.shape)) return false;
  }
  return true;
}

export function isMetaFrame(v: unknown): v is MetaFrame {
  if (typeof v !== 'object' || v === null) return false;
  const f = v as Record<string, unknown>;
  return f.type === 'meta' && typeof f.scenario === 'string' && Array.isArray(f.topology);
}

export function isErrorFrame(v: unknown): v is ErrorFrame {
  if (typeof v !== 'object' || v === null) return false;
  const f = v as Record<string, unknown>;
  return f.type === 'error' && typeof f.message === 'string';
}

/** Parse a server message; null for frames we do not understand (ignored). */
export function parseServerFrame(text: string): ServerFrame | null {
  let data: unknown;
  try {
    data = JSON.parse(text);
  } catch {
    return null;
  }
  if (isStateFrame(data) || isMetaFrame(data) || isErrorFrame(data)) return data;
  return null;
}

/** Encode a command: one JSON object, no newlines anywhere. */
export function encodeCommand(cmd: Command): string {
  const text = JSON.stringify(cmd);
  if (text.includes('\n')) throw new Error('commands must be newline-free');
  return text;
}

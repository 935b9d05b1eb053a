import { describe, expect, it } from 'vitest';

import {
  encodeCommand,
  isStateFrame,
  parseServerFrame,
  StateFrame,
} from '../src/protocol.js';

const goodState: StateFrame = {
  type: 'state',
  t: 1.25,
  frames: [
    { name: 'green', x: 0.1, y: 0.2, theta: 0, shape: { type: 'box', params: [0.06, 0.06] } },
  ],
  attachments: [{ parent: 'grasp', child: 'green' }],
  active_chain: 'pick > place',
  active_index: 1,
  chain_feasible: true,
  status: 'running',
  last_event: null,
};

describe('protocol', () => {
  it('accepts valid state frames', () => {
    expect(isStateFrame(goodState)).toBe(true);
    expect(parseServerFrame(JSON.stringify(goodState))).toEqual(goodState);
  });

  it('rejects malformed frames instead of crashing', () => {
    expect(parseServerFrame('not json')).toBeNull();
    expect(parseServerFrame('{"type":"state"}')).toBeNull();
    expect(parseServerFrame('{"type":"unknown","x":1}')).toBeNull();
    const badFrame = { ...goodState, frames: [{ name: 'green', x: 'oops' }] };
    expect(parseServerFrame(JSON.stringify(badFrame))).toBeNull();
  });

  it('parses meta and error frames', () => {
    const meta = {
      type: 'meta',
      scenario: 'tower',
      system: 'fc3',
      interference: 'I0',
      topology: [],
      systems: ['fc3'],
      interferences: ['I0'],
    };
    expect(parseServerFrame(JSON.stringify(meta))?.type).toBe('meta');
    expect(parseServerFrame('{"type":"error","message":"boom"}')?.type).toBe('error');
  });

  it('encodes commands as newline-free single objects', () => {
    const text = encodeCommand({ type: 'drag', object: 'green', x: 0.1, y: 0.2, theta: 0 });
    expect(text.includes('\n')).toBe(false);
    const parsed = JSON.parse(text);
    expect(parsed).toEqual({ type: 'drag', object: 'green', x: 0.1, y: 0.2, theta: 0 });
    expect(encodeCommand({ type: 'pause' })).toBe('{"type":"pause"}');
    expect(encodeCommand({ type: 'inject', interference: 'I4' })).toBe(
      '{"type":"inject","interference":"I4"}',
    );
    expect(encodeCommand({ type: 'select_system', system: 'rgds' })).toBe(
      '{"type":"select_system","system":"rgds"}',
    );
  });
});

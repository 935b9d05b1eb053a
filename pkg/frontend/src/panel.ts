// Control panel actions expressed as commands; the DOM wiring lives in main.

import { Command } from './protocol.js';

export interface PanelActions {
  pause(): Command;
  resume(): Command;
  reset(scenario?: string, interference?: string): Command;
  inject(interference: string): Command;
  selectSystem(system: string): Command;
}

export function panelActions(): PanelActions {
  return {
    pause: () => ({ type: 'pause' }),
    resume: () => ({ type: 'resume' }),
    reset: (scenario?: string, interference?: string) => {
      const cmd: Command = { type: 'reset' };
      if (scenario) cmd.scenario = scenario;
      if (interference) cmd.interference = interference;
      return cmd;
    },
    inject: (interference: string) => ({ type: 'inject', interference }),
    selectSystem: (system: string) => ({ type: 'select_system', system }),
  };
}

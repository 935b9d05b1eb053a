// Thin websocket client: parse inbound frames into the view model, queue
// outbound commands, reconnect with backoff (the server resumes the session).

import { Command, encodeCommand, parseServerFrame } from './protocol.js';
import { ViewModel } from './viewmodel.js';

export class Client {
  private ws: WebSocket | null = null;
  private retryMs = 500;

  constructor(
    private readonly url: string,
    private readonly vm: ViewModel,
    private readonly onChange: () => void = () => {},
  ) {}

  connect(): void {
    this.vm.connection = 'connecting';
    this.onChange();
    const ws = new WebSocket(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.vm.connection = 'connected';
      this.retryMs = 500;
      this.onChange();
    };
    ws.onmessage = (ev: MessageEvent<string>) => {
      const frame = parseServerFrame(String(ev.data));
      if (frame && this.vm.ingest(frame)) {
        this.onChange();
      }
    };
    ws.onclose = () => {
      this.vm.connection = 'disconnected';
      this.onChange();
      setTimeout(() => this.connect(), this.retryMs);
      this.retryMs = Math.min(this.retryMs * 2, 5000);
    };
  }

  send(cmd: Command): void {
    if (this.ws && this.ws.readyState === WebSocket.OPEN) {
      this.ws.send(encodeCommand(cmd));
    }
  }
}

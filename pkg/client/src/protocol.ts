// Wire protocol shared with the simulation server: newline-delimited JSON
// over TCP.  The server greets with hello, the client acknowledges with
// ready, then every state message is answered by exactly one action message.

export interface HelloMsg {
  type: "hello";
  states: string[];
  inputs: string[];
  eta: number;
}

export interface StateMsg {
  type: "state";
  t: number;
  x: number[];
}

export interface ActionMsg {
  type: "action";
  u: number[];
}

export interface ReadyMsg {
  type: "ready";
}

export type ServerMsg = HelloMsg | StateMsg;

/** Splits a byte stream into newline-delimited JSON messages. */
export class LineDecoder {
  private buf = "";

  push(chunk: Buffer | string): unknown[] {
    this.buf += chunk.toString();
    const out: unknown[] = [];
    let nl;
    while ((nl = this.buf.indexOf("\n")) >= 0) {
      const line = this.buf.slice(0, nl).trim();
      this.buf = this.buf.slice(nl + 1);
      if (line.length === 0) continue;
      out.push(JSON.parse(line));
    }
    return out;
  }

  /** Bytes still waiting for their terminating newline. */
  pending(): number {
    return this.buf.length;
  }
}

export function encode(msg: ActionMsg | ReadyMsg): string {
  return JSON.stringify(msg) + "\n";
}

export function isHello(msg: unknown): msg is HelloMsg {
  const m = msg as HelloMsg;
  return (
    !!m && m.type === "hello" && Array.isArray(m.states) && Array.isArray(m.inputs) &&
    typeof m.eta === "number"
  );
}

export function isState(msg: unknown): msg is StateMsg {
  const m = msg as StateMsg;
  return !!m && m.type === "state" && typeof m.t === "number" && Array.isArray(m.x);
}

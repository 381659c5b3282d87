#!/usr/bin/env node
// External advanced-controller client: connects to a simulation server,
// completes the hello/ready handshake, then answers every state message
// with an action from the selected policy.  Optional latency injection
// exercises the server's timeout fallback path.

import net from "net";
import { encode, isHello, isState, LineDecoder, HelloMsg } from "./protocol.js";
import { makePolicy, parsePolicySpec, Policy, PolicySpec } from "./policies.js";

export interface SessionOptions {
  host: string;
  port: number;
  policy: PolicySpec;
  latencyEvery?: number; // inject a delay before answering every Nth state
  latencyMs?: number;
  log?: (line: string) => void;
}

export interface SessionLog {
  hello: HelloMsg;
  answered: number;
  injectedDelays: number;
  malformed: number;
  meanHandleMs: number;
  maxHandleMs: number;
}

export function runSession(opts: SessionOptions): Promise<SessionLog> {
  const log = opts.log ?? (() => undefined);
  const policy: Policy = makePolicy(opts.policy);
  return new Promise((resolve, reject) => {
    const sock = net.createConnection({ host: opts.host, port: opts.port });
    sock.setNoDelay(true);
    const decoder = new LineDecoder();
    let hello: HelloMsg | null = null;
    let answered = 0;
    let injected = 0;
    let malformed = 0;
    let handleTotal = 0;
    let handleMax = 0;
    let pendingTimer: NodeJS.Timeout | null = null;
    const queue: { t: number; x: number[] }[] = [];
    let draining = false;

    const fail = (err: Error) => {
      sock.destroy();
      reject(err);
    };

    const answer = (t: number, x: number[]) => {
      const started = performance.now();
      const u = policy(t, x, hello!.inputs.length);
      sock.write(encode({ type: "action", u }));
      answered += 1;
      const elapsed = performance.now() - started;
      handleTotal += elapsed;
      handleMax = Math.max(handleMax, elapsed);
    };

    const drain = () => {
      if (draining) return;
      const next = queue.shift();
      if (!next) return;
      const wantDelay =
        opts.latencyEvery && opts.latencyMs && (answered + injected + 1) % opts.latencyEvery === 0;
      if (wantDelay) {
        draining = true;
        injected += 1;
        log(`injecting ${opts.latencyMs} ms delay before period t=${next.t.toFixed(4)}`);
        pendingTimer = setTimeout(() => {
          draining = false;
          pendingTimer = null;
          answer(next.t, next.x);
          drain();
        }, opts.latencyMs);
      } else {
        answer(next.t, next.x);
        drain();
      }
    };

    sock.on("data", (chunk) => {
      let msgs: unknown[];
      try {
        msgs = decoder.push(chunk);
      } catch (e) {
        malformed += 1;
        return fail(new Error(`malformed message from server: ${e}`));
      }
      for (const msg of msgs) {
        if (hello === null) {
          if (!isHello(msg)) {
            malformed += 1;
            return fail(new Error(`expected hello, got ${JSON.stringify(msg)}`));
          }
          hello = msg;
          log(`hello: states=[${msg.states}] inputs=[${msg.inputs}] eta=${msg.eta}`);
          sock.write(encode({ type: "ready" }));
        } else if (isState(msg)) {
          queue.push({ t: msg.t, x: msg.x });
          drain();
        } else {
          malformed += 1;
          return fail(new Error(`unexpected message ${JSON.stringify(msg)}`));
        }
      }
    });

    sock.on("error", (err) => fail(err));
    sock.on("close", () => {
      if (pendingTimer) clearTimeout(pendingTimer);
      if (hello === null) {
        return reject(new Error("connection closed before handshake"));
      }
      resolve({
        hello,
        answered,
        injectedDelays: injected,
        malformed,
        meanHandleMs: answered ? handleTotal / answered : 0,
        maxHandleMs: handleMax,
      });
    });
  });
}

function parseArgs(argv: string[]): SessionOptions {
  const opts: SessionOptions = {
    host: "127.0.0.1",
    port: 9000,
    policy: { kind: "constant", values: [0.035] },
    log: (line) => console.error(`[client] ${line}`),
  };
  for (let i = 0; i < argv.length; i++) {
    const a = argv[i];
    const next = () => {
      const v = argv[++i];
      if (v === undefined) throw new Error(`missing value for ${a}`);
      return v;
    };
    switch (a) {
      case "--host":
        opts.host = next();
        break;
      case "--port":
        opts.port = Number(next());
        break;
      case "--policy":
        opts.policy = parsePolicySpec(next());
        break;
      case "--latency-every":
        opts.latencyEvery = Number(next());
        break;
      case "--latency-ms":
        opts.latencyMs = Number(next());
        break;
      case "--quiet":
        opts.log = () => undefined;
        break;
      case "--help":
        console.log(
          "usage: client --host H --port P --policy constant:V|affine:JSON|random-walk:STEP,SEED|scripted:JSON" +
            " [--latency-every N --latency-ms M] [--quiet]",
        );
        process.exit(0);
        break;
      default:
        throw new Error(`unknown argument ${a}`);
    }
  }
  return opts;
}

const isMain = process.argv[1] !== undefined && import.meta.url.endsWith(process.argv[1].split("/").pop()!);

if (isMain) {
  (async () => {
    try {
      const opts = parseArgs(process.argv.slice(2));
      const session = await runSession(opts);
      console.log(
        JSON.stringify({
          answered: session.answered,
          injectedDelays: session.injectedDelays,
          malformed: session.malformed,
          meanHandleMs: Number(session.meanHandleMs.toFixed(3)),
          maxHandleMs: Number(session.maxHandleMs.toFixed(3)),
        }),
      );
      process.exit(session.malformed === 0 ? 0 : 1);
    } catch (err) {
      console.error(`[client] fatal: ${err}`);
      process.exit(1);
    }
  })();
}

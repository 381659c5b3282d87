// Pluggable control policies.  These are deliberately simple (scripted,
// not learned): the client exists to exercise the controller boundary, and
// an intentionally unsafe constant policy is the main test vehicle.

export type Policy = (t: number, x: number[], arity: number) => number[];

export interface PolicySpec {
  kind: "constant" | "affine" | "random-walk" | "scripted";
  values?: number[];
  gain?: number[][];
  offset?: number[];
  step?: number;
  seed?: number;
  actions?: number[][];
}

/** Small deterministic LCG so random-walk sessions are reproducible. */
export function lcg(seed: number): () => number {
  let s = (seed >>> 0) || 1;
  return () => {
    s = (Math.imul(s, 1664525) + 1013904223) >>> 0;
    return s / 2 ** 32;
  };
}

export function makePolicy(spec: PolicySpec): Policy {
  switch (spec.kind) {
    case "constant": {
      const vals = spec.values ?? [0];
      return (_t, _x, arity) => fit(vals, arity);
    }
    case "affine": {
      const gain = spec.gain ?? [];
      const offset = spec.offset ?? [];
      return (_t, x, arity) => {
        const u: number[] = [];
        for (let j = 0; j < arity; j++) {
          let v = offset[j] ?? 0;
          const row = gain[j] ?? [];
          for (let i = 0; i < x.length; i++) v += (row[i] ?? 0) * x[i];
          u.push(v);
        }
        return u;
      };
    }
    case "random-walk": {
      const rand = lcg(spec.seed ?? 1);
      const step = spec.step ?? 0.01;
      let last: number[] | null = null;
      return (_t, _x, arity) => {
        if (last === null) last = new Array(arity).fill(0);
        last = last.map((v) => v + step * (2 * rand() - 1));
        return [...last];
      };
    }
    case "scripted": {
      const actions = spec.actions ?? [[0]];
      let k = 0;
      return (_t, _x, arity) => fit(actions[k++ % actions.length], arity);
    }
  }
}

function fit(values: number[], arity: number): number[] {
  const u: number[] = [];
  for (let j = 0; j < arity; j++) u.push(values[j % values.length]);
  return u;
}

/** Parses command-line policy specs like "constant:0.035" or "affine:{...}". */
export function parsePolicySpec(text: string): PolicySpec {
  const sep = text.indexOf(":");
  const kind = sep < 0 ? text : text.slice(0, sep);
  const rest = sep < 0 ? "" : text.slice(sep + 1);
  switch (kind) {
    case "constant":
      return { kind, values: rest.split(",").map(Number) };
    case "affine":
      return { kind, ...JSON.parse(rest) };
    case "random-walk": {
      const [step, seed] = rest ? rest.split(",").map(Number) : [0.01, 1];
      return { kind, step, seed };
    }
    case "scripted":
      return { kind, actions: JSON.parse(rest) };
    default:
      throw new Error(`unknown policy kind '${kind}'`);
  }
}

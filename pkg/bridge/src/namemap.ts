/**
 * Ordered renaming rules that turn a source state dict into the tensor set
 * a VSPR encoder checkpoint must carry.
 *
 * A map file is JSON: the full target encoder config plus a rule list.
 * Rules run in order. `{i}` in names expands over layers or extractor
 * stages when `repeat` is set. Three ops exist:
 *
 *   copy        byte-for-byte value copy (default)
 *   transpose   2-D source stored (out, in) lands as (in, out)
 *   weight_norm merge a g/v parametrization into one tensor, g*v/|v|,
 *               with the norm taken per slice of axis `dim`
 */

import * as fs from "node:fs";
import {
  elementCount,
  isFloatDtype,
  toFloat64,
  type SourceFile,
  type SourceTensor,
} from "./safetensors.js";
import { requiredShapes, type EncoderConfigDict } from "./vspr.js";

export class NameMapError extends Error {}

export type RuleOp = "copy" | "transpose" | "weight_norm";

export interface MapRule {
  to: string;
  op?: RuleOp;
  from?: string;
  from_g?: string;
  from_v?: string;
  dim?: number;
  repeat?: "layers" | "stages";
  note?: string;
}

export interface NameMapFile {
  description?: string;
  config: EncoderConfigDict;
  rules: MapRule[];
}

/** One rule after `{i}` expansion. */
export interface ResolvedRule {
  to: string;
  op: RuleOp;
  sources: string[];
  dim?: number;
}

export interface PlanEntry {
  shape: number[];
  rule: ResolvedRule;
  /** Transform result at full precision; export rounds it to float32. */
  compute(): Float64Array;
}

export interface Plan {
  entries: Map<string, PlanEntry>;
  unmapped: string[];
  warnings: string[];
}

function substitute(template: string, i: number): string {
  return template.replaceAll("{i}", String(i));
}

function expandRule(rule: MapRule, cfg: EncoderConfigDict): ResolvedRule[] {
  const op = rule.op ?? "copy";
  const sourcesOf = (i: number | null): string[] => {
    const sub = (s: string) => (i === null ? s : substitute(s, i));
    if (op === "weight_norm") {
      if (!rule.from_g || !rule.from_v) {
        throw new NameMapError(`rule for ${rule.to}: weight_norm needs from_g and from_v`);
      }
      if (rule.from) {
        throw new NameMapError(`rule for ${rule.to}: weight_norm takes from_g/from_v, not from`);
      }
      return [sub(rule.from_g), sub(rule.from_v)];
    }
    if (!rule.from) {
      throw new NameMapError(`rule for ${rule.to}: missing from`);
    }
    return [sub(rule.from)];
  };
  if (!rule.repeat) {
    return [{ to: rule.to, op, sources: sourcesOf(null), dim: rule.dim }];
  }
  const n = rule.repeat === "layers" ? cfg.num_layers : cfg.conv_frontend.length;
  const out: ResolvedRule[] = [];
  for (let i = 0; i < n; i++) {
    out.push({ to: substitute(rule.to, i), op, sources: sourcesOf(i), dim: rule.dim });
  }
  return out;
}

export class NameMap {
  readonly config: EncoderConfigDict;
  readonly description: string;
  readonly rules: ResolvedRule[];
  readonly required: Map<string, number[]>;

  private constructor(config: EncoderConfigDict, description: string, rules: ResolvedRule[]) {
    this.config = config;
    this.description = description;
    this.rules = rules;
    this.required = requiredShapes(config);

    const seen = new Set<string>();
    for (const rule of rules) {
      if (seen.has(rule.to)) {
        throw new NameMapError(`tensor ${rule.to} produced by more than one rule`);
      }
      seen.add(rule.to);
      if (!this.required.has(rule.to)) {
        throw new NameMapError(`rule produces ${rule.to}, which the target config does not define`);
      }
    }
  }

  static fromObject(obj: NameMapFile): NameMap {
    if (!obj || typeof obj !== "object" || !obj.config || !Array.isArray(obj.rules)) {
      throw new NameMapError("map must carry a config object and a rules array");
    }
    const rules = obj.rules.flatMap((r) => expandRule(r, obj.config));
    return new NameMap(obj.config, obj.description ?? "", rules);
  }

  static fromFile(path: string): NameMap {
    let text: string;
    try {
      text = fs.readFileSync(path, "utf-8");
    } catch (err) {
      throw new NameMapError(`cannot read map ${path}: ${(err as Error).message}`);
    }
    let obj: NameMapFile;
    try {
      obj = JSON.parse(text);
    } catch (err) {
      throw new NameMapError(`${path} is not valid JSON: ${(err as Error).message}`);
    }
    return NameMap.fromObject(obj);
  }

  /** Required names no rule produces. Empty for a complete map. */
  uncovered(): string[] {
    const produced = new Set(this.rules.map((r) => r.to));
    return [...this.required.keys()].filter((n) => !produced.has(n)).sort();
  }

  /**
   * Resolve every rule against a parsed source file. Fails hard when a
   * source tensor is absent or a transform result does not match the
   * shape the target config demands. `allowIncomplete` downgrades absent
   * sources to skipped rules, for debugging a partial map.
   */
  plan(source: SourceFile, opts: { allowIncomplete?: boolean } = {}): Plan {
    const entries = new Map<string, PlanEntry>();
    const warnings: string[] = [];
    const consumed = new Set<string>();

    nextRule: for (const rule of this.rules) {
      const inputs: SourceTensor[] = [];
      for (const name of rule.sources) {
        const t = source.tensors.get(name);
        if (!t) {
          if (opts.allowIncomplete) {
            warnings.push(`${rule.to} skipped: source has no ${name}`);
            continue nextRule;
          }
          throw new NameMapError(`required tensor ${rule.to} missing: source has no ${name}`);
        }
        if (!isFloatDtype(t.dtype)) {
          warnings.push(`${rule.to}: source ${name} is ${t.dtype}, converted to float32`);
        }
        inputs.push(t);
        consumed.add(name);
      }
      const entry = resolveTransform(rule, inputs);
      const want = this.required.get(rule.to)!;
      if (!shapesEqual(entry.shape, want)) {
        throw new NameMapError(
          `${rule.to}: transform yields shape [${entry.shape}] but the config demands [${want}]`,
        );
      }
      entries.set(rule.to, entry);
    }
    const unmapped = [...source.tensors.keys()].filter((n) => !consumed.has(n)).sort();
    return { entries, unmapped, warnings };
  }
}

function shapesEqual(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((x, i) => x === b[i]);
}

export function resolveTransform(rule: ResolvedRule, inputs: SourceTensor[]): PlanEntry {
  switch (rule.op) {
    case "copy": {
      const src = inputs[0]!;
      return { shape: [...src.shape], rule, compute: () => toFloat64(src) };
    }
    case "transpose": {
      const src = inputs[0]!;
      if (src.shape.length !== 2) {
        throw new NameMapError(`${rule.to}: transpose needs a 2-D source, got [${src.shape}]`);
      }
      const [rows, cols] = src.shape as [number, number];
      return {
        shape: [cols, rows],
        rule,
        compute: () => {
          const flat = toFloat64(src);
          const out = new Float64Array(flat.length);
          for (let r = 0; r < rows; r++) {
            for (let c = 0; c < cols; c++) {
              out[c * rows + r] = flat[r * cols + c]!;
            }
          }
          return out;
        },
      };
    }
    case "weight_norm": {
      const [g, v] = inputs as [SourceTensor, SourceTensor];
      const dim = rule.dim ?? v.shape.length - 1;
      if (dim < 0 || dim >= v.shape.length) {
        throw new NameMapError(`${rule.to}: weight_norm dim ${dim} out of range for [${v.shape}]`);
      }
      const slices = v.shape[dim]!;
      if (elementCount(g.shape) !== slices) {
        throw new NameMapError(
          `${rule.to}: g has ${elementCount(g.shape)} elements, expected ${slices} (one per slice of axis ${dim})`,
        );
      }
      return {
        shape: [...v.shape],
        rule,
        compute: () => {
          const gf = toFloat64(g);
          const vf = toFloat64(v);
          // For C-contiguous data the slice index along `dim` recurs with
          // period stride = prod(shape[dim+1:]).
          const stride = v.shape.slice(dim + 1).reduce((a, b) => a * b, 1);
          const norms = new Float64Array(slices);
          for (let i = 0; i < vf.length; i++) {
            const s = Math.floor(i / stride) % slices;
            norms[s] = norms[s]! + vf[i]! * vf[i]!;
          }
          for (let s = 0; s < slices; s++) norms[s] = Math.sqrt(norms[s]!);
          const out = new Float64Array(vf.length);
          for (let i = 0; i < vf.length; i++) {
            const s = Math.floor(i / stride) % slices;
            out[i] = (vf[i]! * gf[s]!) / norms[s]!;
          }
          return out;
        },
      };
    }
  }
}

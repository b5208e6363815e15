/**
 * Export and verification on top of the parser, the name map, and the
 * container writer.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { parseSafetensors, type SourceFile } from "./safetensors.js";
import { NameMap, NameMapError, resolveTransform, type ResolvedRule } from "./namemap.js";
import {
  parseVspr,
  requiredShapes,
  writeVspr,
  VsprError,
  type EncoderConfigDict,
  type PlannedTensor,
} from "./vspr.js";

export const TOOL = "vspr-bridge 0.1.0";

export interface ExportReport {
  out: string;
  tensor_count: number;
  total_params: number;
  file_bytes: number;
  unmapped: string[];
  warnings: string[];
  missing: string[];
}

export interface ExportOptions {
  /** Write whatever the map can produce instead of failing on gaps. */
  allowIncomplete?: boolean;
  /** Extra metadata keys merged into the container header. */
  extraMetadata?: Record<string, unknown>;
}

function readSource(sourcePath: string): SourceFile {
  let buf: Buffer;
  try {
    buf = fs.readFileSync(sourcePath);
  } catch (err) {
    throw new VsprError(`cannot read source ${sourcePath}: ${(err as Error).message}`);
  }
  return parseSafetensors(buf);
}

/** Provenance stored in the container so verification needs no map file. */
interface BridgeRuleMeta {
  op: ResolvedRule["op"];
  from: string[];
  dim?: number;
}

export function exportCheckpoint(
  sourcePath: string,
  map: NameMap,
  outPath: string,
  opts: ExportOptions = {},
): ExportReport {
  const source = readSource(sourcePath);
  const plan = map.plan(source, { allowIncomplete: opts.allowIncomplete });

  const missing = [...map.required.keys()].filter((n) => !plan.entries.has(n)).sort();
  if (missing.length && !opts.allowIncomplete) {
    throw new NameMapError(`map does not produce required tensor ${missing[0]}`);
  }

  const ruleMeta: Record<string, BridgeRuleMeta> = {};
  for (const [name, entry] of plan.entries) {
    ruleMeta[name] = { op: entry.rule.op, from: entry.rule.sources };
    if (entry.rule.op === "weight_norm") {
      ruleMeta[name].dim = entry.rule.dim ?? entry.shape.length - 1;
    }
  }
  const metadata: Record<string, unknown> = {
    format: "vesper-checkpoint",
    kind: "encoder",
    tool: TOOL,
    config: map.config,
    bridge: {
      source: path.basename(sourcePath),
      rules: ruleMeta,
    },
    ...opts.extraMetadata,
  };

  const tensors = new Map<string, PlannedTensor>();
  let totalParams = 0;
  for (const [name, entry] of plan.entries) {
    totalParams += entry.shape.reduce((a, b) => a * b, 1);
    tensors.set(name, { shape: entry.shape, data: () => Float32Array.from(entry.compute()) });
  }
  const { bytes } = writeVspr(outPath, metadata, tensors);

  return {
    out: outPath,
    tensor_count: tensors.size,
    total_params: totalParams,
    file_bytes: bytes,
    unmapped: plan.unmapped,
    warnings: plan.warnings,
    missing,
  };
}

export interface VerifyReport {
  vspr: string;
  tensor_count: number;
  samples: number;
  sampled: string[];
  max_abs_delta: number;
  missing: string[];
  extra: string[];
  failures: string[];
  status: "ok" | "fail";
}

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function sampleNames(names: string[], count: number, seed: number): string[] {
  const pool = [...names];
  const rng = mulberry32(seed);
  const take = Math.min(count, pool.length);
  for (let i = 0; i < take; i++) {
    const j = i + Math.floor(rng() * (pool.length - i));
    [pool[i], pool[j]] = [pool[j]!, pool[i]!];
  }
  return pool.slice(0, take);
}

/**
 * Re-derive a sample of tensors from the original source and compare them
 * element-wise against the exported file. The expected values are computed
 * at float64, so the reported deviation includes the container's own
 * float32 rounding and nothing else.
 */
export function verifyExport(
  sourcePath: string,
  vsprPath: string,
  sampleCount = 16,
  seed = 0,
): VerifyReport {
  let buf: Buffer;
  try {
    buf = fs.readFileSync(vsprPath);
  } catch (err) {
    throw new VsprError(`cannot read ${vsprPath}: ${(err as Error).message}`);
  }
  const file = parseVspr(buf);
  const config = file.metadata["config"] as EncoderConfigDict | undefined;
  if (!config) {
    throw new VsprError(`${vsprPath} has no embedded encoder config`);
  }
  const bridge = file.metadata["bridge"] as { rules?: Record<string, BridgeRuleMeta> } | undefined;
  if (!bridge?.rules) {
    throw new VsprError(`${vsprPath} carries no conversion provenance; nothing to verify against`);
  }

  const required = requiredShapes(config);
  const present = new Set(file.tensors.keys());
  const missing = [...required.keys()].filter((n) => !present.has(n)).sort();
  const extra = [...present].filter((n) => !required.has(n)).sort();

  const source = readSource(sourcePath);
  const candidates = [...present].filter((n) => bridge.rules![n]).sort();
  const sampled = sampleNames(candidates, sampleCount, seed);

  const failures: string[] = [];
  let maxDelta = 0;
  for (const name of sampled) {
    const meta = bridge.rules[name]!;
    const rule: ResolvedRule = { to: name, op: meta.op, sources: meta.from, dim: meta.dim };
    const inputs = [];
    let ok = true;
    for (const src of meta.from) {
      const t = source.tensors.get(src);
      if (!t) {
        failures.push(`${name}: source has no ${src}`);
        ok = false;
        break;
      }
      inputs.push(t);
    }
    if (!ok) continue;
    const entry = resolveTransform(rule, inputs);
    const stored = file.tensors.get(name)!;
    if (
      stored.shape.length !== entry.shape.length ||
      stored.shape.some((x, i) => x !== entry.shape[i])
    ) {
      failures.push(`${name}: stored shape [${stored.shape}] does not match expected [${entry.shape}]`);
      continue;
    }
    const expected = entry.compute();
    const got = stored.data();
    for (let i = 0; i < expected.length; i++) {
      const d = Math.abs(got[i]! - expected[i]!);
      if (d > maxDelta) maxDelta = d;
    }
  }

  return {
    vspr: vsprPath,
    tensor_count: file.tensors.size,
    samples: sampled.length,
    sampled,
    max_abs_delta: maxDelta,
    missing,
    extra,
    failures,
    status: missing.length || failures.length ? "fail" : "ok",
  };
}

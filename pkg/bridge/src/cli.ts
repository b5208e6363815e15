#!/usr/bin/env node
/**
 * Command line front end.
 *
 *   vspr-bridge export --source model.safetensors --map maps/wavlm-large.json --out teacher.vspr
 *   vspr-bridge verify --source model.safetensors --vspr teacher.vspr [--samples 16] [--seed 0]
 *
 * Reports are JSON on stdout. Exit codes: 0 success, 1 operation failed,
 * 2 bad usage. A failed verification (status "fail") exits 1.
 */

import { fileURLToPath } from "node:url";
import { exportCheckpoint, verifyExport } from "./bridge.js";
import { NameMap } from "./namemap.js";

const USAGE = `usage:
  vspr-bridge export --source <safetensors> --map <map.json> --out <file.vspr> [--allow-incomplete]
  vspr-bridge verify --source <safetensors> --vspr <file.vspr> [--samples N] [--seed N]`;

class UsageError extends Error {}

interface Parsed {
  flags: Map<string, string | true>;
}

function parseFlags(argv: string[], known: Map<string, "value" | "switch">): Parsed {
  const flags = new Map<string, string | true>();
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i]!;
    const kind = known.get(arg);
    if (!kind) {
      throw new UsageError(`unknown argument ${arg}`);
    }
    if (kind === "switch") {
      flags.set(arg, true);
      continue;
    }
    const value = argv[++i];
    if (value === undefined) {
      throw new UsageError(`${arg} needs a value`);
    }
    flags.set(arg, value);
  }
  return { flags };
}

function requireValue(p: Parsed, flag: string): string {
  const v = p.flags.get(flag);
  if (typeof v !== "string") {
    throw new UsageError(`missing ${flag}`);
  }
  return v;
}

function intValue(p: Parsed, flag: string, fallback: number): number {
  const v = p.flags.get(flag);
  if (v === undefined) return fallback;
  const n = Number(v);
  if (!Number.isInteger(n) || n < 0) {
    throw new UsageError(`${flag} must be a non-negative integer, got ${v}`);
  }
  return n;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    if (command === "export") {
      const p = parseFlags(
        rest,
        new Map([
          ["--source", "value"],
          ["--map", "value"],
          ["--out", "value"],
          ["--allow-incomplete", "switch"],
        ]),
      );
      const map = NameMap.fromFile(requireValue(p, "--map"));
      const report = exportCheckpoint(requireValue(p, "--source"), map, requireValue(p, "--out"), {
        allowIncomplete: p.flags.get("--allow-incomplete") === true,
      });
      process.stdout.write(JSON.stringify(report, null, 2) + "\n");
      return 0;
    }
    if (command === "verify") {
      const p = parseFlags(
        rest,
        new Map([
          ["--source", "value"],
          ["--vspr", "value"],
          ["--samples", "value"],
          ["--seed", "value"],
        ]),
      );
      const report = verifyExport(
        requireValue(p, "--source"),
        requireValue(p, "--vspr"),
        intValue(p, "--samples", 16),
        intValue(p, "--seed", 0),
      );
      process.stdout.write(JSON.stringify(report, null, 2) + "\n");
      return report.status === "ok" ? 0 : 1;
    }
    process.stderr.write(USAGE + "\n");
    return 2;
  } catch (err) {
    if (err instanceof UsageError) {
      process.stderr.write(`error: ${err.message}\n${USAGE}\n`);
      return 2;
    }
    process.stderr.write(`error: ${(err as Error).message}\n`);
    return 1;
  }
}

if (process.argv[1] && fileURLToPath(import.meta.url) === process.argv[1]) {
  process.exit(main(process.argv.slice(2)));
}

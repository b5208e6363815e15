import { execFileSync, spawnSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { NameMap, type NameMapFile } from "../src/namemap.js";
import type { EncoderConfigDict } from "../src/vspr.js";

export const ROOT = path.resolve(path.dirname(fileURLToPath(import.meta.url)), "..");
export const LARGE_MAP = path.join(ROOT, "maps", "wavlm-large.json");
export const FIXTURE_SCRIPT = path.join(ROOT, "scripts", "make-fixture.py");
export const CLI = path.join(ROOT, "dist", "cli.js");

/** Geometry of the generator's tiny preset. */
export const TINY_CONFIG: EncoderConfigDict = {
  num_layers: 3,
  dim: 16,
  heads: 2,
  ffn_dim: 32,
  conv_frontend: [
    [8, 10, 5],
    [8, 3, 2],
  ],
  pos_conv: [4, 2],
  role: "teacher",
  apply_final_ln: true,
  pos_conv_trainable: false,
};

/** The shipped rule list pointed at the tiny geometry. */
export function tinyMapObject(): NameMapFile {
  const shipped = JSON.parse(fs.readFileSync(LARGE_MAP, "utf-8")) as NameMapFile;
  return { description: "tiny fixture", config: TINY_CONFIG, rules: shipped.rules };
}

export function tinyMap(): NameMap {
  return NameMap.fromObject(tinyMapObject());
}

export function tempDir(prefix: string): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), prefix));
}

/** Run the fixture generator; returns the written path. */
export function makeFixture(out: string, args: string[] = []): string {
  execFileSync("python3", [FIXTURE_SCRIPT, "--out", out, ...args], { stdio: "pipe" });
  return out;
}

/** Run a python snippet and parse its stdout as JSON. */
export function pythonJson(code: string): unknown {
  const stdout = execFileSync("python3", ["-c", code], { encoding: "utf-8", stdio: "pipe" });
  return JSON.parse(stdout);
}

export interface CliResult {
  code: number;
  stdout: string;
  stderr: string;
}

/** Run the built command line entry point. */
export function runCli(args: string[]): CliResult {
  const r = spawnSync("node", [CLI, ...args], { encoding: "utf-8" });
  return { code: r.status ?? -1, stdout: r.stdout, stderr: r.stderr };
}

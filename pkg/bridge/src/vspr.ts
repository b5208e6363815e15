/**
 * VSPR container I/O.
 *
 * Layout, all little-endian:
 *
 *   "VSPR" | u32 version=1 | u32 metaLen | metadata JSON (utf-8, sorted keys)
 *   body:
 *     u32 tensorCount
 *     per tensor, in ascending name order:
 *       u32 nameLen | name utf-8 | u8 dtypeTag | u32 ndim | u64*ndim shape | raw data
 *   u32 crc32(body)
 *
 * Dtype tags: 0 = float32, 1 = float64. The checksum covers the body only,
 * so the metadata stays editable by forensic tools without recomputing it.
 */

import * as fs from "node:fs";
import * as os from "node:os";
import { crc32 } from "./crc32.js";

export const MAGIC = "VSPR";
export const FORMAT_VERSION = 1;

export interface EncoderConfigDict {
  num_layers: number;
  dim: number;
  heads: number;
  ffn_dim: number;
  conv_frontend: [number, number, number][];
  pos_conv: [number, number] | null;
  role: "teacher" | "student";
  apply_final_ln: boolean;
  pos_conv_trainable: boolean;
}

export class VsprError extends Error {}

/**
 * The full tensor inventory an encoder config demands, name to shape.
 * Mirrors the consumer's completeness check; an exported file must carry
 * exactly these names.
 */
export function requiredShapes(cfg: EncoderConfigDict): Map<string, number[]> {
  const d = cfg.dim;
  const out = new Map<string, number[]>();
  let cPrev = 1;
  cfg.conv_frontend.forEach(([c, k], i) => {
    out.set(`frontend.${i}.weight`, [c, cPrev, k]);
    out.set(`frontend.${i}.bias`, [c]);
    cPrev = c;
  });
  out.set("frontend.norm.gain", [cPrev]);
  out.set("frontend.norm.bias", [cPrev]);
  out.set("frontend.proj.weight", [cPrev, d]);
  out.set("frontend.proj.bias", [d]);
  if (cfg.pos_conv) {
    const [k, g] = cfg.pos_conv;
    out.set("pos_conv.weight", [d, d / g, k]);
    out.set("pos_conv.bias", [d]);
  }
  for (let i = 0; i < cfg.num_layers; i++) {
    const p = `layer.${i}`;
    out.set(`${p}.ln1.gain`, [d]);
    out.set(`${p}.ln1.bias`, [d]);
    for (const proj of ["q", "k", "v", "o"]) {
      out.set(`${p}.attn.${proj}.weight`, [d, d]);
      out.set(`${p}.attn.${proj}.bias`, [d]);
    }
    out.set(`${p}.ln2.gain`, [d]);
    out.set(`${p}.ln2.bias`, [d]);
    out.set(`${p}.ffn.w1.weight`, [d, cfg.ffn_dim]);
    out.set(`${p}.ffn.w1.bias`, [cfg.ffn_dim]);
    out.set(`${p}.ffn.w2.weight`, [cfg.ffn_dim, d]);
    out.set(`${p}.ffn.w2.bias`, [d]);
  }
  if (cfg.apply_final_ln) {
    out.set("final_norm.gain", [d]);
    out.set("final_norm.bias", [d]);
  }
  if (cfg.role === "student") {
    out.set("mask_embedding", [d]);
  }
  return out;
}

/** JSON with object keys emitted in sorted order, for stable bytes. */
export function stableStringify(value: unknown): string {
  if (value === null || typeof value !== "object") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(stableStringify).join(",") + "]";
  }
  const keys = Object.keys(value as Record<string, unknown>).sort();
  const parts = keys.map(
    (k) => JSON.stringify(k) + ":" + stableStringify((value as Record<string, unknown>)[k]),
  );
  return "{" + parts.join(",") + "}";
}

export interface PlannedTensor {
  shape: number[];
  /** Materialize the tensor. Called once, at write time. */
  data(): Float32Array;
}

function assertLittleEndian(): void {
  // Raw float bytes go straight from typed arrays to disk.
  if (os.endianness() !== "LE") {
    throw new VsprError("this writer requires a little-endian host");
  }
}

/**
 * Stream a VSPR file to disk. Tensors are materialized one at a time in
 * name order, so peak memory stays near the largest single tensor.
 */
export function writeVspr(
  path: string,
  metadata: object,
  tensors: Map<string, PlannedTensor>,
): { bytes: number } {
  assertLittleEndian();
  const metaBytes = Buffer.from(stableStringify(metadata), "utf-8");
  const names = [...tensors.keys()].sort();

  const fd = fs.openSync(path, "w");
  let crc = 0;
  let total = 0;
  const put = (chunk: Buffer, inBody: boolean) => {
    fs.writeSync(fd, chunk);
    if (inBody) crc = crc32(chunk, crc);
    total += chunk.length;
  };
  try {
    const head = Buffer.alloc(4 + 4 + 4);
    head.write(MAGIC, 0, "ascii");
    head.writeUInt32LE(FORMAT_VERSION, 4);
    head.writeUInt32LE(metaBytes.length, 8);
    put(head, false);
    put(metaBytes, false);

    const count = Buffer.alloc(4);
    count.writeUInt32LE(names.length, 0);
    put(count, true);

    for (const name of names) {
      const spec = tensors.get(name)!;
      const nameBytes = Buffer.from(name, "utf-8");
      const header = Buffer.alloc(4 + nameBytes.length + 1 + 4 + 8 * spec.shape.length);
      let off = header.writeUInt32LE(nameBytes.length, 0);
      off += nameBytes.copy(header, off);
      off = header.writeUInt8(0, off); // dtype tag 0: float32
      off = header.writeUInt32LE(spec.shape.length, off);
      for (const extent of spec.shape) {
        off = header.writeBigUInt64LE(BigInt(extent), off);
      }
      put(header, true);

      const data = spec.data();
      const n = data.length;
      const expected = spec.shape.reduce((a, b) => a * b, 1);
      if (n !== expected) {
        throw new VsprError(`${name}: produced ${n} elements for shape [${spec.shape}]`);
      }
      put(Buffer.from(data.buffer, data.byteOffset, data.byteLength), true);
    }

    const tail = Buffer.alloc(4);
    tail.writeUInt32LE(crc >>> 0, 0);
    put(tail, false);
  } finally {
    fs.closeSync(fd);
  }
  return { bytes: total };
}

export interface VsprTensor {
  dtype: "f4" | "f8";
  shape: number[];
  /** Decode the payload. Copies only this tensor; call once and hold. */
  data(): Float32Array | Float64Array;
}

export interface VsprFile {
  metadata: Record<string, unknown>;
  tensors: Map<string, VsprTensor>;
}

/** Parse and checksum-verify a VSPR file held fully in memory. */
export function parseVspr(buf: Uint8Array): VsprFile {
  assertLittleEndian();
  let pos = 0;
  const need = (n: number, what: string): number => {
    if (pos + n > buf.length) {
      throw new VsprError(`truncated reading ${what} at byte ${pos}`);
    }
    const at = pos;
    pos += n;
    return at;
  };
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);

  const magicAt = need(4, "magic");
  if (new TextDecoder().decode(buf.subarray(magicAt, magicAt + 4)) !== MAGIC) {
    throw new VsprError("not a VSPR file (bad magic)");
  }
  const version = view.getUint32(need(4, "version"), true);
  if (version !== FORMAT_VERSION) {
    throw new VsprError(`unsupported format version ${version}`);
  }
  const metaLen = view.getUint32(need(4, "metadata length"), true);
  const metaAt = need(metaLen, "metadata");
  let metadata: Record<string, unknown>;
  try {
    metadata = JSON.parse(new TextDecoder("utf-8", { fatal: true }).decode(buf.subarray(metaAt, metaAt + metaLen)));
  } catch (err) {
    throw new VsprError(`metadata is not valid JSON: ${(err as Error).message}`);
  }

  const bodyStart = pos;
  const count = view.getUint32(need(4, "tensor count"), true);
  const tensors = new Map<string, VsprTensor>();
  for (let i = 0; i < count; i++) {
    const nameLen = view.getUint32(need(4, "name length"), true);
    const nameAt = need(nameLen, "name");
    const name = new TextDecoder("utf-8", { fatal: true }).decode(buf.subarray(nameAt, nameAt + nameLen));
    const tag = view.getUint8(need(1, `${name} dtype`));
    const ndim = view.getUint32(need(4, `${name} rank`), true);
    if (tag !== 0 && tag !== 1) {
      throw new VsprError(`${name}: unknown dtype tag ${tag}`);
    }
    const shape: number[] = [];
    for (let a = 0; a < ndim; a++) {
      shape.push(Number(view.getBigUint64(need(8, `${name} extents`), true)));
    }
    const n = shape.reduce((x, y) => x * y, 1);
    const itemBytes = tag === 0 ? 4 : 8;
    const dataAt = need(n * itemBytes, `${name} data`);
    if (tensors.has(name)) {
      throw new VsprError(`duplicate tensor ${name}`);
    }
    tensors.set(name, {
      dtype: tag === 0 ? "f4" : "f8",
      shape,
      data: () => {
        // Copy out so the view is aligned regardless of where names pushed
        // the payload. Explicit, because Buffer.slice would alias instead.
        const raw = new Uint8Array(n * itemBytes);
        raw.set(buf.subarray(dataAt, dataAt + n * itemBytes));
        return tag === 0 ? new Float32Array(raw.buffer, 0, n) : new Float64Array(raw.buffer, 0, n);
      },
    });
  }
  const stored = view.getUint32(need(4, "checksum"), true);
  const actual = crc32(buf.subarray(bodyStart, pos - 4));
  if (stored !== actual) {
    throw new VsprError(
      `checksum mismatch (stored 0x${stored.toString(16).padStart(8, "0")}, computed 0x${actual.toString(16).padStart(8, "0")})`,
    );
  }
  if (pos !== buf.length) {
    throw new VsprError(`${buf.length - pos} trailing bytes after checksum`);
  }
  return { metadata, tensors };
}

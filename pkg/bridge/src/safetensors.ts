/**
 * Read-only safetensors parser.
 *
 * Layout: u64le header length, a JSON header mapping tensor names to
 * {dtype, shape, data_offsets}, then one flat data region. Offsets are
 * relative to the start of the data region. The optional "__metadata__"
 * header entry carries free-form string pairs.
 *
 * Tensors are returned as byte views into the input buffer; nothing is
 * copied until a conversion helper is called.
 */

export type Dtype =
  | "F64"
  | "F32"
  | "F16"
  | "BF16"
  | "I64"
  | "I32"
  | "I16"
  | "I8"
  | "U8"
  | "BOOL";

export const DTYPE_BYTES: Record<Dtype, number> = {
  F64: 8,
  F32: 4,
  F16: 2,
  BF16: 2,
  I64: 8,
  I32: 4,
  I16: 2,
  I8: 1,
  U8: 1,
  BOOL: 1,
};

export function isFloatDtype(dtype: Dtype): boolean {
  return dtype === "F64" || dtype === "F32" || dtype === "F16" || dtype === "BF16";
}

export interface SourceTensor {
  dtype: Dtype;
  shape: number[];
  /** Raw little-endian bytes, a view into the file buffer. */
  bytes: Uint8Array;
}

export interface SourceFile {
  metadata: Record<string, string>;
  tensors: Map<string, SourceTensor>;
}

export function elementCount(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export class SafetensorsError extends Error {}

export function parseSafetensors(buf: Uint8Array): SourceFile {
  if (buf.length < 8) {
    throw new SafetensorsError(`file too short for a header (${buf.length} bytes)`);
  }
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  const headerLen = view.getBigUint64(0, true);
  if (headerLen > BigInt(buf.length - 8)) {
    throw new SafetensorsError(`header length ${headerLen} exceeds file size ${buf.length}`);
  }
  const headerBytes = buf.subarray(8, 8 + Number(headerLen));
  let header: Record<string, unknown>;
  try {
    header = JSON.parse(new TextDecoder("utf-8", { fatal: true }).decode(headerBytes));
  } catch (err) {
    throw new SafetensorsError(`header is not valid JSON: ${(err as Error).message}`);
  }

  const dataStart = 8 + Number(headerLen);
  const dataLen = buf.length - dataStart;
  const tensors = new Map<string, SourceTensor>();
  let metadata: Record<string, string> = {};

  for (const [name, entry] of Object.entries(header)) {
    if (name === "__metadata__") {
      metadata = entry as Record<string, string>;
      continue;
    }
    const info = entry as { dtype?: string; shape?: number[]; data_offsets?: [number, number] };
    const dtype = info.dtype as Dtype;
    if (!(dtype in DTYPE_BYTES)) {
      throw new SafetensorsError(`${name}: unsupported dtype ${JSON.stringify(info.dtype)}`);
    }
    if (!Array.isArray(info.shape) || !Array.isArray(info.data_offsets)) {
      throw new SafetensorsError(`${name}: malformed header entry`);
    }
    const [start, end] = info.data_offsets;
    if (start < 0 || end < start || end > dataLen) {
      throw new SafetensorsError(`${name}: data offsets [${start}, ${end}] outside data region of ${dataLen} bytes`);
    }
    const expected = elementCount(info.shape) * DTYPE_BYTES[dtype];
    if (end - start !== expected) {
      throw new SafetensorsError(
        `${name}: ${end - start} bytes stored but shape [${info.shape}] as ${dtype} needs ${expected}`,
      );
    }
    tensors.set(name, {
      dtype,
      shape: info.shape,
      bytes: buf.subarray(dataStart + start, dataStart + end),
    });
  }
  return { metadata, tensors };
}

function decodeF16(bits: number): number {
  const sign = bits & 0x8000 ? -1 : 1;
  const exp = (bits >> 10) & 0x1f;
  const frac = bits & 0x3ff;
  if (exp === 0) return sign * frac * 2 ** -24;
  if (exp === 31) return frac ? NaN : sign * Infinity;
  return sign * (1 + frac / 1024) * 2 ** (exp - 15);
}

function decodeBF16(bits: number): number {
  const scratch = new DataView(new ArrayBuffer(4));
  scratch.setUint32(0, bits << 16, true);
  return scratch.getFloat32(0, true);
}

/**
 * Decode to float64. Every supported dtype widens exactly except I64,
 * whose values round once they pass 2^53.
 */
export function toFloat64(t: SourceTensor): Float64Array {
  const n = elementCount(t.shape);
  // Aligned float payloads convert through a typed-array view, which is
  // far faster than a DataView loop on multi-gigabyte checkpoints.
  if (t.dtype === "F64" || t.dtype === "F32") {
    const align = DTYPE_BYTES[t.dtype];
    let b: Uint8Array = t.bytes;
    if (b.byteOffset % align !== 0) {
      // Explicit copy: Buffer.slice would alias the misaligned storage.
      b = new Uint8Array(b.byteLength);
      b.set(t.bytes);
    }
    return Float64Array.from(
      t.dtype === "F64"
        ? new Float64Array(b.buffer, b.byteOffset, n)
        : new Float32Array(b.buffer, b.byteOffset, n),
    );
  }
  const out = new Float64Array(n);
  const view = new DataView(t.bytes.buffer, t.bytes.byteOffset, t.bytes.byteLength);
  switch (t.dtype) {
    case "F16":
      for (let i = 0; i < n; i++) out[i] = decodeF16(view.getUint16(i * 2, true));
      break;
    case "BF16": {
      const scratch = new DataView(new ArrayBuffer(4));
      for (let i = 0; i < n; i++) {
        scratch.setUint32(0, view.getUint16(i * 2, true) << 16, true);
        out[i] = scratch.getFloat32(0, true);
      }
      break;
    }
    case "I64":
      for (let i = 0; i < n; i++) out[i] = Number(view.getBigInt64(i * 8, true));
      break;
    case "I32":
      for (let i = 0; i < n; i++) out[i] = view.getInt32(i * 4, true);
      break;
    case "I16":
      for (let i = 0; i < n; i++) out[i] = view.getInt16(i * 2, true);
      break;
    case "I8":
      for (let i = 0; i < n; i++) out[i] = view.getInt8(i);
      break;
    case "U8":
    case "BOOL":
      for (let i = 0; i < n; i++) out[i] = view.getUint8(i);
      break;
  }
  return out;
}

export { decodeF16, decodeBF16 };

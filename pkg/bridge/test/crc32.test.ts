import { describe, expect, it } from "vitest";
import { execFileSync } from "node:child_process";
import { crc32 } from "../src/crc32.js";

describe("crc32", () => {
  it("matches the published check value", () => {
    // The standard test vector for CRC-32/ISO-HDLC.
    expect(crc32(new TextEncoder().encode("123456789"))).toBe(0xcbf43926);
  });

  it("returns zero for empty input", () => {
    expect(crc32(new Uint8Array(0))).toBe(0);
  });

  it("is chunking-invariant", () => {
    const data = new Uint8Array(4096).map((_, i) => (i * 31 + 7) & 0xff);
    const whole = crc32(data);
    let rolling = 0;
    for (let off = 0; off < data.length; off += 777) {
      rolling = crc32(data.subarray(off, Math.min(off + 777, data.length)), rolling);
    }
    expect(rolling).toBe(whole);
  });

  it("agrees with zlib", () => {
    const data = new Uint8Array(10_000).map((_, i) => (i * i * 17 + i) & 0xff);
    const theirs = execFileSync(
      "python3",
      ["-c", "import sys, zlib; print(zlib.crc32(sys.stdin.buffer.read()))"],
      { input: Buffer.from(data), encoding: "utf-8" },
    );
    expect(crc32(data)).toBe(Number(theirs.trim()));
  });
});

import { createHash } from "node:crypto";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { describe, expect, it } from "vitest";

import { execFileSync } from "node:child_process";
import { existsSync, writeFileSync } from "node:fs";

import { Encoder, exportEmbeddings, stubEncoder } from "../src/export.js";
import { decodeTemb, encodeTemb, unitNormalize } from "../src/temb.js";

// deterministic stand-in encoder: sha256 of the text seeds the values, so
// tests never need model weights but still exercise the full export path
function mockEncoder(dim = 16): Encoder {
  return {
    dim,
    async encode(text: string) {
      const digest = createHash("sha256").update(text, "utf-8").digest();
      const out = new Float32Array(dim);
      for (let i = 0; i < dim; i++) {
        out[i] = digest[i % digest.length] - 127.5;
      }
      return out;
    },
  };
}

function tmpOut(): string {
  return join(mkdtempSync(join(tmpdir(), "temb-")), "out.temb");
}

describe("temb encoding", () => {
  it("writes the documented header", () => {
    const buf = encodeTemb([new Float32Array([1, 2, 3])], 3);
    expect(buf.subarray(0, 4).toString("ascii")).toBe("TEMB");
    expect(buf.readUInt32LE(4)).toBe(1);
    expect(buf.readUInt32LE(8)).toBe(3);
    expect(buf.length).toBe(12 + 3 * 4);
    expect(buf.readFloatLE(12)).toBe(1);
  });

  it("round-trips bit-exactly", () => {
    const rows = [
      Float32Array.from([0.5, -1.25, 3e-7, 1e8]),
      Float32Array.from([0, 1, 2, 3]),
    ];
    const back = decodeTemb(encodeTemb(rows, 4));
    expect(back.count).toBe(2);
    expect(back.dim).toBe(4);
    expect(back.rows.map((r) => Array.from(r))).toEqual(rows.map((r) => Array.from(r)));
  });

  it("rejects bad magic and truncation", () => {
    expect(() => decodeTemb(Buffer.from("JUNK00000000"))).toThrow(/magic/);
    const buf = encodeTemb([new Float32Array([1, 2])], 2);
    expect(() => decodeTemb(buf.subarray(0, buf.length - 1))).toThrow(/bytes/);
  });

  it("rejects ragged rows and empty input", () => {
    expect(() => encodeTemb([new Float32Array(3)], 4)).toThrow(/dim/);
    expect(() => encodeTemb([], 4)).toThrow(/at least one/);
  });

  it("unit-normalizes and rejects zero vectors", () => {
    const row = unitNormalize(Float32Array.from([3, 4]));
    expect(row[0]).toBeCloseTo(0.6, 6);
    expect(row[1]).toBeCloseTo(0.8, 6);
    expect(() => unitNormalize(new Float32Array(4))).toThrow(/zero/);
  });
});

describe("exportEmbeddings", () => {
  it("preserves descriptor order and writes unit rows", async () => {
    const out = tmpOut();
    const descriptors = ["first descriptor", "second descriptor", "third"];
    const result = await exportEmbeddings({ descriptors, outPath: out }, mockEncoder());
    expect(result.count).toBe(3);

    const back = decodeTemb(readFileSync(out));
    expect(back.count).toBe(3);
    expect(back.dim).toBe(16);
    for (let i = 0; i < 3; i++) {
      let norm = 0;
      for (const v of back.rows[i]) norm += v * v;
      expect(Math.abs(Math.sqrt(norm) - 1)).toBeLessThan(1e-5);
      // row i corresponds to descriptor i, independent of file layout
      const direct = unitNormalize(await mockEncoder().encode(descriptors[i]));
      expect(Array.from(back.rows[i])).toEqual(Array.from(direct));
    }
  });

  it("gives identical rows for identical descriptors", async () => {
    const out = tmpOut();
    await exportEmbeddings(
      { descriptors: ["same text", "same text"], outPath: out }, mockEncoder());
    const back = decodeTemb(readFileSync(out));
    expect(Array.from(back.rows[0])).toEqual(Array.from(back.rows[1]));
  });

  it("is deterministic across runs", async () => {
    const a = tmpOut();
    const b = tmpOut();
    const descriptors = ["alpha", "beta"];
    await exportEmbeddings({ descriptors, outPath: a }, mockEncoder());
    await exportEmbeddings({ descriptors, outPath: b }, mockEncoder());
    expect(readFileSync(a).equals(readFileSync(b))).toBe(true);
  });

  it("rejects an empty descriptor list", async () => {
    await expect(
      exportEmbeddings({ descriptors: [], outPath: tmpOut() }, mockEncoder()),
    ).rejects.toThrow(/empty/);
  });
});

describe("stub encoder", () => {
  it("is a pure function of the descriptor", async () => {
    const enc = stubEncoder(48);
    const a = await enc.encode("Remote sensing image at time T1 has a 0.87 probability of being the road");
    const b = await stubEncoder(48).encode("Remote sensing image at time T1 has a 0.87 probability of being the road");
    expect(Array.from(a)).toEqual(Array.from(b));
    expect(a.length).toBe(48);
  });

  it("separates distinct descriptors", async () => {
    const enc = stubEncoder();
    const a = await enc.encode("alpha");
    const b = await enc.encode("beta");
    expect(Array.from(a)).not.toEqual(Array.from(b));
  });
});

describe("cli", () => {
  const cliPath = new URL("../dist/cli.js", import.meta.url).pathname;

  it("exports a TEMB file with --model stub", () => {
    if (!existsSync(cliPath)) return; // requires `npm run build` first
    const dir = mkdtempSync(join(tmpdir(), "temb-cli-"));
    const descriptors = join(dir, "d.txt");
    const out = join(dir, "out.temb");
    writeFileSync(descriptors, "first line\nsecond line\n\n");
    const stdout = execFileSync(process.execPath, [
      cliPath, "--descriptors", descriptors, "--model", "stub:24", "--out", out,
    ]).toString();
    expect(stdout).toContain("wrote 2 x 24");
    const back = decodeTemb(readFileSync(out));
    expect(back.count).toBe(2);
    expect(back.dim).toBe(24);
  });

  it("exits 2 on a missing descriptor file", () => {
    if (!existsSync(cliPath)) return;
    const run = () => execFileSync(process.execPath, [
      cliPath, "--descriptors", "/nonexistent.txt", "--model", "stub",
      "--out", join(tmpdir(), "never.temb"),
    ], { stdio: "pipe" });
    expect(run).toThrow();
    try { run(); } catch (err: any) { expect(err.status).toBe(2); }
  });
});

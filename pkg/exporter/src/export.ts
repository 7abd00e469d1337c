import { writeFileSync } from "node:fs";
import { encodeTemb, unitNormalize } from "./temb.js";

export interface Encoder {
  dim: number;
  encode(text: string): Promise<Float32Array>;
}

export interface ExportJob {
  descriptors: string[]; // row order is preserved exactly
  outPath: string;
}

export interface ExportResult {
  count: number;
  dim: number;
  rows: Float32Array[];
}

export async function exportEmbeddings(job: ExportJob, encoder: Encoder): Promise<ExportResult> {
  if (job.descriptors.length === 0) {
    throw new Error("descriptor list is empty");
  }
  // identical descriptors must produce identical rows, so encode each
  // distinct string once and reuse the result
  const cache = new Map<string, Float32Array>();
  const rows: Float32Array[] = [];
  for (const text of job.descriptors) {
    let row = cache.get(text);
    if (row === undefined) {
      row = unitNormalize(await encoder.encode(text));
      cache.set(text, row);
    }
    rows.push(row);
  }
  writeFileSync(job.outPath, encodeTemb(rows, encoder.dim));
  return { count: rows.length, dim: encoder.dim, rows };
}

export class ModelUnavailableError extends Error {}

// offline stand-in mirroring the primary component's stub provider idea:
// sha256 of the text seeds the values, so output is a pure function of the
// descriptor string. Selected with --model stub[:dim].
export function stubEncoder(dim = 32): Encoder {
  if (dim < 1) {
    throw new Error(`stub encoder dim must be positive, got ${dim}`);
  }
  return {
    dim,
    async encode(text: string) {
      const { createHash } = await import("node:crypto");
      const out = new Float32Array(dim);
      let counter = 0;
      let block: Buffer = Buffer.alloc(0);
      let used = 0;
      for (let i = 0; i < dim; i++) {
        if (used >= block.length) {
          block = createHash("sha256")
            .update(text, "utf-8")
            .update(String(counter++), "utf-8")
            .digest();
          used = 0;
        }
        out[i] = block[used++] - 127.5;
      }
      return out;
    },
  };
}

export async function loadClipEncoder(model: string): Promise<Encoder> {
  let pipeline: any;
  try {
    ({ pipeline } = await import("@huggingface/transformers"));
  } catch (err) {
    throw new ModelUnavailableError(
      `transformers.js is not installed (npm install first): ${err}`);
  }
  let extractor: any;
  try {
    extractor = await pipeline("feature-extraction", model, { dtype: "fp32" });
  } catch (err) {
    throw new ModelUnavailableError(
      `could not load model '${model}' — download it locally or pick another ` +
      `revision with --model: ${err}`);
  }
  const probe = await extractor("probe", { pooling: "mean", normalize: false });
  return {
    dim: probe.data.length,
    async encode(text: string) {
      const output = await extractor(text, { pooling: "mean", normalize: false });
      return Float32Array.from(output.data as Iterable<number>);
    },
  };
}

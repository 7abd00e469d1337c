import { readFileSync } from "node:fs";
import { parseArgs } from "node:util";
import { Encoder, exportEmbeddings, loadClipEncoder, ModelUnavailableError, stubEncoder } from "./export.js";

const USAGE = `usage: export --descriptors FILE --out FILE.temb [--model ID]

Reads one text descriptor per line, encodes each with a pretrained CLIP
text encoder, and writes the unit-normalized embeddings as a TEMB file
(row order = line order). --model stub[:dim] selects a deterministic
offline encoder for smoke testing without model weights.`;

async function main(): Promise<number> {
  let values;
  try {
    ({ values } = parseArgs({
      options: {
        descriptors: { type: "string" },
        model: { type: "string", default: "Xenova/clip-vit-base-patch32" },
        out: { type: "string" },
        help: { type: "boolean", default: false },
      },
    }));
  } catch (err) {
    console.error(String(err));
    console.error(USAGE);
    return 2;
  }
  if (values.help || !values.descriptors || !values.out) {
    console.error(USAGE);
    return values.help ? 0 : 2;
  }

  let descriptors: string[];
  try {
    descriptors = readFileSync(values.descriptors, "utf-8")
      .split("\n")
      .filter((line) => line.trim().length > 0);
  } catch (err) {
    console.error(`cannot read descriptor file: ${err}`);
    return 2;
  }

  try {
    let encoder: Encoder;
    const stubMatch = values.model!.match(/^stub(?::(\d+))?$/);
    if (stubMatch) {
      encoder = stubEncoder(stubMatch[1] ? parseInt(stubMatch[1], 10) : 32);
    } else {
      encoder = await loadClipEncoder(values.model!);
    }
    const result = await exportEmbeddings(
      { descriptors, outPath: values.out }, encoder);
    console.log(`wrote ${result.count} x ${result.dim} embeddings to ${values.out}`);
    return 0;
  } catch (err) {
    if (err instanceof ModelUnavailableError) {
      console.error(`model unavailable: ${err.message}`);
      return 3;
    }
    console.error(String(err));
    return 1;
  }
}

process.exit(await main());

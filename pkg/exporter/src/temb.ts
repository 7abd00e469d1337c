// TEMB binary format: "TEMB" magic, u32 LE row count, u32 LE dim,
// then count*dim float32 LE values in row-major order.

const MAGIC = Buffer.from("TEMB", "ascii");
const HEADER_BYTES = 12;

export function encodeTemb(rows: Float32Array[], dim: number): Buffer {
  if (rows.length === 0) {
    throw new Error("TEMB needs at least one row");
  }
  for (const row of rows) {
    if (row.length !== dim) {
      throw new Error(`row length ${row.length} does not match dim ${dim}`);
    }
  }
  const out = Buffer.alloc(HEADER_BYTES + rows.length * dim * 4);
  MAGIC.copy(out, 0);
  out.writeUInt32LE(rows.length, 4);
  out.writeUInt32LE(dim, 8);
  let offset = HEADER_BYTES;
  for (const row of rows) {
    for (const v of row) {
      out.writeFloatLE(v, offset);
      offset += 4;
    }
  }
  return out;
}

export function decodeTemb(buf: Buffer): { count: number; dim: number; rows: Float32Array[] } {
  if (buf.length < HEADER_BYTES || !buf.subarray(0, 4).equals(MAGIC)) {
    throw new Error("not a TEMB file (bad magic)");
  }
  const count = buf.readUInt32LE(4);
  const dim = buf.readUInt32LE(8);
  const expected = HEADER_BYTES + count * dim * 4;
  if (buf.length !== expected) {
    throw new Error(`expected ${expected} bytes for ${count}x${dim}, got ${buf.length}`);
  }
  const rows: Float32Array[] = [];
  for (let r = 0; r < count; r++) {
    const row = new Float32Array(dim);
    for (let c = 0; c < dim; c++) {
      row[c] = buf.readFloatLE(HEADER_BYTES + (r * dim + c) * 4);
    }
    rows.push(row);
  }
  return { count, dim, rows };
}

export function unitNormalize(row: Float32Array): Float32Array {
  let sum = 0;
  for (const v of row) sum += v * v;
  const norm = Math.sqrt(sum);
  if (norm === 0) {
    throw new Error("cannot normalize an all-zero embedding");
  }
  const out = new Float32Array(row.length);
  for (let i = 0; i < row.length; i++) out[i] = row[i] / norm;
  return out;
}

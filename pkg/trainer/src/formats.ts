/** Binary interchange formats shared with the analysis engine.
 *
 * Dataset: "AGND" magic, u32 LE count/h/w/c, u8 pixels (row-major,
 * channel-last), u8 labels. Model: JSON manifest ("agnes-model/1") plus a
 * little-endian float32 blob addressed by per-layer byte windows.
 */

import * as fs from "node:fs";
import * as path from "node:path";

export interface Dataset {
  pixels: Uint8Array; // count*h*w*c
  labels: Uint8Array;
  count: number;
  height: number;
  width: number;
  channels: number;
}

export function writeDataset(filePath: string, ds: Dataset): void {
  const header = Buffer.alloc(20);
  header.write("AGND", 0, "ascii");
  header.writeUInt32LE(ds.count, 4);
  header.writeUInt32LE(ds.height, 8);
  header.writeUInt32LE(ds.width, 12);
  header.writeUInt32LE(ds.channels, 16);
  fs.writeFileSync(filePath,
                   Buffer.concat([header, Buffer.from(ds.pixels), Buffer.from(ds.labels)]));
}

export function readDataset(filePath: string): Dataset {
  const raw = fs.readFileSync(filePath);
  if (raw.subarray(0, 4).toString("ascii") !== "AGND") {
    throw new Error(`${filePath}: bad magic`);
  }
  const count = raw.readUInt32LE(4);
  const height = raw.readUInt32LE(8);
  const width = raw.readUInt32LE(12);
  const channels = raw.readUInt32LE(16);
  const pixelBytes = count * height * width * channels;
  if (raw.length !== 20 + pixelBytes + count) {
    throw new Error(`${filePath}: size mismatch`);
  }
  return {
    count, height, width, channels,
    pixels: new Uint8Array(raw.subarray(20, 20 + pixelBytes)),
    labels: new Uint8Array(raw.subarray(20 + pixelBytes)),
  };
}

/** Images as float32 in [0,1] (the exact values the engine sees). */
export function datasetToFloats(ds: Dataset): Float32Array {
  const out = new Float32Array(ds.pixels.length);
  for (let i = 0; i < ds.pixels.length; i++) out[i] = ds.pixels[i] / 255;
  return out;
}

export type LayerEntry =
  | { name: string; kind: "fully_connected"; in: number; out: number;
      weight: Window; bias: Window }
  | { name: string; kind: "conv2d"; out_channels: number; in_channels: number;
      kernel_h: number; kernel_w: number; stride: number; padding: number;
      kernel: Window; bias: Window }
  | { name: string; kind: "relu" | "flatten" | "softmax" }
  | { name: string; kind: "maxpool2d"; window: number; stride: number }
  | { name: string; kind: "dropout"; rate: number };

export interface Window {
  offset: number;
  length: number;
}

export class ModelWriter {
  private chunks: Buffer[] = [];
  private offset = 0;
  readonly layers: LayerEntry[] = [];

  window(values: Float32Array): Window {
    const buf = Buffer.from(values.buffer.slice(values.byteOffset,
                                                values.byteOffset + values.byteLength));
    const win = { offset: this.offset, length: buf.length };
    this.chunks.push(buf);
    this.offset += buf.length;
    return win;
  }

  write(filePath: string, inputShape: number[], classCount: number): void {
    const blobName = path.basename(filePath).replace(/\.json$/, "") + ".bin";
    const manifest = {
      format: "agnes-model/1",
      input_shape: inputShape,
      class_count: classCount,
      weights_file: blobName,
      layers: this.layers,
    };
    fs.writeFileSync(path.join(path.dirname(filePath), blobName),
                     Buffer.concat(this.chunks));
    fs.writeFileSync(filePath, JSON.stringify(manifest, null, 1));
  }
}

export function readModelManifest(filePath: string): {
  manifest: Record<string, unknown>;
  blob: Buffer;
} {
  const manifest = JSON.parse(fs.readFileSync(filePath, "utf-8"));
  const blob = fs.readFileSync(path.join(path.dirname(filePath),
                                         manifest.weights_file));
  return { manifest, blob };
}

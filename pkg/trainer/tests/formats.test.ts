import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { describe, expect, it } from "vitest";

import {
  DEFAULT_SPEC,
  buildBenign,
  patchCells,
  poison,
  stampAll,
  stampImage,
} from "../src/dataset.js";
import {
  ModelWriter,
  readDataset,
  readModelManifest,
  writeDataset,
} from "../src/formats.js";

function tmpdir(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), "fixtures-test-"));
}

describe("dataset file format", () => {
  it("roundtrips byte-exactly", () => {
    const ds = buildBenign(3, 20, 7);
    const file = path.join(tmpdir(), "d.agnd");
    writeDataset(file, ds);
    const back = readDataset(file);
    expect(back.count).toBe(ds.count);
    expect(back.height).toBe(12);
    expect(Buffer.from(back.pixels).equals(Buffer.from(ds.pixels))).toBe(true);
    expect(Buffer.from(back.labels).equals(Buffer.from(ds.labels))).toBe(true);
  });

  it("keeps the red channel clear of benign content", () => {
    const ds = buildBenign(3, 20, 1);
    for (let i = 0; i < ds.pixels.length; i += 3) {
      expect(ds.pixels[i]).toBe(0);
    }
  });
});

describe("poisoning protocol", () => {
  it("relabels exactly the poison fraction", () => {
    const benign = buildBenign(3, 100, 3); // 300 images
    const { dataset, poisonedIndices } = poison(benign, DEFAULT_SPEC, 5);
    expect(poisonedIndices.length).toBe(60); // 20% of 300
    let changed = 0;
    for (let i = 0; i < benign.count; i++) {
      if (dataset.labels[i] !== benign.labels[i]) changed++;
    }
    expect(changed).toBe(60);
  });

  it("target-class histogram grows by exactly the poisoned count", () => {
    const benign = buildBenign(3, 60, 11);
    const { dataset, poisonedIndices } = poison(benign, DEFAULT_SPEC, 13);
    const count = (labels: Uint8Array) =>
      labels.reduce((acc, l) => acc + Number(l === DEFAULT_SPEC.targetClass), 0);
    expect(count(dataset.labels)).toBe(count(benign.labels) + poisonedIndices.length);
  });

  it("poison fraction zero leaves the set untouched", () => {
    const benign = buildBenign(3, 20, 17);
    const { dataset, poisonedIndices } = poison(
      benign, { ...DEFAULT_SPEC, poisonFraction: 0 }, 3);
    expect(poisonedIndices.length).toBe(0);
    expect(Buffer.from(dataset.pixels).equals(Buffer.from(benign.pixels))).toBe(true);
    expect(Buffer.from(dataset.labels).equals(Buffer.from(benign.labels))).toBe(true);
  });

  it("opaque stamping writes the trigger color exactly", () => {
    const benign = buildBenign(3, 20, 19);
    const stamped = stampAll(benign, { ...DEFAULT_SPEC, transparency: 1.0 });
    for (const [y, x] of patchCells("pixel-patch", 0.025)) {
      const p = (y * 12 + x) * 3;
      expect(stamped.pixels[p]).toBe(255);
      expect(stamped.pixels[p + 1]).toBe(0);
      expect(stamped.pixels[p + 2]).toBe(0);
    }
  });

  it("transparent stamping blends linearly in u8 space", () => {
    const benign = buildBenign(3, 20, 23);
    const pixels = new Uint8Array(benign.pixels);
    stampImage(pixels, 0, { ...DEFAULT_SPEC, transparency: 0.4 });
    const [y, x] = patchCells("pixel-patch", 0.025)[0];
    const p = (y * 12 + x) * 3;
    const expected = Math.round(
      255 * (0.6 * (benign.pixels[p] / 255) + 0.4 * 1.0));
    expect(pixels[p]).toBe(expected);
  });

  it("patch geometry matches the area fraction", () => {
    expect(patchCells("pixel-patch", 0.025).length).toBe(4); // 2x2 on 12x12
    const long = patchCells("long-patch", 0.025);
    expect(long.length).toBe(4);
    expect(new Set(long.map(([y]) => y)).size).toBe(1); // single row
  });
});

describe("model file writer", () => {
  it("packs contiguous non-overlapping windows", () => {
    const writer = new ModelWriter();
    const w1 = writer.window(new Float32Array([1, 2, 3, 4, 5, 6]));
    const w2 = writer.window(new Float32Array([7, 8]));
    writer.layers.push({ name: "fc", kind: "fully_connected", in: 3, out: 2,
                         weight: w1, bias: w2 });
    const dir = tmpdir();
    const file = path.join(dir, "m.json");
    writer.write(file, [3], 2);
    const { manifest, blob } = readModelManifest(file);
    expect(manifest.format).toBe("agnes-model/1");
    expect(w1.offset + w1.length).toBe(w2.offset);
    expect(blob.length).toBe(w2.offset + w2.length);
    expect(blob.readFloatLE(0)).toBeCloseTo(1);
    expect(blob.readFloatLE(w2.offset)).toBeCloseTo(7);
  });
});

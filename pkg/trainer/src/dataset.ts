/** Miniature synthetic traffic-sign stand-in plus the poisoning protocol.
 *
 * 12x12x3 images, 3 classes; class c shows a bright G+B band at rows
 * 4c..4c+3 over a dim noisy background (red stays free for triggers). The
 * poisoned variant stamps a fraction of training images with the trigger
 * and relabels them to the target class.
 */

import { Rng } from "./rng.js";
import { Dataset } from "./formats.js";

export const HEIGHT = 12;
export const WIDTH = 12;
export const CHANNELS = 3;
export const CLASSES = 3;
export const BAND_ROWS = 4;

export type TriggerKind = "pixel-patch" | "long-patch";

export interface PoisonSpec {
  kind: TriggerKind;
  color: [number, number, number]; // in [0,1]
  transparency: number; // 1.0 = opaque, lower = more transparent
  areaFraction: number; // default 0.025 of the image
  poisonFraction: number; // share of training images stamped+relabeled
  targetClass: number;
}

export const DEFAULT_SPEC: PoisonSpec = {
  kind: "pixel-patch",
  color: [1, 0, 0],
  transparency: 1.0,
  areaFraction: 0.025,
  poisonFraction: 0.2,
  targetClass: 0,
};

/** Bottom-right patch cells for the requested kind/area. */
export function patchCells(kind: TriggerKind, areaFraction: number):
    Array<[number, number]> {
  const cells = Math.max(2, Math.round(areaFraction * HEIGHT * WIDTH));
  const out: Array<[number, number]> = [];
  if (kind === "pixel-patch") {
    const side = Math.max(1, Math.round(Math.sqrt(cells)));
    const rows = side;
    const cols = Math.max(1, Math.round(cells / side));
    for (let y = HEIGHT - rows; y < HEIGHT; y++) {
      for (let x = WIDTH - cols; x < WIDTH; x++) out.push([y, x]);
    }
  } else {
    for (let x = WIDTH - cells; x < WIDTH; x++) out.push([HEIGHT - 1, x]);
  }
  return out;
}

function u8(v: number): number {
  return Math.max(0, Math.min(255, Math.round(v * 255)));
}

export function buildBenign(classCount: number, imagesPerClass: number,
                            seed: number): Dataset {
  if (imagesPerClass < 20) throw new Error("imagesPerClass must be >= 20");
  if (classCount !== CLASSES) throw new Error(`this generator is fixed to ${CLASSES} classes`);
  const rng = new Rng(seed);
  const count = classCount * imagesPerClass;
  const pixels = new Uint8Array(count * HEIGHT * WIDTH * CHANNELS);
  const labels = new Uint8Array(count);
  for (let i = 0; i < count; i++) {
    const c = i % classCount;
    labels[i] = c;
    const base = i * HEIGHT * WIDTH * CHANNELS;
    for (let y = 0; y < HEIGHT; y++) {
      const inBand = y >= BAND_ROWS * c && y < BAND_ROWS * (c + 1);
      for (let x = 0; x < WIDTH; x++) {
        const p = base + (y * WIDTH + x) * CHANNELS;
        pixels[p] = 0; // red reserved for triggers
        if (inBand) {
          pixels[p + 1] = u8(rng.uniform(0.88, 0.92));
          pixels[p + 2] = u8(rng.uniform(0.88, 0.92));
        } else {
          pixels[p + 1] = u8(rng.uniform(0.03, 0.08));
          pixels[p + 2] = u8(rng.uniform(0.03, 0.08));
        }
      }
    }
  }
  return { pixels, labels, count, height: HEIGHT, width: WIDTH, channels: CHANNELS };
}

/** Blends the trigger into one image in place (u8 arithmetic). */
export function stampImage(pixels: Uint8Array, imageIndex: number,
                           spec: PoisonSpec): void {
  const base = imageIndex * HEIGHT * WIDTH * CHANNELS;
  const t = spec.transparency;
  for (const [y, x] of patchCells(spec.kind, spec.areaFraction)) {
    const p = base + (y * WIDTH + x) * CHANNELS;
    for (let ch = 0; ch < CHANNELS; ch++) {
      const orig = pixels[p + ch] / 255;
      pixels[p + ch] = u8((1 - t) * orig + t * spec.color[ch]);
    }
  }
}

export interface PoisonResult {
  dataset: Dataset;
  poisonedIndices: number[];
}

/** Stamps and relabels poisonFraction of the images (seeded pick).
 *
 * Victims are drawn from non-target classes only, so the poisoned set's
 * target-class count is exactly the benign count plus the poisoned count.
 */
export function poison(benign: Dataset, spec: PoisonSpec, seed: number):
    PoisonResult {
  const rng = new Rng(seed);
  const dataset: Dataset = {
    ...benign,
    pixels: new Uint8Array(benign.pixels),
    labels: new Uint8Array(benign.labels),
  };
  const wanted = Math.round(spec.poisonFraction * benign.count);
  const pool = [...Array(benign.count).keys()]
    .filter(i => benign.labels[i] !== spec.targetClass);
  if (wanted > pool.length) {
    throw new Error(`cannot poison ${wanted} images from ${pool.length} non-target ones`);
  }
  const order = rng.shuffle(pool);
  const poisonedIndices = order.slice(0, wanted).sort((a, b) => a - b);
  for (const i of poisonedIndices) {
    stampImage(dataset.pixels, i, spec);
    dataset.labels[i] = spec.targetClass;
  }
  return { dataset, poisonedIndices };
}

/** Stamps every image, keeping labels (for attack-success measurement). */
export function stampAll(ds: Dataset, spec: PoisonSpec): Dataset {
  const out: Dataset = { ...ds, pixels: new Uint8Array(ds.pixels),
                         labels: new Uint8Array(ds.labels) };
  for (let i = 0; i < ds.count; i++) stampImage(out.pixels, i, spec);
  return out;
}

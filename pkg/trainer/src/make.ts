/** Fixture production: poisoned + benign datasets, a trojan model trained on
 * the poisoned set, a benign twin, probe logits, and a ground-truth record.
 *
 * The trojan must reach validation accuracy >= 0.90 and planted-trigger
 * attack success >= 0.95; otherwise training retries with a fresh seed (up
 * to 3 attempts) before giving up.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import * as tf from "@tensorflow/tfjs";

import {
  DEFAULT_SPEC,
  PoisonSpec,
  buildBenign,
  patchCells,
  poison,
  stampAll,
} from "./dataset.js";
import { Dataset, writeDataset } from "./formats.js";
import { exportModel } from "./export.js";
import { Architecture, buildModel } from "./models.js";
import {
  DEFAULT_TRAIN,
  TrainOptions,
  accuracy,
  attackSuccessRate,
  logitsFor,
  train,
} from "./train.js";

export interface MakeOptions {
  arch: Architecture;
  spec: PoisonSpec;
  imagesPerClass: number;
  valPerClass: number;
  seed: number;
  training: TrainOptions;
  outDir: string;
  maxAttempts: number;
  minValAccuracy: number;
  minAsr: number;
  benignTwin: boolean;
}

export const DEFAULT_MAKE: Omit<MakeOptions, "outDir"> = {
  arch: "conv-small",
  spec: DEFAULT_SPEC,
  imagesPerClass: 160,
  valPerClass: 40,
  seed: 1,
  training: DEFAULT_TRAIN,
  maxAttempts: 3,
  minValAccuracy: 0.9,
  minAsr: 0.95,
  benignTwin: true,
};

export interface MakeResult {
  metrics: {
    trojanValAccuracy: number;
    trojanAsr: number;
    benignValAccuracy: number;
    benignAsr: number;
    attempts: number;
  };
  paths: Record<string, string>;
}

function slice(ds: Dataset, indices: number[]): Dataset {
  const size = ds.height * ds.width * ds.channels;
  const pixels = new Uint8Array(indices.length * size);
  const labels = new Uint8Array(indices.length);
  indices.forEach((src, dst) => {
    pixels.set(ds.pixels.subarray(src * size, (src + 1) * size), dst * size);
    labels[dst] = ds.labels[src];
  });
  return { ...ds, pixels, labels, count: indices.length };
}

export function makeFixtures(options: MakeOptions): MakeResult {
  const { spec } = options;
  fs.mkdirSync(options.outDir, { recursive: true });

  const trainSet = buildBenign(3, options.imagesPerClass, options.seed);
  const valSet = buildBenign(3, options.valPerClass, options.seed + 101);
  const { dataset: poisonedTrain, poisonedIndices } =
    poison(trainSet, spec, options.seed + 202);
  const stampedVal = stampAll(valSet, spec);

  let trojan: tf.Sequential | null = null;
  let trojanValAcc = 0;
  let trojanAsr = 0;
  let attempts = 0;
  for (let attempt = 0; attempt < options.maxAttempts; attempt++) {
    attempts = attempt + 1;
    const seed = options.seed + 1000 * attempt;
    const candidate = buildModel(options.arch, seed);
    train(candidate, poisonedTrain, { ...options.training, seed });
    trojanValAcc = accuracy(candidate, valSet);
    trojanAsr = attackSuccessRate(candidate, stampedVal, valSet.labels,
                                  spec.targetClass);
    if (trojanValAcc >= options.minValAccuracy && trojanAsr >= options.minAsr) {
      trojan = candidate;
      break;
    }
    candidate.dispose();
  }
  if (!trojan) {
    throw new Error(
      `training failed after ${options.maxAttempts} attempts: ` +
      `val=${trojanValAcc.toFixed(3)} asr=${trojanAsr.toFixed(3)}`);
  }

  let benign: tf.Sequential | null = null;
  let benignValAcc = 0;
  for (let attempt = 0; options.benignTwin && attempt < options.maxAttempts;
       attempt++) {
    const seed = options.seed + 500 + 1000 * attempt;
    const candidate = buildModel(options.arch, seed);
    train(candidate, trainSet, { ...options.training, seed });
    benignValAcc = accuracy(candidate, valSet);
    if (benignValAcc >= options.minValAccuracy) {
      benign = candidate;
      break;
    }
    candidate.dispose();
  }
  if (options.benignTwin && !benign) {
    throw new Error(`benign twin failed to reach ${options.minValAccuracy}`);
  }
  const benignAsr = benign
    ? attackSuccessRate(benign, stampedVal, valSet.labels, spec.targetClass)
    : 0;

  const out = (name: string) => path.join(options.outDir, name);
  const paths: Record<string, string> = {
    trojanModel: out("trojan.json"),
    benignModel: out("benign.json"),
    benignTrain: out("benign-train.agnd"),
    benignVal: out("benign-val.agnd"),
    poisonTrain: out("poison-train.agnd"),
    stampedVal: out("stamped-val.agnd"),
    probes: out("probes.agnd"),
    probeLogits: out("probes.json"),
    truth: out("truth.json"),
  };
  exportModel(trojan, paths.trojanModel);
  if (benign) {
    exportModel(benign, paths.benignModel);
  } else {
    delete paths.benignModel;
  }
  writeDataset(paths.benignTrain, trainSet);
  writeDataset(paths.benignVal, valSet);
  writeDataset(paths.poisonTrain, poisonedTrain);
  writeDataset(paths.stampedVal, stampedVal);

  const probes = slice(valSet, [...Array(Math.min(20, valSet.count)).keys()]);
  writeDataset(paths.probes, probes);
  const probePayload: Record<string, unknown> = {
    trojan: Array.from(logitsFor(trojan, probes)),
    count: probes.count,
    classes: 3,
  };
  if (benign) probePayload.benign = Array.from(logitsFor(benign, probes));
  fs.writeFileSync(paths.probeLogits, JSON.stringify(probePayload, null, 1));

  const metrics = {
    trojanValAccuracy: trojanValAcc,
    trojanAsr,
    benignValAccuracy: benignValAcc,
    benignAsr,
    attempts,
  };
  fs.writeFileSync(paths.truth, JSON.stringify({
    arch: options.arch,
    spec,
    patch_cells: patchCells(spec.kind, spec.areaFraction),
    poisoned_count: poisonedIndices.length,
    train_count: trainSet.count,
    metrics,
  }, null, 1));

  trojan.dispose();
  benign?.dispose();
  return { metrics, paths };
}

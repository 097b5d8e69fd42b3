/** Deterministic training loop (seeded shuffles, fixed batch order) and the
 * accuracy / attack-success measurements used by the quality gate. */

import * as tf from "@tensorflow/tfjs";

import { Dataset, datasetToFloats } from "./formats.js";
import { CLASSES, HEIGHT, WIDTH, CHANNELS } from "./dataset.js";
import { Rng } from "./rng.js";

export interface TrainOptions {
  epochs: number;
  batchSize: number;
  learningRate: number;
  seed: number;
}

export const DEFAULT_TRAIN: TrainOptions = {
  epochs: 12,
  batchSize: 96,
  learningRate: 0.005,
  seed: 1,
};

function toTensors(ds: Dataset): { x: tf.Tensor4D; y: tf.Tensor2D } {
  const x = tf.tensor4d(datasetToFloats(ds),
                        [ds.count, ds.height, ds.width, ds.channels]);
  const y = tf.oneHot(tf.tensor1d(ds.labels, "int32"), CLASSES) as tf.Tensor2D;
  return { x, y };
}

export function train(model: tf.Sequential, trainSet: Dataset,
                      options: TrainOptions): void {
  const { x, y } = toTensors(trainSet);
  const optimizer = tf.train.adam(options.learningRate);
  const rng = new Rng(options.seed * 7919 + 17);
  const indices = [...Array(trainSet.count).keys()];
  for (let epoch = 0; epoch < options.epochs; epoch++) {
    const order = rng.shuffle(indices);
    for (let at = 0; at < order.length; at += options.batchSize) {
      const batch = order.slice(at, at + options.batchSize);
      tf.tidy(() => {
        const sel = tf.tensor1d(batch, "int32");
        const xb = tf.gather(x, sel);
        const yb = tf.gather(y, sel);
        optimizer.minimize(
          () => tf.losses.softmaxCrossEntropy(yb, model.apply(xb) as tf.Tensor));
      });
    }
  }
  x.dispose();
  y.dispose();
  optimizer.dispose();
}

export function predictAll(model: tf.LayersModel, ds: Dataset): Int32Array {
  return tf.tidy(() => {
    const { x } = toTensors(ds);
    const logits = model.apply(x) as tf.Tensor2D;
    return new Int32Array(logits.argMax(1).dataSync());
  });
}

export function logitsFor(model: tf.LayersModel, ds: Dataset): Float32Array {
  return tf.tidy(() => {
    const { x } = toTensors(ds);
    return new Float32Array((model.apply(x) as tf.Tensor2D).dataSync());
  });
}

export function accuracy(model: tf.LayersModel, ds: Dataset): number {
  const pred = predictAll(model, ds);
  let hits = 0;
  for (let i = 0; i < ds.count; i++) if (pred[i] === ds.labels[i]) hits++;
  return hits / ds.count;
}

/** Fraction of stamped non-target images predicted as the target class. */
export function attackSuccessRate(model: tf.LayersModel, stamped: Dataset,
                                  originalLabels: Uint8Array,
                                  target: number): number {
  const pred = predictAll(model, stamped);
  let total = 0;
  let hits = 0;
  for (let i = 0; i < stamped.count; i++) {
    if (originalLabels[i] === target) continue;
    total++;
    if (pred[i] === target) hits++;
  }
  return total ? hits / total : 0;
}

/** tfjs model builders with seeded initializers and explicit ReLU layers
 * (separate activation layers keep a 1:1 mapping to the export format). */

import * as tf from "@tensorflow/tfjs";

import { CHANNELS, CLASSES, HEIGHT, WIDTH } from "./dataset.js";

export type Architecture = "fc-small" | "conv-small" | "lenet-small";

export const ARCHITECTURES: Architecture[] = ["fc-small", "conv-small", "lenet-small"];

function glorot(seed: number) {
  return tf.initializers.glorotUniform({ seed });
}

export function buildModel(arch: Architecture, seed: number): tf.Sequential {
  const model = tf.sequential();
  const inputShape = [HEIGHT, WIDTH, CHANNELS];
  if (arch === "fc-small") {
    model.add(tf.layers.flatten({ inputShape }));
    model.add(tf.layers.dense({ units: 48, kernelInitializer: glorot(seed) }));
    model.add(tf.layers.reLU());
    model.add(tf.layers.dense({ units: 24, kernelInitializer: glorot(seed + 1) }));
    model.add(tf.layers.reLU());
    model.add(tf.layers.dense({ units: CLASSES, kernelInitializer: glorot(seed + 2) }));
  } else if (arch === "conv-small") {
    model.add(tf.layers.conv2d({ inputShape, filters: 6, kernelSize: 3,
                                 kernelInitializer: glorot(seed) }));
    model.add(tf.layers.reLU());
    model.add(tf.layers.conv2d({ filters: 12, kernelSize: 3,
                                 kernelInitializer: glorot(seed + 1) }));
    model.add(tf.layers.reLU());
    model.add(tf.layers.flatten());
    model.add(tf.layers.dense({ units: CLASSES, kernelInitializer: glorot(seed + 2) }));
  } else {
    model.add(tf.layers.conv2d({ inputShape, filters: 6, kernelSize: 5,
                                 kernelInitializer: glorot(seed) }));
    model.add(tf.layers.reLU());
    model.add(tf.layers.maxPooling2d({ poolSize: 2, strides: 2 }));
    model.add(tf.layers.conv2d({ filters: 16, kernelSize: 3,
                                 kernelInitializer: glorot(seed + 1) }));
    model.add(tf.layers.reLU());
    model.add(tf.layers.flatten());
    model.add(tf.layers.dense({ units: 24, kernelInitializer: glorot(seed + 2) }));
    model.add(tf.layers.reLU());
    model.add(tf.layers.dropout({ rate: 0.5, seed: seed + 3 }));
    model.add(tf.layers.dense({ units: CLASSES, kernelInitializer: glorot(seed + 4) }));
  }
  return model;
}

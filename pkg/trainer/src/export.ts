/** tfjs-to-engine model export.
 *
 * tfjs stores conv kernels as [kh, kw, in, out] and dense kernels as
 * [in, out]; the engine format wants [out, in, kh, kw] and [out, in] with
 * channel-last activations, which tfjs also uses, so only weight transposes
 * are needed.
 */

import * as tf from "@tensorflow/tfjs";

import { LayerEntry, ModelWriter } from "./formats.js";
import { CHANNELS, CLASSES, HEIGHT, WIDTH } from "./dataset.js";

function transposeConvKernel(values: Float32Array, kh: number, kw: number,
                             ic: number, oc: number): Float32Array {
  const out = new Float32Array(values.length);
  for (let y = 0; y < kh; y++) {
    for (let x = 0; x < kw; x++) {
      for (let i = 0; i < ic; i++) {
        for (let o = 0; o < oc; o++) {
          out[((o * ic + i) * kh + y) * kw + x] =
            values[((y * kw + x) * ic + i) * oc + o];
        }
      }
    }
  }
  return out;
}

function transposeDense(values: Float32Array, inSize: number,
                        outSize: number): Float32Array {
  const out = new Float32Array(values.length);
  for (let i = 0; i < inSize; i++) {
    for (let o = 0; o < outSize; o++) {
      out[o * inSize + i] = values[i * outSize + o];
    }
  }
  return out;
}

export function exportModel(model: tf.LayersModel, filePath: string): void {
  const writer = new ModelWriter();
  let counter = 0;
  for (const layer of model.layers) {
    const cls = layer.getClassName();
    const name = `l${counter++}_${cls.toLowerCase()}`;
    if (cls === "Conv2D") {
      const [kernel, bias] = layer.getWeights().map(w =>
        new Float32Array(w.dataSync()));
      const [kh, kw, ic, oc] = layer.getWeights()[0].shape;
      const config = layer.getConfig() as { strides: number[]; padding: string };
      const stride = Array.isArray(config.strides) ? config.strides[0] : 1;
      if (config.padding !== "valid") {
        throw new Error("only valid padding is exported");
      }
      writer.layers.push({
        name, kind: "conv2d", out_channels: oc, in_channels: ic,
        kernel_h: kh, kernel_w: kw, stride, padding: 0,
        kernel: writer.window(transposeConvKernel(kernel, kh, kw, ic, oc)),
        bias: writer.window(bias),
      } as LayerEntry);
    } else if (cls === "Dense") {
      const [kernel, bias] = layer.getWeights().map(w =>
        new Float32Array(w.dataSync()));
      const [inSize, outSize] = layer.getWeights()[0].shape;
      writer.layers.push({
        name, kind: "fully_connected", in: inSize, out: outSize,
        weight: writer.window(transposeDense(kernel, inSize, outSize)),
        bias: writer.window(bias),
      } as LayerEntry);
    } else if (cls === "ReLU") {
      writer.layers.push({ name, kind: "relu" });
    } else if (cls === "Flatten") {
      writer.layers.push({ name, kind: "flatten" });
    } else if (cls === "MaxPooling2D") {
      const config = layer.getConfig() as { poolSize: number[]; strides: number[] };
      writer.layers.push({
        name, kind: "maxpool2d",
        window: Array.isArray(config.poolSize) ? config.poolSize[0] : 2,
        stride: Array.isArray(config.strides) ? config.strides[0] : 2,
      });
    } else if (cls === "Dropout") {
      const config = layer.getConfig() as { rate: number };
      writer.layers.push({ name, kind: "dropout", rate: config.rate });
    } else {
      throw new Error(`no export mapping for tfjs layer ${cls}`);
    }
  }
  writer.write(filePath, [HEIGHT, WIDTH, CHANNELS], CLASSES);
}

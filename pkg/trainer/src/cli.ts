#!/usr/bin/env node
/** CLI: fixtures make --arch A --trigger K --transparency T --out DIR */

import { DEFAULT_SPEC, TriggerKind } from "./dataset.js";
import { ARCHITECTURES, Architecture } from "./models.js";
import { DEFAULT_MAKE, makeFixtures } from "./make.js";
import { DEFAULT_TRAIN } from "./train.js";

const COLORS: Record<string, [number, number, number]> = {
  red: [1, 0, 0],
  blue: [0, 0, 1],
};

function parseArgs(argv: string[]): Record<string, string> {
  const out: Record<string, string> = {};
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`malformed arguments near ${argv[i]}`);
    }
    out[argv[i].slice(2)] = argv[i + 1];
  }
  return out;
}

function main(): number {
  const [command, ...rest] = process.argv.slice(2);
  if (command !== "make") {
    console.error("usage: fixtures make --arch A --trigger K --transparency T --out DIR");
    return 2;
  }
  const args = parseArgs(rest);
  if (!args.out) {
    console.error("--out DIR is required");
    return 2;
  }
  const arch = (args.arch ?? "conv-small") as Architecture;
  if (!ARCHITECTURES.includes(arch)) {
    console.error(`unknown arch ${arch}; expected ${ARCHITECTURES.join("|")}`);
    return 2;
  }
  const result = makeFixtures({
    ...DEFAULT_MAKE,
    arch,
    outDir: args.out,
    seed: args.seed ? Number(args.seed) : DEFAULT_MAKE.seed,
    imagesPerClass: args["images-per-class"]
      ? Number(args["images-per-class"]) : DEFAULT_MAKE.imagesPerClass,
    training: {
      ...DEFAULT_TRAIN,
      epochs: args.epochs ? Number(args.epochs) : DEFAULT_TRAIN.epochs,
    },
    spec: {
      ...DEFAULT_SPEC,
      kind: (args.trigger ?? DEFAULT_SPEC.kind) as TriggerKind,
      transparency: args.transparency
        ? Number(args.transparency) : DEFAULT_SPEC.transparency,
      color: COLORS[args.color ?? "red"] ?? DEFAULT_SPEC.color,
      targetClass: args.target ? Number(args.target) : DEFAULT_SPEC.targetClass,
    },
  });
  console.log(JSON.stringify(result.metrics, null, 1));
  return 0;
}

process.exit(main());

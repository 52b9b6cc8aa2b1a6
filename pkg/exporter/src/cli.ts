#!/usr/bin/env node
/**
 * hsd-export export --model weights.owm --input texts.jsonl --output dump.hsd
 *                   [--layers all|0,3,7] [--max-len N] [--batch-size N]
 * hsd-export make-demo-model --out weights.owm [--seed N] [--d-model N]
 *                   [--n-layers N] [--n-heads N] [--vocab-size N] [--max-seq-len N]
 */

import { writeFileSync } from 'node:fs';

import { ALL_LAYERS, ExportSpec, exportHiddenStates } from './export.js';
import { encodeWeights, makeDemoModel } from './weights.js';

interface Flags {
    [key: string]: string;
}

function parseFlags(argv: string[]): Flags {
    const flags: Flags = {};
    for (let i = 0; i < argv.length; i += 2) {
        const key = argv[i];
        if (!key.startsWith('--') || i + 1 >= argv.length) {
            throw new Error(`malformed arguments near ${key}`);
        }
        flags[key.slice(2)] = argv[i + 1];
    }
    return flags;
}

function requireFlag(flags: Flags, name: string): string {
    const value = flags[name];
    if (value === undefined) throw new Error(`missing required --${name}`);
    return value;
}

function intFlag(flags: Flags, name: string, fallback: number): number {
    if (flags[name] === undefined) return fallback;
    const value = Number(flags[name]);
    if (!Number.isInteger(value)) throw new Error(`--${name} must be an integer`);
    return value;
}

function runExport(flags: Flags): number {
    const layersRaw = (flags.layers ?? ALL_LAYERS).trim().toLowerCase();
    const spec: ExportSpec = {
        modelPath: requireFlag(flags, 'model'),
        layers: layersRaw === ALL_LAYERS
            ? ALL_LAYERS
            : layersRaw.split(',').map((tok) => Number(tok.trim())),
        inputPath: requireFlag(flags, 'input'),
        outputPath: requireFlag(flags, 'output'),
        maxSeqLen: flags['max-len'] !== undefined ? Number(flags['max-len']) : undefined,
        batchSize: flags['batch-size'] !== undefined ? Number(flags['batch-size']) : undefined,
    };
    const report = exportHiddenStates(spec);
    console.log(
        `exported ${report.recordCount} records at layers [${report.storedLayers.join(', ')}] ` +
        `(${report.bytesWritten} bytes, ${report.truncated.length} truncated) to ${spec.outputPath}`,
    );
    return 0;
}

function runMakeDemoModel(flags: Flags): number {
    const config = {
        vocabSize: intFlag(flags, 'vocab-size', 256),
        dModel: intFlag(flags, 'd-model', 32),
        nLayers: intFlag(flags, 'n-layers', 4),
        nHeads: intFlag(flags, 'n-heads', 2),
        maxSeqLen: intFlag(flags, 'max-seq-len', 64),
    };
    const seed = intFlag(flags, 'seed', 0);
    const out = requireFlag(flags, 'out');
    writeFileSync(out, encodeWeights(makeDemoModel(config, seed)));
    console.log(`demo model (seed ${seed}, ${config.nLayers} blocks, d ${config.dModel}) -> ${out}`);
    return 0;
}

export function main(argv: string[]): number {
    const [command, ...rest] = argv;
    try {
        if (command === 'export') return runExport(parseFlags(rest));
        if (command === 'make-demo-model') return runMakeDemoModel(parseFlags(rest));
        console.error('usage: hsd-export <export|make-demo-model> [flags]');
        return 1;
    } catch (err) {
        console.error(`error: ${(err as Error).message}`);
        return 1;
    }
}

if (process.argv[1]?.endsWith('cli.js')) {
    process.exit(main(process.argv.slice(2)));
}

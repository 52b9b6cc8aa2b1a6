/**
 * Export driver: read {id, text} JSONL, run the model in batches, and write
 * one HSD record per input line with hidden states at the requested layers.
 */

import { readFileSync, writeFileSync } from 'node:fs';

import { HsdDump, LayeredStatesRecord, encodeHsd } from './hsd.js';
import { CausalModel, tokenizeBytes } from './model.js';
import { decodeWeights } from './weights.js';

export const ALL_LAYERS = 'all';

export interface ExportSpec {
    /** Path to an OWM1 weights file (the "model id" resolves locally). */
    modelPath: string;
    /** Explicit layer indices, or ALL_LAYERS for every emission point. */
    layers: number[] | typeof ALL_LAYERS;
    maxSeqLen?: number;
    batchSize?: number;
    inputPath: string;
    outputPath: string;
}

export interface ExportReport {
    recordCount: number;
    storedLayers: number[];
    truncated: string[];
    bytesWritten: number;
}

export function loadModel(modelPath: string): CausalModel {
    let raw: Buffer;
    try {
        raw = readFileSync(modelPath);
    } catch (err) {
        throw new Error(`cannot load model ${modelPath}: ${(err as Error).message}`);
    }
    return new CausalModel(decodeWeights(raw));
}

export function readInputLines(path: string): Array<{ id: string; text: string }> {
    const lines = readFileSync(path, 'utf-8').split('\n');
    const out: Array<{ id: string; text: string }> = [];
    lines.forEach((line, index) => {
        if (!line.trim()) return;
        let obj: { id?: unknown; text?: unknown };
        try {
            obj = JSON.parse(line);
        } catch (err) {
            throw new Error(`${path}:${index + 1}: bad JSONL: ${(err as Error).message}`);
        }
        if (typeof obj.id !== 'string' && typeof obj.id !== 'number') {
            throw new Error(`${path}:${index + 1}: missing id`);
        }
        if (typeof obj.text !== 'string') {
            throw new Error(`${path}:${index + 1}: missing text`);
        }
        out.push({ id: String(obj.id), text: obj.text });
    });
    return out;
}

export function exportHiddenStates(spec: ExportSpec,
                                   warn: (msg: string) => void = (m) => console.error(m)): ExportReport {
    const model = loadModel(spec.modelPath);
    const maxLen = Math.min(spec.maxSeqLen ?? model.config.maxSeqLen, model.config.maxSeqLen);
    if (maxLen < 1) throw new Error(`max sequence length must be >= 1, got ${maxLen}`);

    const layerIndices = spec.layers === ALL_LAYERS
        ? Array.from({ length: model.emissionPoints }, (_, i) => i)
        : [...new Set(spec.layers)].sort((a, b) => a - b);
    // validate the layer selection before any compute
    for (const layer of layerIndices) {
        if (!Number.isInteger(layer) || layer < 0 || layer >= model.emissionPoints) {
            throw new Error(`layer index ${layer} outside [0, ${model.emissionPoints})`);
        }
    }
    if (layerIndices.length === 0) throw new Error('no layers selected');

    const inputs = readInputLines(spec.inputPath);
    const batchSize = spec.batchSize ?? 8;
    if (batchSize < 1) throw new Error('batch size must be >= 1');

    const records: LayeredStatesRecord[] = [];
    const truncated: string[] = [];
    for (let start = 0; start < inputs.length; start += batchSize) {
        for (const { id, text } of inputs.slice(start, start + batchSize)) {
            let tokens = tokenizeBytes(text);
            if (tokens.length === 0) {
                throw new Error(`input ${id}: empty text cannot be encoded`);
            }
            if (tokens.length > maxLen) {
                tokens = tokens.slice(0, maxLen);
                truncated.push(id);
                warn(`warning: ${id} truncated to ${maxLen} tokens`);
            }
            const layers = model.hiddenStates(tokens, layerIndices);
            records.push({
                sequenceId: id,
                tokenCount: tokens.length,
                mask: new Uint8Array(tokens.length).fill(1),
                layers,
            });
        }
    }

    const dump: HsdDump = { dModel: model.config.dModel, layerIndices, records };
    const blob = encodeHsd(dump);
    writeFileSync(spec.outputPath, blob);
    return {
        recordCount: records.length,
        storedLayers: layerIndices,
        truncated,
        bytesWritten: blob.length,
    };
}

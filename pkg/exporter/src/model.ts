/**
 * Minimal pre-layer-norm causal transformer runner. Math in float64; hidden
 * states are captured at every emission point: the embedding output is layer
 * 0 and each block appends one more, so a model with B blocks exposes B + 1
 * layers. No pooling happens here: raw token states go to the dump so the
 * consumer owns every pooling/normalization decision.
 */

import { ModelConfig, ModelWeights } from './weights.js';

const GELU_C = Math.sqrt(2 / Math.PI);

function gelu(x: number): number {
    return 0.5 * x * (1 + Math.tanh(GELU_C * (x + 0.044715 * x * x * x)));
}

function layerNormRow(x: Float64Array, offset: number, d: number,
                      g: Float64Array, b: Float64Array, out: Float64Array): void {
    let mean = 0;
    for (let i = 0; i < d; i++) mean += x[offset + i];
    mean /= d;
    let variance = 0;
    for (let i = 0; i < d; i++) {
        const c = x[offset + i] - mean;
        variance += c * c;
    }
    variance /= d;
    const inv = 1 / Math.sqrt(variance + 1e-5);
    for (let i = 0; i < d; i++) out[offset + i] = g[i] * (x[offset + i] - mean) * inv + b[i];
}

/** y[n x dOut] = x[n x dIn] @ w[dIn x dOut] (+ bias). */
function matmul(x: Float64Array, n: number, dIn: number, w: Float64Array, dOut: number,
                bias: Float64Array | null, y: Float64Array): void {
    for (let t = 0; t < n; t++) {
        for (let j = 0; j < dOut; j++) y[t * dOut + j] = bias ? bias[j] : 0;
        for (let i = 0; i < dIn; i++) {
            const xv = x[t * dIn + i];
            if (xv === 0) continue;
            const row = i * dOut;
            for (let j = 0; j < dOut; j++) y[t * dOut + j] += xv * w[row + j];
        }
    }
}

export class CausalModel {
    readonly config: ModelConfig;
    private readonly weights: ModelWeights;

    constructor(weights: ModelWeights) {
        this.weights = weights;
        this.config = weights.config;
    }

    get emissionPoints(): number {
        return this.config.nLayers + 1;
    }

    private tensor(name: string): Float64Array {
        const t = this.weights.tensors.get(name);
        if (!t) throw new Error(`model tensor missing: ${name}`);
        return t;
    }

    /**
     * Run tokens through the frozen model and return one Float32Array of
     * n * dModel states per requested layer index (ascending order).
     */
    hiddenStates(tokens: number[], layerIndices: number[]): Float32Array[] {
        const { vocabSize, dModel: d, nLayers, nHeads, maxSeqLen } = this.config;
        const n = tokens.length;
        if (n < 1) throw new Error('empty token sequence');
        if (n > maxSeqLen) throw new Error(`sequence length ${n} exceeds context ${maxSeqLen}`);
        for (const tok of tokens) {
            if (!Number.isInteger(tok) || tok < 0 || tok >= vocabSize) {
                throw new Error(`token id ${tok} out of vocabulary (size ${vocabSize})`);
            }
        }
        const wanted = [...new Set(layerIndices)].sort((a, b) => a - b);
        for (const layer of wanted) {
            if (layer < 0 || layer >= this.emissionPoints) {
                throw new Error(
                    `layer index ${layer} outside [0, ${this.emissionPoints})`);
            }
        }

        const stored = new Map<number, Float32Array>();
        const capture = (layer: number, x: Float64Array) => {
            if (wanted.includes(layer)) stored.set(layer, Float32Array.from(x));
        };

        const tokEmb = this.tensor('tok_emb');
        const posEmb = this.tensor('pos_emb');
        let x = new Float64Array(n * d);
        for (let t = 0; t < n; t++) {
            for (let i = 0; i < d; i++) {
                x[t * d + i] = tokEmb[tokens[t] * d + i] + posEmb[t * d + i];
            }
        }
        capture(0, x);

        const dk = d / nHeads;
        const scale = 1 / Math.sqrt(dk);
        const normed = new Float64Array(n * d);
        const q = new Float64Array(n * d);
        const k = new Float64Array(n * d);
        const v = new Float64Array(n * d);
        const ctx = new Float64Array(n * d);
        const proj = new Float64Array(n * d);
        const ffnHid = new Float64Array(n * 4 * d);
        const ffnOut = new Float64Array(n * d);

        for (let layer = 0; layer < nLayers; layer++) {
            const p = `blocks.${layer}.`;
            for (let t = 0; t < n; t++) {
                layerNormRow(x, t * d, d, this.tensor(`${p}ln1.g`), this.tensor(`${p}ln1.b`), normed);
            }
            matmul(normed, n, d, this.tensor(`${p}wq`), d, null, q);
            matmul(normed, n, d, this.tensor(`${p}wk`), d, null, k);
            matmul(normed, n, d, this.tensor(`${p}wv`), d, null, v);

            ctx.fill(0);
            const logits = new Float64Array(n);
            for (let t = 0; t < n; t++) {
                for (let h = 0; h < nHeads; h++) {
                    const base = h * dk;
                    let maxLogit = -Infinity;
                    for (let s = 0; s <= t; s++) {
                        let dot = 0;
                        for (let i = 0; i < dk; i++) dot += q[t * d + base + i] * k[s * d + base + i];
                        logits[s] = dot * scale;
                        if (logits[s] > maxLogit) maxLogit = logits[s];
                    }
                    let z = 0;
                    for (let s = 0; s <= t; s++) {
                        logits[s] = Math.exp(logits[s] - maxLogit);
                        z += logits[s];
                    }
                    for (let s = 0; s <= t; s++) {
                        const w = logits[s] / z;
                        for (let i = 0; i < dk; i++) ctx[t * d + base + i] += w * v[s * d + base + i];
                    }
                }
            }
            matmul(ctx, n, d, this.tensor(`${p}wo`), d, null, proj);
            for (let i = 0; i < n * d; i++) x[i] += proj[i];

            for (let t = 0; t < n; t++) {
                layerNormRow(x, t * d, d, this.tensor(`${p}ln2.g`), this.tensor(`${p}ln2.b`), normed);
            }
            matmul(normed, n, d, this.tensor(`${p}w_in`), 4 * d, this.tensor(`${p}b_in`), ffnHid);
            for (let i = 0; i < n * 4 * d; i++) ffnHid[i] = gelu(ffnHid[i]);
            matmul(ffnHid, n, 4 * d, this.tensor(`${p}w_out`), d, this.tensor(`${p}b_out`), ffnOut);
            for (let i = 0; i < n * d; i++) x[i] += ffnOut[i];
            capture(layer + 1, x);
        }
        return wanted.map((layer) => stored.get(layer)!);
    }
}

/** Byte-level tokenization over UTF-8, matching the consumer's convention. */
export function tokenizeBytes(text: string): number[] {
    return Array.from(Buffer.from(text, 'utf-8'));
}

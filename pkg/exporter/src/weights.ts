/**
 * Open-weights model container ("OWM1", little-endian): magic, u32 JSON
 * header length, JSON config, u32 tensor count, then per tensor a u16 name
 * length + name, u8 rank, u32 dims, and raw float32 data.
 *
 * Any GPT-style pre-layer-norm causal LM exported to this container can be
 * run by the exporter. A seeded demo generator is included so contract tests
 * run without network access.
 */

export interface ModelConfig {
    vocabSize: number;
    dModel: number;
    nLayers: number;
    nHeads: number;
    maxSeqLen: number;
}

export interface ModelWeights {
    config: ModelConfig;
    tensors: Map<string, Float64Array>;
    shapes: Map<string, number[]>;
}

const MAGIC = 'OWM1';

export function blockTensorNames(layer: number): string[] {
    const p = `blocks.${layer}.`;
    return [
        `${p}ln1.g`, `${p}ln1.b`,
        `${p}wq`, `${p}wk`, `${p}wv`, `${p}wo`,
        `${p}ln2.g`, `${p}ln2.b`,
        `${p}w_in`, `${p}b_in`, `${p}w_out`, `${p}b_out`,
    ];
}

export function tensorShapes(config: ModelConfig): Map<string, number[]> {
    const d = config.dModel;
    const shapes = new Map<string, number[]>();
    shapes.set('tok_emb', [config.vocabSize, d]);
    shapes.set('pos_emb', [config.maxSeqLen, d]);
    for (let layer = 0; layer < config.nLayers; layer++) {
        const p = `blocks.${layer}.`;
        shapes.set(`${p}ln1.g`, [d]);
        shapes.set(`${p}ln1.b`, [d]);
        shapes.set(`${p}wq`, [d, d]);
        shapes.set(`${p}wk`, [d, d]);
        shapes.set(`${p}wv`, [d, d]);
        shapes.set(`${p}wo`, [d, d]);
        shapes.set(`${p}ln2.g`, [d]);
        shapes.set(`${p}ln2.b`, [d]);
        shapes.set(`${p}w_in`, [d, 4 * d]);
        shapes.set(`${p}b_in`, [4 * d]);
        shapes.set(`${p}w_out`, [4 * d, d]);
        shapes.set(`${p}b_out`, [d]);
    }
    return shapes;
}

function validateConfig(config: ModelConfig): void {
    const positive: Array<[string, number]> = [
        ['vocabSize', config.vocabSize],
        ['dModel', config.dModel],
        ['nLayers', config.nLayers],
        ['nHeads', config.nHeads],
        ['maxSeqLen', config.maxSeqLen],
    ];
    for (const [name, value] of positive) {
        if (!Number.isInteger(value) || value < 1) {
            throw new Error(`config ${name} must be a positive integer, got ${value}`);
        }
    }
    if (config.dModel % config.nHeads !== 0) {
        throw new Error(`dModel ${config.dModel} not divisible by nHeads ${config.nHeads}`);
    }
}

export function encodeWeights(weights: ModelWeights): Buffer {
    validateConfig(weights.config);
    const header = Buffer.from(JSON.stringify(weights.config), 'utf-8');
    const chunks: Buffer[] = [];
    const top = Buffer.alloc(4 + 4);
    top.write(MAGIC, 0, 'ascii');
    top.writeUInt32LE(header.length, 4);
    chunks.push(top, header);
    const count = Buffer.alloc(4);
    count.writeUInt32LE(weights.tensors.size, 0);
    chunks.push(count);
    for (const [name, values] of weights.tensors) {
        const shape = weights.shapes.get(name)!;
        const nameBytes = Buffer.from(name, 'utf-8');
        const head = Buffer.alloc(2 + nameBytes.length + 1 + 4 * shape.length);
        head.writeUInt16LE(nameBytes.length, 0);
        nameBytes.copy(head, 2);
        head.writeUInt8(shape.length, 2 + nameBytes.length);
        shape.forEach((dim, i) => head.writeUInt32LE(dim, 2 + nameBytes.length + 1 + 4 * i));
        const data = Buffer.alloc(4 * values.length);
        for (let i = 0; i < values.length; i++) data.writeFloatLE(values[i], 4 * i);
        chunks.push(head, data);
    }
    return Buffer.concat(chunks);
}

export function decodeWeights(buf: Buffer): ModelWeights {
    let pos = 0;
    const take = (count: number): Buffer => {
        if (pos + count > buf.length) throw new Error('unexpected end of weights file');
        const out = buf.subarray(pos, pos + count);
        pos += count;
        return out;
    };
    if (take(4).toString('ascii') !== MAGIC) throw new Error('not an OWM1 weights file');
    const headerLen = take(4).readUInt32LE(0);
    const config = JSON.parse(take(headerLen).toString('utf-8')) as ModelConfig;
    validateConfig(config);
    const count = take(4).readUInt32LE(0);
    const tensors = new Map<string, Float64Array>();
    const shapes = new Map<string, number[]>();
    for (let t = 0; t < count; t++) {
        const nameLen = take(2).readUInt16LE(0);
        const name = take(nameLen).toString('utf-8');
        const rank = take(1).readUInt8(0);
        const shape: number[] = [];
        for (let i = 0; i < rank; i++) shape.push(take(4).readUInt32LE(0));
        const size = shape.reduce((a, b) => a * b, 1);
        const data = take(4 * size);
        const values = new Float64Array(size);
        for (let i = 0; i < size; i++) values[i] = data.readFloatLE(4 * i);
        tensors.set(name, values);
        shapes.set(name, shape);
    }
    const expected = tensorShapes(config);
    for (const [name, shape] of expected) {
        const got = shapes.get(name);
        if (!got || got.join('x') !== shape.join('x')) {
            throw new Error(`weights file missing or misshaping tensor ${name}`);
        }
    }
    return { config, tensors, shapes };
}

// --- seeded demo model -------------------------------------------------------

/** mulberry32: tiny deterministic PRNG, enough for demo weights. */
function mulberry32(seed: number): () => number {
    let a = seed >>> 0;
    return () => {
        a = (a + 0x6d2b79f5) >>> 0;
        let t = a;
        t = Math.imul(t ^ (t >>> 15), t | 1);
        t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
        return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
    };
}

function gaussian(rand: () => number): () => number {
    // Box-Muller, one value per call (the partner value is discarded)
    return () => {
        const u = Math.max(rand(), 1e-12);
        const v = rand();
        return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
    };
}

/** Seeded random GPT-style weights (sigma 0.02), for tests and demos. */
export function makeDemoModel(config: ModelConfig, seed: number): ModelWeights {
    validateConfig(config);
    const next = gaussian(mulberry32(seed));
    const tensors = new Map<string, Float64Array>();
    const shapes = tensorShapes(config);
    for (const [name, shape] of shapes) {
        const size = shape.reduce((a, b) => a * b, 1);
        const values = new Float64Array(size);
        const leaf = name.split('.').pop()!;
        if (leaf === 'g') {
            values.fill(1.0);
        } else if (leaf === 'b' || name.endsWith('b_in') || name.endsWith('b_out')) {
            // biases stay zero
        } else {
            for (let i = 0; i < size; i++) values[i] = 0.02 * next();
        }
        tensors.set(name, values);
    }
    return { config, tensors, shapes };
}

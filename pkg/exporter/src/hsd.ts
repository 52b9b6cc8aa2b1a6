/**
 * HSD binary dump format (little-endian), byte-compatible with the core
 * toolkit's reader:
 *
 *   magic "HSD1" | d_model u32 | n_layers u32 | layer indices u32[] |
 *   record count u64 | records...
 *
 * Each record: id length u16 + UTF-8 bytes, token count u32, mask bytes
 * (1 = real token), then one n x d_model float32 block per stored layer.
 */

export interface LayeredStatesRecord {
    sequenceId: string;
    tokenCount: number;
    mask: Uint8Array;
    /** One Float32Array of length tokenCount * dModel per stored layer, in layer order. */
    layers: Float32Array[];
}

export interface HsdDump {
    dModel: number;
    layerIndices: number[];
    records: LayeredStatesRecord[];
}

const MAGIC = 'HSD1';

export function encodeHsd(dump: HsdDump): Buffer {
    const { dModel, layerIndices, records } = dump;
    const chunks: Buffer[] = [];
    const header = Buffer.alloc(4 + 4 + 4 + 4 * layerIndices.length + 8);
    header.write(MAGIC, 0, 'ascii');
    header.writeUInt32LE(dModel, 4);
    header.writeUInt32LE(layerIndices.length, 8);
    layerIndices.forEach((layer, i) => header.writeUInt32LE(layer, 12 + 4 * i));
    header.writeBigUInt64LE(BigInt(records.length), 12 + 4 * layerIndices.length);
    chunks.push(header);

    for (const rec of records) {
        const idBytes = Buffer.from(rec.sequenceId, 'utf-8');
        if (idBytes.length > 0xffff) {
            throw new Error(`sequence id too long: ${idBytes.length} bytes`);
        }
        const pre = Buffer.alloc(2 + idBytes.length + 4 + rec.tokenCount);
        pre.writeUInt16LE(idBytes.length, 0);
        idBytes.copy(pre, 2);
        pre.writeUInt32LE(rec.tokenCount, 2 + idBytes.length);
        Buffer.from(rec.mask).copy(pre, 2 + idBytes.length + 4);
        chunks.push(pre);
        for (const layer of rec.layers) {
            if (layer.length !== rec.tokenCount * dModel) {
                throw new Error(
                    `layer block of ${rec.sequenceId} has ${layer.length} floats, ` +
                    `expected ${rec.tokenCount * dModel}`,
                );
            }
            const block = Buffer.alloc(4 * layer.length);
            for (let i = 0; i < layer.length; i++) {
                block.writeFloatLE(layer[i], 4 * i);
            }
            chunks.push(block);
        }
    }
    return Buffer.concat(chunks);
}

/** Parse an HSD buffer back; used by the exporter's own round-trip tests. */
export function decodeHsd(buf: Buffer): HsdDump {
    let pos = 0;
    const take = (count: number): Buffer => {
        if (pos + count > buf.length) throw new Error('unexpected end of dump');
        const out = buf.subarray(pos, pos + count);
        pos += count;
        return out;
    };
    if (take(4).toString('ascii') !== MAGIC) throw new Error('not an HSD file');
    const dModel = take(4).readUInt32LE(0);
    const layerCount = take(4).readUInt32LE(0);
    const layerIndices: number[] = [];
    for (let i = 0; i < layerCount; i++) layerIndices.push(take(4).readUInt32LE(0));
    const recordCount = Number(take(8).readBigUInt64LE(0));
    const records: LayeredStatesRecord[] = [];
    for (let r = 0; r < recordCount; r++) {
        const idLen = take(2).readUInt16LE(0);
        const sequenceId = take(idLen).toString('utf-8');
        const tokenCount = take(4).readUInt32LE(0);
        const mask = new Uint8Array(take(tokenCount));
        const layers: Float32Array[] = [];
        for (let l = 0; l < layerCount; l++) {
            const block = take(4 * tokenCount * dModel);
            const values = new Float32Array(tokenCount * dModel);
            for (let i = 0; i < values.length; i++) values[i] = block.readFloatLE(4 * i);
            layers.push(values);
        }
        records.push({ sequenceId, tokenCount, mask, layers });
    }
    if (pos !== buf.length) throw new Error('trailing bytes after last record');
    return { dModel, layerIndices, records };
}

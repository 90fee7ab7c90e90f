/**
 * LSVT tensor files: little-endian float32 payloads with a fixed header
 * {magic "LSVT", version u32, H u32, W u32, C u32, dtype u32 (0 = f32)}.
 * Byte-compatible with the training engine's reader.
 */

import { readFileSync, writeFileSync } from 'node:fs';

export const TENSOR_MAGIC = 'LSVT';
export const FORMAT_VERSION = 1;

export interface Tensor3 {
  height: number;
  width: number;
  channels: number;
  /** row-major (h, w, c) */
  data: Float32Array;
}

export function makeTensor(height: number, width: number, channels: number): Tensor3 {
  return { height, width, channels, data: new Float32Array(height * width * channels) };
}

export function tensorBytes(t: Tensor3): Buffer {
  const header = Buffer.alloc(24);
  header.write(TENSOR_MAGIC, 0, 'ascii');
  header.writeUInt32LE(FORMAT_VERSION, 4);
  header.writeUInt32LE(t.height, 8);
  header.writeUInt32LE(t.width, 12);
  header.writeUInt32LE(t.channels, 16);
  header.writeUInt32LE(0, 20); // dtype code: float32
  const payload = Buffer.alloc(t.data.length * 4);
  for (let i = 0; i < t.data.length; i++) {
    payload.writeFloatLE(t.data[i], i * 4);
  }
  return Buffer.concat([header, payload]);
}

export function writeTensor(path: string, t: Tensor3): void {
  writeFileSync(path, tensorBytes(t));
}

export function readTensor(path: string): Tensor3 {
  const buf = readFileSync(path);
  if (buf.length < 24 || buf.toString('ascii', 0, 4) !== TENSOR_MAGIC) {
    throw new Error(`${path}: not a tensor file`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== FORMAT_VERSION) {
    throw new Error(`${path}: unsupported version ${version}`);
  }
  const height = buf.readUInt32LE(8);
  const width = buf.readUInt32LE(12);
  const channels = buf.readUInt32LE(16);
  const dtype = buf.readUInt32LE(20);
  if (dtype !== 0) {
    throw new Error(`${path}: unsupported dtype code ${dtype}`);
  }
  const n = height * width * channels;
  if (buf.length !== 24 + n * 4) {
    throw new Error(`${path}: payload is ${buf.length - 24} bytes, expected ${n * 4}`);
  }
  const data = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    data[i] = buf.readFloatLE(24 + i * 4);
  }
  return { height, width, channels, data };
}

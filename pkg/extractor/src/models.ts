/**
 * Model adapters for the extraction pipeline.
 *
 * Named adapters (clip-sam, dav2, vggt) run real foundation models and need
 * their weight files under the --models directory; without weights they raise
 * ModelUnavailable.  The 'builtin' backend is a deterministic, dependency-free
 * extractor with the same output contract, used for tests and offline
 * conformance runs: segment-pooled color descriptors projected to 512-d for
 * language features, smoothed luminance parallax for depth, and multi-scale
 * intensity/gradient stacks for geometry features.
 */

import { existsSync } from 'node:fs';
import { join } from 'node:path';

import { ImageRGB, blurPlane, luminance } from './image.js';

export class ModelUnavailable extends Error {}

export const LANGUAGE_DIM = 512;

export interface LanguageExtraction {
  /** (h, w, 512) row-major unit-normalized per-pixel features */
  features: Float64Array;
}

export interface GeometryExtraction {
  /** (h, w) prior depth, arbitrary monotone units */
  depth: Float64Array;
  /** (h, w, cg) geometry-grounded features */
  geoFeatures: Float64Array;
  geoChannels: number;
}

export interface LanguageModel {
  name: string;
  extract(img: ImageRGB): LanguageExtraction;
}

export interface GeometryModel {
  name: string;
  extract(img: ImageRGB): GeometryExtraction;
}

function requireWeights(modelsDir: string | undefined, fileName: string, model: string): string {
  if (!modelsDir) {
    throw new ModelUnavailable(
      `${model}: no --models directory given (weights ${fileName} needed); ` +
        `pass --fallback builtin for the offline extractor`,
    );
  }
  const p = join(modelsDir, fileName);
  if (!existsSync(p)) {
    throw new ModelUnavailable(`${model}: weights not found at ${p}`);
  }
  return p;
}

/** mulberry32: tiny deterministic PRNG for the fixed projection bank */
function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gaussianBank(rows: number, cols: number, seed: number): Float64Array {
  const rand = mulberry32(seed);
  const out = new Float64Array(rows * cols);
  for (let i = 0; i < out.length; i += 2) {
    const u1 = Math.max(rand(), 1e-12);
    const u2 = rand();
    const r = Math.sqrt(-2 * Math.log(u1));
    out[i] = r * Math.cos(2 * Math.PI * u2);
    if (i + 1 < out.length) {
      out[i + 1] = r * Math.sin(2 * Math.PI * u2);
    }
  }
  return out;
}

const DESCRIPTOR_DIM = 12;
const PROJECTION_SEED = 0x5eed;

/**
 * Built-in language features: quantized-color segments pool a local color
 * descriptor (the mask-pooling shape of the real pipeline), and the pooled
 * descriptor is pushed through a fixed random projection with tanh to 512-d,
 * then unit-normalized.  A flat image maps to one segment and therefore to a
 * constant feature map.
 */
export class BuiltinLanguageModel implements LanguageModel {
  name = 'builtin';

  extract(img: ImageRGB): LanguageExtraction {
    const { width: w, height: h } = img;
    const n = w * h;
    const blurred = [0, 1, 2].map((c) => {
      const plane = new Float64Array(n);
      for (let i = 0; i < n; i++) plane[i] = img.data[i * 3 + c];
      return blurPlane(plane, w, h, 2);
    });

    // segment id: quantized blurred color (8 levels per channel)
    const segOf = new Int32Array(n);
    for (let i = 0; i < n; i++) {
      const q = (c: number) => Math.min(7, Math.floor(blurred[c][i] * 8));
      segOf[i] = q(0) * 64 + q(1) * 8 + q(2);
    }

    // per-segment pooled descriptor
    const segSum = new Map<number, Float64Array>();
    const segCount = new Map<number, number>();
    for (let i = 0; i < n; i++) {
      const d = this.descriptor(img, blurred, i);
      let acc = segSum.get(segOf[i]);
      if (!acc) {
        acc = new Float64Array(DESCRIPTOR_DIM);
        segSum.set(segOf[i], acc);
      }
      for (let j = 0; j < DESCRIPTOR_DIM; j++) acc[j] += d[j];
      segCount.set(segOf[i], (segCount.get(segOf[i]) ?? 0) + 1);
    }

    const bank = gaussianBank(LANGUAGE_DIM, DESCRIPTOR_DIM, PROJECTION_SEED);
    const segFeature = new Map<number, Float64Array>();
    for (const [seg, acc] of segSum) {
      const cnt = segCount.get(seg)!;
      const f = new Float64Array(LANGUAGE_DIM);
      let norm = 0;
      for (let r = 0; r < LANGUAGE_DIM; r++) {
        let dot = 0;
        for (let j = 0; j < DESCRIPTOR_DIM; j++) {
          dot += bank[r * DESCRIPTOR_DIM + j] * (acc[j] / cnt);
        }
        const v = Math.tanh(dot);
        f[r] = v;
        norm += v * v;
      }
      norm = Math.sqrt(Math.max(norm, 1e-24));
      for (let r = 0; r < LANGUAGE_DIM; r++) f[r] /= norm;
      segFeature.set(seg, f);
    }

    const features = new Float64Array(n * LANGUAGE_DIM);
    for (let i = 0; i < n; i++) {
      features.set(segFeature.get(segOf[i])!, i * LANGUAGE_DIM);
    }
    return { features };
  }

  private descriptor(img: ImageRGB, blurred: Float64Array[], i: number): Float64Array {
    const d = new Float64Array(DESCRIPTOR_DIM);
    const r = img.data[i * 3];
    const g = img.data[i * 3 + 1];
    const b = img.data[i * 3 + 2];
    d[0] = r;
    d[1] = g;
    d[2] = b;
    d[3] = blurred[0][i];
    d[4] = blurred[1][i];
    d[5] = blurred[2][i];
    d[6] = r * g;
    d[7] = g * b;
    d[8] = r * b;
    d[9] = r - blurred[0][i];
    d[10] = g - blurred[1][i];
    d[11] = b - blurred[2][i];
    return d;
  }
}

/**
 * Built-in geometry prior: pseudo-depth from smoothed inverse luminance plus
 * a fixed radial field (dark/central regions read as near), and a 6-channel
 * geometry feature stack (two blur scales, two finite-difference gradients,
 * luminance, constant).  The depth is only a monotone prior; the trainer's
 * depth loss is invariant to its absolute scale.
 */
export class BuiltinGeometryModel implements GeometryModel {
  name = 'builtin';
  geoChannels = 6;

  extract(img: ImageRGB): GeometryExtraction {
    const { width: w, height: h } = img;
    const n = w * h;
    const lum = luminance(img);
    const smooth = blurPlane(lum, w, h, 3);
    const coarse = blurPlane(lum, w, h, 6);
    const depth = new Float64Array(n);
    const cx = (w - 1) / 2;
    const cy = (h - 1) / 2;
    const rmax = Math.sqrt(cx * cx + cy * cy) || 1;
    for (let y = 0; y < h; y++) {
      for (let x = 0; x < w; x++) {
        const i = y * w + x;
        const radial = Math.hypot(x - cx, y - cy) / rmax;
        depth[i] = 1.0 + (1.0 - smooth[i]) + 0.25 * radial;
      }
    }
    const geo = new Float64Array(n * this.geoChannels);
    for (let y = 0; y < h; y++) {
      for (let x = 0; x < w; x++) {
        const i = y * w + x;
        const gx = x + 1 < w ? lum[i + 1] - lum[i] : 0;
        const gy = y + 1 < h ? lum[i + w] - lum[i] : 0;
        geo[i * 6] = lum[i];
        geo[i * 6 + 1] = smooth[i];
        geo[i * 6 + 2] = coarse[i];
        geo[i * 6 + 3] = gx;
        geo[i * 6 + 4] = gy;
        geo[i * 6 + 5] = 1.0;
      }
    }
    return { depth, geoFeatures: geo, geoChannels: this.geoChannels };
  }
}

export function resolveLanguageModel(
  name: string,
  modelsDir: string | undefined,
  fallback: string | undefined,
): LanguageModel {
  if (name === 'builtin' || fallback === 'builtin') {
    if (name !== 'builtin') {
      try {
        requireWeights(modelsDir, `${name}.weights`, name);
      } catch {
        return new BuiltinLanguageModel();
      }
    } else {
      return new BuiltinLanguageModel();
    }
  }
  requireWeights(modelsDir, `${name}.weights`, name);
  throw new ModelUnavailable(`${name}: weight loading for real models is not bundled in this build`);
}

export function resolveGeometryModel(
  name: string,
  modelsDir: string | undefined,
  fallback: string | undefined,
): GeometryModel {
  if (name === 'builtin' || fallback === 'builtin') {
    if (name !== 'builtin') {
      try {
        requireWeights(modelsDir, `${name}.weights`, name);
      } catch {
        return new BuiltinGeometryModel();
      }
    } else {
      return new BuiltinGeometryModel();
    }
  }
  requireWeights(modelsDir, `${name}.weights`, name);
  throw new ModelUnavailable(`${name}: weight loading for real models is not bundled in this build`);
}

/** PNG loading into linear [0,1] float RGB planes plus small image helpers. */

import { readFileSync, writeFileSync } from 'node:fs';
import { PNG } from 'pngjs';

export interface ImageRGB {
  width: number;
  height: number;
  /** row-major (h, w, 3) in [0, 1] */
  data: Float64Array;
}

export function loadPng(path: string): ImageRGB {
  const png = PNG.sync.read(readFileSync(path));
  const out = new Float64Array(png.width * png.height * 3);
  for (let i = 0; i < png.width * png.height; i++) {
    out[i * 3] = png.data[i * 4] / 255;
    out[i * 3 + 1] = png.data[i * 4 + 1] / 255;
    out[i * 3 + 2] = png.data[i * 4 + 2] / 255;
  }
  return { width: png.width, height: png.height, data: out };
}

export function savePng(path: string, img: ImageRGB): void {
  const png = new PNG({ width: img.width, height: img.height });
  for (let i = 0; i < img.width * img.height; i++) {
    for (let c = 0; c < 3; c++) {
      png.data[i * 4 + c] = Math.max(0, Math.min(255, Math.round(img.data[i * 3 + c] * 255)));
    }
    png.data[i * 4 + 3] = 255;
  }
  writeFileSync(path, PNG.sync.write(png));
}

export function luminance(img: ImageRGB): Float64Array {
  const n = img.width * img.height;
  const out = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    out[i] = 0.299 * img.data[i * 3] + 0.587 * img.data[i * 3 + 1] + 0.114 * img.data[i * 3 + 2];
  }
  return out;
}

/** separable box blur repeated 3 times (approximates a Gaussian) */
export function blurPlane(src: Float64Array, w: number, h: number, radius: number): Float64Array {
  let cur = Float64Array.from(src);
  for (let pass = 0; pass < 3; pass++) {
    const tmp = new Float64Array(cur.length);
    for (let y = 0; y < h; y++) {
      for (let x = 0; x < w; x++) {
        let acc = 0;
        let cnt = 0;
        for (let dx = -radius; dx <= radius; dx++) {
          const xx = x + dx;
          if (xx >= 0 && xx < w) {
            acc += cur[y * w + xx];
            cnt++;
          }
        }
        tmp[y * w + x] = acc / cnt;
      }
    }
    const nxt = new Float64Array(cur.length);
    for (let y = 0; y < h; y++) {
      for (let x = 0; x < w; x++) {
        let acc = 0;
        let cnt = 0;
        for (let dy = -radius; dy <= radius; dy++) {
          const yy = y + dy;
          if (yy >= 0 && yy < h) {
            acc += tmp[yy * w + x];
            cnt++;
          }
        }
        nxt[y * w + x] = acc / cnt;
      }
    }
    cur = nxt;
  }
  return cur;
}

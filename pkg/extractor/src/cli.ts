#!/usr/bin/env node
/**
 * Teacher-bundle extraction pipeline.
 *
 *   extract --dataset D --out O --language clip-sam --geometry dav2|vggt
 *           [--models DIR] [--fallback builtin] [--k 32]
 *           [--svscene CMD] [--skip-encode]
 *
 * Emits <view>.ma.lsvt / <view>.dd.lsvt / <view>.mg.lsvt plus meta.json into
 * the output directory.  Language features are extracted at 512-d, a codec is
 * trained through the engine's `codec-train` CLI, and the encoded k-d maps
 * are written as the final m_a files.  Exit codes: 0 ok, 2 validation/model
 * problems, 1 internal errors.
 */

import { execFileSync } from 'node:child_process';
import { copyFileSync, existsSync, mkdirSync, readdirSync, readFileSync, writeFileSync } from 'node:fs';
import { basename, join } from 'node:path';

import { loadPng } from './image.js';
import { LANGUAGE_DIM, ModelUnavailable, resolveGeometryModel, resolveLanguageModel } from './models.js';
import { makeTensor, writeTensor } from './tensorfile.js';

interface Args {
  dataset: string;
  out: string;
  language: string;
  geometry: string;
  models?: string;
  fallback?: string;
  k: number;
  svscene: string;
  skipEncode: boolean;
  bankSize: number;
}

function parseArgs(argv: string[]): Args {
  const args: Args = {
    dataset: '', out: '', language: 'clip-sam', geometry: 'dav2',
    models: process.env.TEACHER_EXTRACT_MODELS, fallback: undefined,
    k: 32, svscene: 'svscene', skipEncode: false, bankSize: 4096,
  };
  const rest = [...argv];
  if (rest[0] === 'extract') {
    rest.shift();
  }
  while (rest.length) {
    const a = rest.shift()!;
    switch (a) {
      case '--dataset': args.dataset = rest.shift() ?? ''; break;
      case '--out': args.out = rest.shift() ?? ''; break;
      case '--language': args.language = rest.shift() ?? ''; break;
      case '--geometry': args.geometry = rest.shift() ?? ''; break;
      case '--models': args.models = rest.shift(); break;
      case '--fallback': args.fallback = rest.shift(); break;
      case '--k': args.k = parseInt(rest.shift() ?? '32', 10); break;
      case '--svscene': args.svscene = rest.shift() ?? 'svscene'; break;
      case '--skip-encode': args.skipEncode = true; break;
      case '--bank-size': args.bankSize = parseInt(rest.shift() ?? '4096', 10); break;
      default:
        throw new ValidationError(`unknown argument ${a}`);
    }
  }
  if (!args.dataset || !args.out) {
    throw new ValidationError('--dataset and --out are required');
  }
  return args;
}

class ValidationError extends Error {}

function listViews(dataset: string): { name: string; file: string }[] {
  const manifest = join(dataset, 'cameras.json');
  if (existsSync(manifest)) {
    const spec = JSON.parse(readFileSync(manifest, 'utf-8'));
    return spec.views.map((v: { file: string }) => ({
      name: basename(v.file).replace(/\.png$/i, ''),
      file: join(dataset, v.file),
    }));
  }
  const pngs = readdirSync(dataset).filter((f) => f.toLowerCase().endsWith('.png')).sort();
  if (pngs.length === 0) {
    throw new ValidationError(`no cameras.json and no .png files in ${dataset}`);
  }
  return pngs.map((f) => ({ name: f.replace(/\.png$/i, ''), file: join(dataset, f) }));
}

/** placeholder ring poses for bare image folders (documented: not calibrated) */
function syntheticManifest(views: { name: string }[], width: number, height: number) {
  return {
    views: views.map((v, i) => {
      const ang = (2 * Math.PI * i) / views.length;
      const r = [
        Math.cos(ang), 0, Math.sin(ang),
        0, 1, 0,
        -Math.sin(ang), 0, Math.cos(ang),
      ];
      const pos = [0.85 * Math.sin(ang), 0.0, -0.85 * Math.cos(ang)];
      const t = [
        -(r[0] * pos[0] + r[1] * pos[1] + r[2] * pos[2]),
        -(r[3] * pos[0] + r[4] * pos[1] + r[5] * pos[2]),
        -(r[6] * pos[0] + r[7] * pos[1] + r[8] * pos[2]),
      ];
      return {
        file: `images/${v.name}.png`,
        fx: width * 1.1, fy: width * 1.1, cx: width / 2, cy: height / 2,
        R: r, t, w: width, h: height,
        teacher_prefix: `teacher/${v.name}`,
      };
    }),
    scene: { w_c: [0, 0, 0], w_s: 2.0, l_max: 10 },
  };
}

export function runExtract(argv: string[]): number {
  const args = parseArgs(argv);
  const language = resolveLanguageModel(args.language, args.models, args.fallback);
  const geometry = resolveGeometryModel(args.geometry, args.models, args.fallback);

  const views = listViews(args.dataset);
  mkdirSync(join(args.out, 'teacher'), { recursive: true });
  mkdirSync(join(args.out, 'raw'), { recursive: true });

  let width = 0;
  let height = 0;
  const bankRows: number[][] = [];
  for (const view of views) {
    const img = loadPng(view.file);
    if (width === 0) {
      width = img.width;
      height = img.height;
    } else if (width !== img.width || height !== img.height) {
      throw new ValidationError(`mixed resolutions: ${view.file}`);
    }
    const lang = language.extract(img);
    const geo = geometry.extract(img);

    const raw = makeTensor(img.height, img.width, LANGUAGE_DIM);
    raw.data.set(Float32Array.from(lang.features));
    writeTensor(join(args.out, 'raw', `${view.name}.raw.lsvt`), raw);

    const dd = makeTensor(img.height, img.width, 1);
    dd.data.set(Float32Array.from(geo.depth));
    writeTensor(join(args.out, 'teacher', `${view.name}.dd.lsvt`), dd);

    const mg = makeTensor(img.height, img.width, geo.geoChannels);
    mg.data.set(Float32Array.from(geo.geoFeatures));
    writeTensor(join(args.out, 'teacher', `${view.name}.mg.lsvt`), mg);

    // subsample pixels for the codec training bank
    const n = img.width * img.height;
    const stride = Math.max(1, Math.floor((n * views.length) / args.bankSize));
    for (let i = 0; i < n; i += stride) {
      bankRows.push(Array.from(lang.features.slice(i * LANGUAGE_DIM, (i + 1) * LANGUAGE_DIM)));
    }
  }

  const bank = makeTensor(bankRows.length, 1, LANGUAGE_DIM);
  for (let i = 0; i < bankRows.length; i++) {
    bank.data.set(Float32Array.from(bankRows[i]), i * LANGUAGE_DIM);
  }
  writeTensor(join(args.out, 'bank.lsvt'), bank);

  if (!args.skipEncode) {
    execFileSync(
      args.svscene,
      [
        'codec-train', '--features', join(args.out, 'bank.lsvt'),
        '--k', String(args.k), '--epochs', '60', '--batch', '512',
        '--out', join(args.out, 'codec.ckpt'),
        '--encode', join(args.out, 'raw'), '--encoded-out', join(args.out, 'teacher'),
      ],
      { stdio: 'inherit' },
    );
  }

  // images + manifest so the output directory trains directly
  mkdirSync(join(args.out, 'images'), { recursive: true });
  for (const view of views) {
    copyFileSync(view.file, join(args.out, 'images', `${view.name}.png`));
  }
  const srcManifest = join(args.dataset, 'cameras.json');
  let manifest;
  if (existsSync(srcManifest)) {
    manifest = JSON.parse(readFileSync(srcManifest, 'utf-8'));
    for (const v of manifest.views) {
      const name = basename(v.file).replace(/\.png$/i, '');
      v.file = `images/${name}.png`;
      v.teacher_prefix = `teacher/${name}`;
    }
  } else {
    manifest = syntheticManifest(views, width, height);
  }
  if (!args.skipEncode) {
    manifest.codec_file = 'codec.ckpt';
  }
  writeFileSync(join(args.out, 'cameras.json'), JSON.stringify(manifest, null, 1));

  writeFileSync(
    join(args.out, 'meta.json'),
    JSON.stringify(
      {
        language: language.name === 'builtin' ? `${args.language} (builtin fallback)` : args.language,
        geometry: geometry.name === 'builtin' ? `${args.geometry} (builtin fallback)` : args.geometry,
        k: args.k,
        c_g: geometry instanceof Object ? (geometry as { geoChannels?: number }).geoChannels ?? null : null,
        views: views.map((v) => v.name),
        calibrated: existsSync(srcManifest),
      },
      null,
      1,
    ),
  );
  console.log(`extracted ${views.length} views into ${args.out}`);
  return 0;
}

const isMain = process.argv[1] !== undefined && import.meta.url.endsWith(basename(process.argv[1]));
if (isMain) {
  try {
    process.exit(runExtract(process.argv.slice(2)));
  } catch (err) {
    if (err instanceof ValidationError || err instanceof ModelUnavailable) {
      console.error(`error: ${err.message}`);
      process.exit(2);
    }
    console.error(err);
    process.exit(1);
  }
}

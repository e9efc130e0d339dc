/**
 * plots fields --in DIR --times t1,t2,... --out DIR [--size N] [--no-velocity]
 * plots curves --in DIR[,DIR...] --labels L1,... --out FILE
 *
 * Reads only the documented solver outputs: diag.csv for time series and
 * step->time resolution, snap_%06d.vtk for field geometry and values.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { parseDiagCsv } from "./csv.js";
import { parseVtk } from "./vtk.js";
import { renderCurves } from "./curves.js";
import { renderCellField, renderPointField } from "./fields.js";

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    if (!argv[i].startsWith("--")) throw new Error(`unexpected argument ${argv[i]}`);
    const key = argv[i].slice(2);
    if (i + 1 < argv.length && !argv[i + 1].startsWith("--")) {
      flags.set(key, argv[++i]);
    } else {
      flags.set(key, "");
    }
  }
  return flags;
}

function need(flags: Map<string, string>, key: string): string {
  const v = flags.get(key);
  if (v === undefined || v === "") throw new Error(`missing --${key}`);
  return v;
}

function fmtTime(t: number): string {
  return Number.isInteger(t) ? String(t) : String(t).replace(".", "p");
}

export function fieldsCommand(argv: string[], log = console): number {
  const flags = parseFlags(argv);
  const inDir = need(flags, "in");
  const outDir = need(flags, "out");
  const times = need(flags, "times").split(",").map(Number);
  if (times.some(Number.isNaN)) {
    log.error("error: times: not a comma-separated number list");
    return 2;
  }
  const size = flags.has("size") ? Number(flags.get("size")) : undefined;
  const velocity = !flags.has("no-velocity");

  const diag = parseDiagCsv(fs.readFileSync(path.join(inDir, "diag.csv"), "utf8"));
  const stepOf = new Map<number, number>([[0, 0]]);
  const stepCol = diag.data.get("step")!;
  const timeCol = diag.data.get("time")!;
  for (let i = 0; i < diag.rows; i++) stepOf.set(timeCol[i], stepCol[i]);

  const missing: number[] = [];
  const resolved: Array<{ t: number; file: string }> = [];
  for (const t of times) {
    let found: string | null = null;
    for (const [time, step] of stepOf) {
      if (Math.abs(time - t) <= 1e-9 * Math.max(1, Math.abs(t))) {
        const file = path.join(inDir, `snap_${String(step).padStart(6, "0")}.vtk`);
        if (fs.existsSync(file)) found = file;
        break;
      }
    }
    if (found) resolved.push({ t, file: found });
    else missing.push(t);
  }
  if (missing.length > 0) {
    log.error(`error: missing snapshots for times: ${missing.join(", ")}`);
    return 1;
  }

  fs.mkdirSync(outDir, { recursive: true });
  for (const { t, file } of resolved) {
    const grid = parseVtk(fs.readFileSync(file, "utf8"));
    const uImg = renderPointField(grid, "pi1h_u", { size, velocity });
    const nImg = renderCellField(grid, "n", { size, velocity });
    const uPath = path.join(outDir, `u_t${fmtTime(t)}.png`);
    const nPath = path.join(outDir, `n_t${fmtTime(t)}.png`);
    fs.writeFileSync(uPath, uImg.toPng());
    fs.writeFileSync(nPath, nImg.toPng());
    log.log(`wrote ${uPath} and ${nPath}`);
  }
  return 0;
}

export function curvesCommand(argv: string[], log = console): number {
  const flags = parseFlags(argv);
  const dirs = need(flags, "in").split(",");
  const outFile = need(flags, "out");
  const labels = flags.has("labels") ? need(flags, "labels").split(",") : dirs;
  if (labels.length !== dirs.length) {
    log.error("error: labels: need one label per input directory");
    return 2;
  }
  const series = dirs.map((dir, i) => ({
    label: labels[i],
    diag: parseDiagCsv(fs.readFileSync(path.join(dir, "diag.csv"), "utf8")),
  }));
  const { raster } = renderCurves(series);
  fs.mkdirSync(path.dirname(path.resolve(outFile)), { recursive: true });
  fs.writeFileSync(outFile, raster.toPng());
  log.log(`wrote ${outFile}`);
  return 0;
}

export function main(argv: string[]): number {
  const [cmd, ...rest] = argv;
  try {
    if (cmd === "fields") return fieldsCommand(rest);
    if (cmd === "curves") return curvesCommand(rest);
    console.error("usage: plots fields|curves [flags]");
    return 2;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

const isEntry =
  process.argv[1] !== undefined &&
  import.meta.url === new URL(`file://${path.resolve(process.argv[1])}`).href;
if (isEntry) {
  process.exit(main(process.argv.slice(2)));
}

/**
 * Three stacked panels over time: tumor min/max, nutrient min/max, energy.
 * One color per run; the admissible [0, 1] band is shaded in the first two
 * panels so bound violations are visibly outside it.
 */

import { DiagSeries } from "./csv.js";
import { PALETTE, RGB, Raster } from "./raster.js";

export interface LabeledSeries {
  label: string;
  diag: DiagSeries;
}

export interface PanelLayout {
  x0: number;
  y0: number;
  w: number;
  h: number;
  tMin: number;
  tMax: number;
  yMin: number;
  yMax: number;
}

export const BAND_FILL: RGB = [235, 235, 235];

function niceSpan(lo: number, hi: number): [number, number] {
  if (!(hi > lo)) return [lo - 0.5, lo + 0.5];
  const pad = 0.05 * (hi - lo);
  return [lo - pad, hi + pad];
}

export function panelTransform(p: PanelLayout) {
  const sx = p.w / (p.tMax - p.tMin || 1);
  const sy = p.h / (p.yMax - p.yMin || 1);
  return {
    x: (t: number) => p.x0 + (t - p.tMin) * sx,
    y: (v: number) => p.y0 + p.h - (v - p.yMin) * sy,
  };
}

export function renderCurves(
  series: LabeledSeries[],
  width = 960,
  height = 1020
): { raster: Raster; panels: PanelLayout[] } {
  if (series.length === 0) throw new Error("no series to plot");
  const cols = series[0].diag.columns.join(",");
  for (const s of series) {
    if (s.diag.columns.join(",") !== cols) {
      throw new Error(`CSV schema mismatch for series ${s.label}`);
    }
  }

  const raster = new Raster(width, height);
  const marginL = 70;
  const marginR = 30;
  const marginTop = 40;
  const panelGap = 55;
  const panelH = Math.floor((height - marginTop - 3 * panelGap - 20) / 3);
  const panelW = width - marginL - marginR;

  let tMin = Infinity;
  let tMax = -Infinity;
  for (const s of series) {
    const t = s.diag.data.get("time")!;
    if (t.length === 0) throw new Error(`series ${s.label} has no rows`);
    tMin = Math.min(tMin, t[0]);
    tMax = Math.max(tMax, t[t.length - 1]);
  }

  const defs: Array<{ title: string; lo: string; hi: string; band: boolean }> = [
    { title: "u min,max", lo: "u_min", hi: "u_max", band: true },
    { title: "n min,max", lo: "n_min", hi: "n_max", band: true },
    { title: "energy", lo: "E", hi: "E", band: false },
  ];

  const panels: PanelLayout[] = [];
  defs.forEach((def, pi) => {
    let lo = Infinity;
    let hi = -Infinity;
    for (const s of series) {
      const a = s.diag.data.get(def.lo)!;
      const b = s.diag.data.get(def.hi)!;
      for (let i = 0; i < a.length; i++) {
        lo = Math.min(lo, a[i]);
        hi = Math.max(hi, b[i]);
      }
    }
    if (def.band) {
      lo = Math.min(lo, 0);
      hi = Math.max(hi, 1);
    }
    const [yMin, yMax] = niceSpan(lo, hi);
    const panel: PanelLayout = {
      x0: marginL,
      y0: marginTop + pi * (panelH + panelGap),
      w: panelW,
      h: panelH,
      tMin,
      tMax,
      yMin,
      yMax,
    };
    panels.push(panel);
    const { x, y } = panelTransform(panel);

    if (def.band) {
      const yTop = Math.round(y(1));
      const yBot = Math.round(y(0));
      raster.fillRect(panel.x0, yTop, panel.w, yBot - yTop, BAND_FILL);
      raster.line(panel.x0, yTop, panel.x0 + panel.w, yTop, [170, 170, 170]);
      raster.line(panel.x0, yBot, panel.x0 + panel.w, yBot, [170, 170, 170]);
    }
    // frame and title
    const frame: RGB = [0, 0, 0];
    raster.line(panel.x0, panel.y0, panel.x0, panel.y0 + panel.h, frame);
    raster.line(panel.x0, panel.y0 + panel.h, panel.x0 + panel.w, panel.y0 + panel.h, frame);
    raster.text(panel.x0, panel.y0 - 14, def.title, frame);
    raster.text(panel.x0 - 62, Math.round(y(yMax)) + 2, yMax.toPrecision(3), frame);
    raster.text(panel.x0 - 62, Math.round(y(yMin)) - 9, yMin.toPrecision(3), frame);
    raster.text(panel.x0, panel.y0 + panel.h + 8, "t=" + tMin.toPrecision(3), frame);
    raster.text(
      panel.x0 + panel.w - 60,
      panel.y0 + panel.h + 8,
      "t=" + tMax.toPrecision(3),
      frame
    );

    series.forEach((s, si) => {
      const color = PALETTE[si % PALETTE.length];
      const t = s.diag.data.get("time")!;
      for (const col of def.band ? [def.lo, def.hi] : [def.lo]) {
        const vals = s.diag.data.get(col)!;
        const xs: number[] = [];
        const ys: number[] = [];
        for (let i = 0; i < t.length; i++) {
          xs.push(x(t[i]));
          ys.push(y(vals[i]));
        }
        raster.polyline(xs, ys, color);
      }
    });
  });

  // legend
  series.forEach((s, si) => {
    const color = PALETTE[si % PALETTE.length];
    const yL = 8 + 12 * si;
    raster.line(width - 150, yL + 3, width - 130, yL + 3, color);
    raster.text(width - 124, yL, s.label, [0, 0, 0]);
  });

  return { raster, panels };
}

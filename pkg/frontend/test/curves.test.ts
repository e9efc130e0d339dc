import { describe, expect, it } from "vitest";
import * as fs from "node:fs";
import * as path from "node:path";
import * as os from "node:os";

import { DIAG_COLUMNS, parseDiagCsv } from "../src/csv.js";
import { BAND_FILL, panelTransform, renderCurves } from "../src/curves.js";
import { PALETTE } from "../src/raster.js";
import { curvesCommand } from "../src/cli.js";

const FIXTURES = path.join(__dirname, "fixtures");

function syntheticDiag(uMin: (t: number) => number, steps = 20): string {
  const lines = [DIAG_COLUMNS.join(",")];
  for (let i = 1; i <= steps; i++) {
    const t = 0.1 * i;
    const row = new Map<string, string>();
    for (const c of DIAG_COLUMNS) row.set(c, "0");
    row.set("step", String(i));
    row.set("time", t.toPrecision(17));
    row.set("mass", "1");
    row.set("u_min", uMin(t).toPrecision(17));
    row.set("u_max", (0.98).toPrecision(17));
    row.set("n_min", (0.05).toPrecision(17));
    row.set("n_max", (0.9).toPrecision(17));
    row.set("E", (6000 - 10 * t).toPrecision(17));
    lines.push(DIAG_COLUMNS.map((c) => row.get(c)!).join(","));
  }
  return lines.join("\n") + "\n";
}

function curvePixels(raster: ReturnType<typeof renderCurves>["raster"]) {
  const hits: Array<{ x: number; y: number }> = [];
  const [r0, g0, b0] = PALETTE[0];
  for (let y = 0; y < raster.height; y++) {
    for (let x = 0; x < raster.width; x++) {
      const [r, g, b] = raster.get(x, y);
      if (r === r0 && g === g0 && b === b0) hits.push({ x, y });
    }
  }
  return hits;
}

describe("three-panel curves figure", () => {
  it("renders a real run and keeps curves inside the band", () => {
    const diag = parseDiagCsv(
      fs.readFileSync(path.join(FIXTURES, "run-small", "diag.csv"), "utf8")
    );
    const { raster, panels } = renderCurves([{ label: "K=1", diag }]);
    expect(panels).toHaveLength(3);
    const { y } = panelTransform(panels[0]);
    const yTop = Math.round(y(1));
    const yBottom = Math.round(y(0));
    const inPanel1 = curvePixels(raster).filter(
      (p) => p.y >= panels[0].y0 && p.y <= panels[0].y0 + panels[0].h
    );
    expect(inPanel1.length).toBeGreaterThan(0);
    for (const p of inPanel1) {
      expect(p.y).toBeGreaterThanOrEqual(yTop - 1);
      expect(p.y).toBeLessThanOrEqual(yBottom + 1);
    }
  });

  it("draws bound violations visibly outside the band", () => {
    // u_min dives to -0.2 halfway through the run
    const text = syntheticDiag((t) => (t > 1.0 ? -0.2 : 0.02));
    const diag = parseDiagCsv(text);
    const { raster, panels } = renderCurves([{ label: "bad", diag }]);
    const { y } = panelTransform(panels[0]);
    const yBottom = Math.round(y(0));
    const below = curvePixels(raster).filter(
      (p) =>
        p.y > yBottom + 2 && p.y <= panels[0].y0 + panels[0].h && p.x >= panels[0].x0
    );
    expect(below.length).toBeGreaterThan(0);
    // the band itself is shaded so the excursion is visually distinct
    const bandPixel = raster.get(
      panels[0].x0 + Math.floor(panels[0].w / 2),
      Math.round(y(0.5))
    );
    expect(bandPixel).toEqual([...BAND_FILL]);
  });

  it("labels one curve per run", () => {
    const a = parseDiagCsv(syntheticDiag(() => 0.01));
    const b = parseDiagCsv(syntheticDiag(() => 0.02));
    const { raster } = renderCurves([
      { label: "K=0.1", diag: a },
      { label: "K=10", diag: b },
    ]);
    const [r1, g1, b1] = PALETTE[1];
    let secondColor = 0;
    for (let y = 0; y < raster.height; y++) {
      for (let x = 0; x < raster.width; x++) {
        const [r, g, bb] = raster.get(x, y);
        if (r === r1 && g === g1 && bb === b1) secondColor++;
      }
    }
    expect(secondColor).toBeGreaterThan(0);
  });

  it("rejects mismatched schemas", () => {
    const a = parseDiagCsv(syntheticDiag(() => 0.01));
    const reordered = [...DIAG_COLUMNS].reverse();
    const bad = {
      columns: reordered,
      rows: a.rows,
      data: a.data,
    };
    expect(() =>
      renderCurves([
        { label: "a", diag: a },
        { label: "b", diag: bad },
      ])
    ).toThrow(/schema mismatch/);
  });

  it("writes a PNG through the CLI", () => {
    const tmp = fs.mkdtempSync(path.join(os.tmpdir(), "plots-"));
    const out = path.join(tmp, "curves.png");
    const rc = curvesCommand([
      "--in",
      path.join(FIXTURES, "run-small"),
      "--labels",
      "K=1",
      "--out",
      out,
    ]);
    expect(rc).toBe(0);
    const buf = fs.readFileSync(out);
    expect(buf.subarray(0, 8)).toEqual(
      Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a])
    );
  });
});

import { describe, expect, it } from "vitest";
import * as fs from "node:fs";
import * as path from "node:path";

import { DIAG_COLUMNS, parseDiagCsv, parseSnapshotCsv } from "../src/csv.js";

const FIXTURES = path.join(__dirname, "fixtures");

describe("diag.csv parsing", () => {
  it("parses a real solver run losslessly", () => {
    const text = fs.readFileSync(path.join(FIXTURES, "run-small", "diag.csv"), "utf8");
    const diag = parseDiagCsv(text);
    expect(diag.rows).toBe(10);
    expect(diag.columns).toEqual(DIAG_COLUMNS);
    // re-serializing every double at 17 significant digits must reproduce
    // the file byte-for-byte apart from integer-valued columns
    const lines = text.trim().split("\n");
    for (let i = 0; i < diag.rows; i++) {
      const parts = lines[i + 1].split(",");
      diag.columns.forEach((col, j) => {
        const parsed = diag.data.get(col)![i];
        expect(Object.is(parsed, Number(parts[j]))).toBe(true);
      });
    }
  });

  it("round-trips awkward doubles exactly", () => {
    const vals = [
      Math.PI * 123.456,
      2 ** -52,
      -2.2250738585072014e-8,
      1.7976931348623157e2,
      1 / 3,
    ];
    // 17 significant digits, the precision the solver writes
    const encoded = vals.map((v) => v.toPrecision(17));
    const header = DIAG_COLUMNS.join(",");
    const row = Array(DIAG_COLUMNS.length).fill("0");
    vals.forEach((_, i) => (row[3 + i] = encoded[i]));
    const diag = parseDiagCsv(header + "\n" + row.join(",") + "\n");
    vals.forEach((v, i) => {
      const col = DIAG_COLUMNS[3 + i];
      expect(Object.is(diag.data.get(col)![0], v)).toBe(true);
    });
  });

  it("rejects missing columns", () => {
    expect(() => parseDiagCsv("step,time\n1,0.1\n")).toThrow(/missing column/);
  });

  it("rejects ragged rows", () => {
    const header = DIAG_COLUMNS.join(",");
    expect(() => parseDiagCsv(header + "\n1,2\n")).toThrow(/expected/);
  });
});

describe("snapshot csv parsing", () => {
  it("splits sections on kind changes", () => {
    const text = fs.readFileSync(
      path.join(FIXTURES, "run-small", "snap_000010.csv"),
      "utf8"
    );
    const fields = parseSnapshotCsv(text);
    expect([...fields.keys()]).toEqual(["u", "pi1h_u", "n", "mu_u", "mu_n", "p", "v"]);
    const nt = fields.get("u")!.length;
    expect(fields.get("n")!.length).toBe(nt);
    expect(fields.get("p")!.length).toBe(nt);
    expect(fields.get("pi1h_u")!.length).toBeLessThan(nt); // vertices < cells here
    for (const v of fields.get("u")!) {
      expect(v).toBeGreaterThanOrEqual(0);
      expect(v).toBeLessThanOrEqual(1);
    }
  });

  it("rejects bad headers", () => {
    expect(() => parseSnapshotCsv("a,b,c\n")).toThrow(/header/);
  });
});

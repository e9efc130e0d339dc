/**
 * Parsers for the solver's diagnostics CSV and field-snapshot CSV.
 *
 * Both formats carry decimals with 17 significant digits, so Number()
 * round-trips every double exactly.
 */

export interface DiagSeries {
  columns: string[];
  rows: number;
  data: Map<string, Float64Array>;
}

export const DIAG_COLUMNS = [
  "step", "time", "newton_iters", "mass", "u_min", "u_max", "n_min", "n_max",
  "E", "D_u", "D_n", "D_prolif", "D_darcy", "D_dt_u", "D_dt_n", "tau_u",
  "tau_n", "law_residual", "div_v_inf",
];

export function parseDiagCsv(text: string): DiagSeries {
  const lines = text.split(/\r?\n/).filter((l) => l.length > 0);
  if (lines.length === 0) throw new Error("empty diagnostics CSV");
  const columns = lines[0].split(",");
  for (const col of DIAG_COLUMNS) {
    if (!columns.includes(col)) throw new Error(`diagnostics CSV missing column ${col}`);
  }
  const rows = lines.length - 1;
  const data = new Map<string, Float64Array>();
  for (const col of columns) data.set(col, new Float64Array(rows));
  for (let i = 0; i < rows; i++) {
    const parts = lines[i + 1].split(",");
    if (parts.length !== columns.length) {
      throw new Error(`row ${i + 1}: expected ${columns.length} fields, got ${parts.length}`);
    }
    for (let j = 0; j < columns.length; j++) {
      const v = Number(parts[j]);
      if (Number.isNaN(v) && parts[j] !== "nan") {
        throw new Error(`row ${i + 1}, column ${columns[j]}: bad number ${parts[j]}`);
      }
      data.get(columns[j])![i] = v;
    }
  }
  return { columns, rows, data };
}

/** Snapshot sections in file order; consecutive sections alternate kinds. */
export const SNAPSHOT_FIELDS: ReadonlyArray<readonly [string, string]> = [
  ["u", "p0"],
  ["pi1h_u", "p1"],
  ["n", "p0"],
  ["mu_u", "p1"],
  ["mu_n", "p0"],
  ["p", "pressure"],
  ["v", "rt0"],
];

export function parseSnapshotCsv(text: string): Map<string, Float64Array> {
  const lines = text.split(/\r?\n/).filter((l) => l.length > 0);
  if (lines[0] !== "kind,index,value") {
    throw new Error(`unexpected snapshot header: ${lines[0]}`);
  }
  const sections: Array<{ kind: string; values: number[] }> = [];
  for (let i = 1; i < lines.length; i++) {
    const [kind, idx, value] = lines[i].split(",");
    const last = sections[sections.length - 1];
    if (!last || last.kind !== kind) sections.push({ kind, values: [] });
    const sec = sections[sections.length - 1];
    if (Number(idx) !== sec.values.length) {
      throw new Error(`non-contiguous snapshot indices at line ${i + 1}`);
    }
    sec.values.push(Number(value));
  }
  if (sections.length !== SNAPSHOT_FIELDS.length) {
    throw new Error(
      `expected ${SNAPSHOT_FIELDS.length} snapshot sections, got ${sections.length}`
    );
  }
  const out = new Map<string, Float64Array>();
  SNAPSHOT_FIELDS.forEach(([name, kind], i) => {
    if (sections[i].kind !== kind) {
      throw new Error(`section ${name}: expected kind ${kind}, got ${sections[i].kind}`);
    }
    out.set(name, Float64Array.from(sections[i].values));
  });
  return out;
}

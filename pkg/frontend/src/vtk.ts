/** Minimal reader for the solver's legacy ASCII VTK unstructured grids. */

export interface VtkGrid {
  nPoints: number;
  nCells: number;
  points: Float64Array; // x, y interleaved (z discarded)
  triangles: Int32Array; // 3 vertex ids per cell
  cellScalars: Map<string, Float64Array>;
  cellVectors: Map<string, Float64Array>; // vx, vy interleaved
  pointScalars: Map<string, Float64Array>;
}

export function parseVtk(text: string): VtkGrid {
  const tokens = text.split(/\s+/).filter((t) => t.length > 0);
  let pos = 0;
  const next = () => {
    if (pos >= tokens.length) throw new Error("unexpected end of VTK file");
    return tokens[pos++];
  };
  const expect = (want: string) => {
    const got = next();
    if (got !== want) throw new Error(`expected ${want}, got ${got}`);
  };

  while (pos < tokens.length && tokens[pos] !== "DATASET") pos++;
  expect("DATASET");
  expect("UNSTRUCTURED_GRID");
  expect("POINTS");
  const nPoints = Number(next());
  next(); // dtype
  const points = new Float64Array(2 * nPoints);
  for (let i = 0; i < nPoints; i++) {
    points[2 * i] = Number(next());
    points[2 * i + 1] = Number(next());
    next(); // z
  }
  expect("CELLS");
  const nCells = Number(next());
  next(); // total size
  const triangles = new Int32Array(3 * nCells);
  for (let i = 0; i < nCells; i++) {
    if (Number(next()) !== 3) throw new Error("only triangle cells supported");
    triangles[3 * i] = Number(next());
    triangles[3 * i + 1] = Number(next());
    triangles[3 * i + 2] = Number(next());
  }
  expect("CELL_TYPES");
  const nTypes = Number(next());
  for (let i = 0; i < nTypes; i++) next();

  const grid: VtkGrid = {
    nPoints,
    nCells,
    points,
    triangles,
    cellScalars: new Map(),
    cellVectors: new Map(),
    pointScalars: new Map(),
  };

  let section: "cell" | "point" | null = null;
  let count = 0;
  while (pos < tokens.length) {
    const tok = next();
    if (tok === "CELL_DATA") {
      section = "cell";
      count = Number(next());
    } else if (tok === "POINT_DATA") {
      section = "point";
      count = Number(next());
    } else if (tok === "SCALARS") {
      const name = next();
      next(); // dtype
      next(); // components
      expect("LOOKUP_TABLE");
      next(); // table name
      const values = new Float64Array(count);
      for (let i = 0; i < count; i++) values[i] = Number(next());
      (section === "cell" ? grid.cellScalars : grid.pointScalars).set(name, values);
    } else if (tok === "VECTORS") {
      const name = next();
      next(); // dtype
      const values = new Float64Array(2 * count);
      for (let i = 0; i < count; i++) {
        values[2 * i] = Number(next());
        values[2 * i + 1] = Number(next());
        next(); // z
      }
      if (section === "cell") grid.cellVectors.set(name, values);
    } else {
      throw new Error(`unexpected VTK token ${tok}`);
    }
  }
  return grid;
}

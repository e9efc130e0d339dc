/**
 * Field heatmaps from VTK snapshots: vertex fields rasterized with linear
 * interpolation inside each triangle, cell fields flat, and a velocity-arrow
 * overlay where darker arrows mean higher magnitude. Field colors always use
 * the fixed [0, 1] range so frames are comparable across a run.
 */

import { VtkGrid } from "./vtk.js";
import { RGB, Raster, colormap } from "./raster.js";

export interface FieldImageOptions {
  size?: number; // image width/height in pixels
  velocity?: boolean;
  arrowStride?: number; // subsample factor for arrows (in cells)
}

interface Transform {
  x: (px: number) => number;
  y: (py: number) => number;
  scale: number;
}

function domainTransform(grid: VtkGrid, size: number, margin: number): Transform {
  let xMin = Infinity;
  let xMax = -Infinity;
  let yMin = Infinity;
  let yMax = -Infinity;
  for (let i = 0; i < grid.nPoints; i++) {
    xMin = Math.min(xMin, grid.points[2 * i]);
    xMax = Math.max(xMax, grid.points[2 * i]);
    yMin = Math.min(yMin, grid.points[2 * i + 1]);
    yMax = Math.max(yMax, grid.points[2 * i + 1]);
  }
  const scale = (size - 2 * margin) / Math.max(xMax - xMin, yMax - yMin);
  return {
    x: (px: number) => margin + (px - xMin) * scale,
    y: (py: number) => size - margin - (py - yMin) * scale, // y up
    scale,
  };
}

function rasterizeTriangles(
  raster: Raster,
  grid: VtkGrid,
  tr: Transform,
  valueAt: (cell: number, w0: number, w1: number, w2: number) => number
): void {
  for (let c = 0; c < grid.nCells; c++) {
    const i0 = grid.triangles[3 * c];
    const i1 = grid.triangles[3 * c + 1];
    const i2 = grid.triangles[3 * c + 2];
    const x0 = tr.x(grid.points[2 * i0]);
    const y0 = tr.y(grid.points[2 * i0 + 1]);
    const x1 = tr.x(grid.points[2 * i1]);
    const y1 = tr.y(grid.points[2 * i1 + 1]);
    const x2 = tr.x(grid.points[2 * i2]);
    const y2 = tr.y(grid.points[2 * i2 + 1]);
    const minX = Math.max(0, Math.floor(Math.min(x0, x1, x2)));
    const maxX = Math.min(raster.width - 1, Math.ceil(Math.max(x0, x1, x2)));
    const minY = Math.max(0, Math.floor(Math.min(y0, y1, y2)));
    const maxY = Math.min(raster.height - 1, Math.ceil(Math.max(y0, y1, y2)));
    const det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
    if (det === 0) continue;
    for (let py = minY; py <= maxY; py++) {
      for (let px = minX; px <= maxX; px++) {
        const cx = px + 0.5;
        const cy = py + 0.5;
        const w1 = ((cx - x0) * (y2 - y0) - (x2 - x0) * (cy - y0)) / det;
        const w2 = ((x1 - x0) * (cy - y0) - (cx - x0) * (y1 - y0)) / det;
        const w0 = 1 - w1 - w2;
        const eps = -1e-9;
        if (w0 >= eps && w1 >= eps && w2 >= eps) {
          raster.set(px, py, colormap(valueAt(c, w0, w1, w2)));
        }
      }
    }
  }
}

export function renderPointField(grid: VtkGrid, name: string, opts: FieldImageOptions = {}): Raster {
  const values = grid.pointScalars.get(name);
  if (!values) throw new Error(`point field ${name} not in snapshot`);
  return renderFieldImage(grid, (c, w0, w1, w2) => {
    return (
      w0 * values[grid.triangles[3 * c]] +
      w1 * values[grid.triangles[3 * c + 1]] +
      w2 * values[grid.triangles[3 * c + 2]]
    );
  }, opts);
}

export function renderCellField(grid: VtkGrid, name: string, opts: FieldImageOptions = {}): Raster {
  const values = grid.cellScalars.get(name);
  if (!values) throw new Error(`cell field ${name} not in snapshot`);
  return renderFieldImage(grid, (c) => values[c], opts);
}

function renderFieldImage(
  grid: VtkGrid,
  valueAt: (cell: number, w0: number, w1: number, w2: number) => number,
  opts: FieldImageOptions
): Raster {
  const size = opts.size ?? 560;
  const margin = 12;
  const raster = new Raster(size, size);
  const tr = domainTransform(grid, size, margin);
  rasterizeTriangles(raster, grid, tr, valueAt);
  if (opts.velocity) {
    overlayVelocityArrows(raster, grid, tr, opts.arrowStride ?? 16);
  }
  return raster;
}

export function overlayVelocityArrows(
  raster: Raster,
  grid: VtkGrid,
  tr: Transform,
  stride: number
): void {
  const vel = grid.cellVectors.get("velocity");
  if (!vel) return;
  let vMax = 0;
  for (let c = 0; c < grid.nCells; c++) {
    vMax = Math.max(vMax, Math.hypot(vel[2 * c], vel[2 * c + 1]));
  }
  if (vMax === 0) return;
  const arrowPix = 3.2 * stride; // full-scale arrow length in pixels
  for (let c = 0; c < grid.nCells; c += stride) {
    const i0 = grid.triangles[3 * c];
    const i1 = grid.triangles[3 * c + 1];
    const i2 = grid.triangles[3 * c + 2];
    const bx = (grid.points[2 * i0] + grid.points[2 * i1] + grid.points[2 * i2]) / 3;
    const by = (grid.points[2 * i0 + 1] + grid.points[2 * i1 + 1] + grid.points[2 * i2 + 1]) / 3;
    const vx = vel[2 * c];
    const vy = vel[2 * c + 1];
    const mag = Math.hypot(vx, vy);
    if (mag < 1e-3 * vMax) continue;
    // darker means faster
    const shade = Math.round(200 * (1 - mag / vMax));
    const color: RGB = [shade, shade, shade];
    const x0 = tr.x(bx);
    const y0 = tr.y(by);
    const len = (arrowPix * mag) / vMax;
    const ux = (vx / mag) * len;
    const uy = (-vy / mag) * len; // raster y axis points down
    const x1 = x0 + ux;
    const y1 = y0 + uy;
    raster.line(x0, y0, x1, y1, color);
    // arrow head
    const hx = -0.3 * ux;
    const hy = -0.3 * uy;
    raster.line(x1, y1, x1 + hx - 0.5 * hy, y1 + hy + 0.5 * hx, color);
    raster.line(x1, y1, x1 + hx + 0.5 * hy, y1 + hy - 0.5 * hx, color);
  }
}

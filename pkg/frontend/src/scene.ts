/**
 * Pure scene math: turns shape JSON into renderable descriptors.
 *
 * Each part's extrinsic vector holds [center(3), eigvals(3), u1(3), u2(3),
 * u3(3), weight]. The displayed ellipsoid uses semi-axis j = sqrt(3 *
 * eigval_j) * rho, matching the analytic decoder's p=2 boundary; rho comes
 * from the intrinsic code through the fixed logistic mapping.
 */

import type { ShapeJson } from "./api";

export interface EllipsoidDescriptor {
  index: number;
  center: [number, number, number];
  radii: [number, number, number];
  /** Rotation matrix, columns = eigenvectors, row-major 9 floats. */
  rotation: number[];
  label?: number;
  selected: boolean;
}

const LABEL_COLORS: Record<number, string> = {
  1: "#4caf50", // leg
  2: "#2196f3", // seat
  3: "#9c27b0", // back
  4: "#ff9800", // top
};
const DEFAULT_COLOR = "#90a4ae";
const SELECTED_COLOR = "#f44336";

function sigmoid(x: number): number {
  return 1 / (1 + Math.exp(-x));
}

export function surfaceScale(intrinsic: number[]): number {
  return 0.5 + sigmoid(intrinsic[1] ?? 0);
}

export function partEllipsoids(
  shape: ShapeJson,
  selection: Set<number> = new Set(),
): EllipsoidDescriptor[] {
  return shape.extrinsics.map((e, i) => {
    if (e.length !== 16) throw new Error(`part ${i}: expected 16 extrinsics`);
    const rho = surfaceScale(shape.intrinsics[i] ?? []);
    const radii = [0, 1, 2].map(
      (j) => Math.sqrt(3 * Math.max(e[3 + j], 1e-8)) * rho,
    ) as [number, number, number];
    // stored as u1,u2,u3 triples; rotation matrix columns are u1,u2,u3
    const rotation = [
      e[6], e[9], e[12],
      e[7], e[10], e[13],
      e[8], e[11], e[14],
    ];
    return {
      index: i,
      center: [e[0], e[1], e[2]],
      radii,
      rotation,
      label: shape.labels?.[i],
      selected: selection.has(i),
    };
  });
}

export function partColor(d: EllipsoidDescriptor): string {
  if (d.selected) return SELECTED_COLOR;
  return (d.label !== undefined && LABEL_COLORS[d.label]) || DEFAULT_COLOR;
}

/** Deep equality of the geometry a renderer consumes, part by part. */
export function sameGeometry(
  a: EllipsoidDescriptor,
  b: EllipsoidDescriptor,
): boolean {
  return (
    a.center.every((v, i) => v === b.center[i]) &&
    a.radii.every((v, i) => v === b.radii[i]) &&
    a.rotation.every((v, i) => v === b.rotation[i])
  );
}

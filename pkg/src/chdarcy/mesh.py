"""Triangular meshes of rectangles with barycenter-orthogonal edge geometry.

Every form in this package reconstructs normal gradients from the two element
values adjacent to an edge divided by the barycenter distance. That is only
consistent if, for each interior edge, the segment joining the two barycenters
is orthogonal to the edge. ``build_crossed_mesh`` produces meshes satisfying
this by construction (rectangular cells split into four triangles through the
cell center, square cells required); ``validate_orthogonality`` certifies it
for any mesh, including imported ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    """Raised for topologically or geometrically invalid meshes."""


@dataclass(frozen=True)
class OrthogonalityCertificate:
    """Result of the barycenter-orthogonality check.

    ``worst_offset`` is max over interior edges of |(b_L - b_K) . t_e| / |b_L - b_K|,
    i.e. the sine of the angle between the barycenter segment and the edge normal.
    """

    passed: bool
    tol: float
    worst_edge: int  # -1 when the mesh has no interior edges
    worst_offset: float
    failing_edges: tuple[int, ...]


def _perp(v: np.ndarray) -> np.ndarray:
    """Rotate 2D vectors by -90 degrees: outward normal of a CCW-traversed edge."""
    out = np.empty_like(v)
    out[..., 0] = v[..., 1]
    out[..., 1] = -v[..., 0]
    return out


class Mesh:
    """Immutable triangulation with oriented interior-edge topology.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counterclockwise
    areas : (nt,) positive triangle areas
    barycenters : (nt, 2)
    iedge_verts : (nei, 2) vertex pairs of interior edges
    iedge_K, iedge_L : (nei,) adjacent elements; the unit normal points K -> L
    iedge_normal : (nei, 2) unit normal oriented from K into L
    iedge_length : (nei,)
    iedge_bary_dist : (nei,) distance between the adjacent barycenters
    bedge_verts, bedge_elem, bedge_normal, bedge_length : boundary edge data
    vertex_support_volume : (nv,) lumped P1 weights, sum of |K|/3 over incident K
    elem_edge_ids, elem_edge_signs : (nt, 3) per-element incidence; interior
        edges carry ids 0..nei-1, boundary edges nei..nei+neb-1; the sign is +1
        when the stored edge normal is outward for that element.
    """

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.asarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError(f"vertices must be (nv, 2), got {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError(f"triangles must be (nt, 3), got {triangles.shape}")
        if not np.isfinite(vertices).all():
            raise MeshError("non-finite vertex coordinates")
        nv = len(vertices)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= nv):
            raise MeshError("triangle vertex index out of range")

        p0 = vertices[triangles[:, 0]]
        p1 = vertices[triangles[:, 1]]
        p2 = vertices[triangles[:, 2]]
        e1, e2 = p1 - p0, p2 - p0
        signed = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        # normalize to counterclockwise orientation
        flip = signed < 0
        if flip.any():
            triangles = triangles.copy()
            triangles[flip, 1], triangles[flip, 2] = (
                triangles[flip, 2].copy(),
                triangles[flip, 1].copy(),
            )
            signed = np.abs(signed)
        areas = signed
        scale = np.abs(vertices).max() if nv else 1.0
        if triangles.size and areas.min() <= 1e-14 * max(scale, 1.0) ** 2:
            raise MeshError("degenerate triangle (zero area)")

        self.vertices = vertices
        self.triangles = triangles
        self.areas = areas
        self.barycenters = vertices[triangles].mean(axis=1)

        self._build_edges()
        omega = np.zeros(nv)
        np.add.at(omega, triangles.ravel(), np.repeat(areas / 3.0, 3))
        self.vertex_support_volume = omega

        for arr in (
            self.vertices, self.triangles, self.areas, self.barycenters,
            self.iedge_verts, self.iedge_K, self.iedge_L, self.iedge_normal,
            self.iedge_length, self.iedge_bary_dist,
            self.bedge_verts, self.bedge_elem, self.bedge_normal, self.bedge_length,
            self.vertex_support_volume, self.elem_edge_ids, self.elem_edge_signs,
        ):
            arr.flags.writeable = False

    def _build_edges(self) -> None:
        tris = self.triangles
        nt = len(tris)
        incident: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for t in range(nt):
            for loc in range(3):
                a, b = int(tris[t, loc]), int(tris[t, (loc + 1) % 3])
                incident.setdefault((min(a, b), max(a, b)), []).append((t, loc))

        iv, iK, iL = [], [], []
        bv, bK = [], []
        elem_edge_ids = np.full((nt, 3), -1, dtype=np.int64)
        elem_edge_signs = np.zeros((nt, 3), dtype=np.int64)
        ipos: list[tuple[int, int]] = []  # (L element, local edge in L)
        for pair in sorted(incident):
            elems = incident[pair]
            if len(elems) > 2:
                raise MeshError(f"edge {pair} shared by more than two triangles")
            (tk, lk) = elems[0]
            a, b = int(tris[tk, lk]), int(tris[tk, (lk + 1) % 3])
            if len(elems) == 2:
                (tl, ll) = elems[1]
                eid = len(iv)
                iv.append((a, b))
                iK.append(tk)
                iL.append(tl)
                elem_edge_ids[tk, lk] = eid
                elem_edge_signs[tk, lk] = 1
                elem_edge_ids[tl, ll] = eid
                elem_edge_signs[tl, ll] = -1
                ipos.append((tl, ll))
            else:
                bid = len(bv)
                bv.append((a, b))
                bK.append(tk)
                elem_edge_ids[tk, lk] = -(bid + 1)  # patched below
                elem_edge_signs[tk, lk] = 1

        nei = len(iv)
        boundary_mask = elem_edge_ids <= -1
        elem_edge_ids[boundary_mask] = nei + (-elem_edge_ids[boundary_mask] - 1)

        self.iedge_verts = np.asarray(iv, dtype=np.int64).reshape(nei, 2)
        self.iedge_K = np.asarray(iK, dtype=np.int64)
        self.iedge_L = np.asarray(iL, dtype=np.int64)
        self.bedge_verts = np.asarray(bv, dtype=np.int64).reshape(len(bv), 2)
        self.bedge_elem = np.asarray(bK, dtype=np.int64)
        self.elem_edge_ids = elem_edge_ids
        self.elem_edge_signs = elem_edge_signs

        verts = self.vertices
        tvec = verts[self.iedge_verts[:, 1]] - verts[self.iedge_verts[:, 0]]
        elen = np.linalg.norm(tvec, axis=1)
        self.iedge_length = elen
        self.iedge_normal = _perp(tvec) / elen[:, None] if nei else tvec.reshape(0, 2)

        dvec = self.barycenters[self.iedge_L] - self.barycenters[self.iedge_K]
        dist = np.linalg.norm(dvec, axis=1)
        if nei and dist.min() <= 0.0:
            raise MeshError("coincident barycenters across an interior edge")
        self.iedge_bary_dist = dist
        # barycenter of L lies on the far side of the edge, so K->L normal
        # must see it with positive component
        if nei and (np.einsum("ij,ij->i", dvec, self.iedge_normal) <= 0).any():
            raise MeshError("inconsistent edge orientation")

        btvec = verts[self.bedge_verts[:, 1]] - verts[self.bedge_verts[:, 0]]
        blen = np.linalg.norm(btvec, axis=1)
        self.bedge_length = blen
        self.bedge_normal = _perp(btvec) / blen[:, None] if len(bv) else btvec.reshape(0, 2)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_interior_edges(self) -> int:
        return len(self.iedge_K)

    @property
    def n_boundary_edges(self) -> int:
        return len(self.bedge_elem)

    @property
    def h(self) -> float:
        """Mesh size, reported as the maximum edge length."""
        parts = []
        if self.n_interior_edges:
            parts.append(self.iedge_length.max())
        if self.n_boundary_edges:
            parts.append(self.bedge_length.max())
        return float(max(parts)) if parts else 0.0

    @property
    def domain_area(self) -> float:
        return float(self.areas.sum())


def validate_orthogonality(mesh: Mesh, tol: float = 1e-10) -> OrthogonalityCertificate:
    """Check that barycenter segments are orthogonal to their interior edges.

    Passes iff |(b_L - b_K) . t_e| <= tol * |b_L - b_K| for every interior
    edge, with t_e the unit edge tangent. Never raises; failing edges are
    reported in the certificate.
    """
    if mesh.n_interior_edges == 0:
        return OrthogonalityCertificate(True, tol, -1, 0.0, ())
    verts = mesh.vertices
    tvec = verts[mesh.iedge_verts[:, 1]] - verts[mesh.iedge_verts[:, 0]]
    tvec = tvec / np.linalg.norm(tvec, axis=1)[:, None]
    dvec = mesh.barycenters[mesh.iedge_L] - mesh.barycenters[mesh.iedge_K]
    offset = np.abs(np.einsum("ij,ij->i", dvec, tvec)) / np.linalg.norm(dvec, axis=1)
    worst = int(np.argmax(offset))
    failing = tuple(int(e) for e in np.flatnonzero(offset > tol))
    return OrthogonalityCertificate(
        passed=not failing,
        tol=tol,
        worst_edge=worst,
        worst_offset=float(offset[worst]),
        failing_edges=failing,
    )


def build_crossed_mesh(
    nx: int, ny: int, domain: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)
) -> Mesh:
    """Build an nx-by-ny crossed mesh of the rectangle (x0, x1, y0, y1).

    Each cell is split into four triangles by both diagonals, adding a vertex
    at the cell center. The result is validated against the orthogonality
    certificate (crossed cells satisfy it exactly when cells are square).
    """
    if not (isinstance(nx, (int, np.integer)) and isinstance(ny, (int, np.integer))):
        raise MeshError("nx and ny must be integers")
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be >= 1")
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate rectangle")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    gx, gy = np.meshgrid(cx, cy)
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    vertices = np.vstack([grid, centers])

    def gid(i: int, j: int) -> int:
        return j * (nx + 1) + i

    ncorner = (nx + 1) * (ny + 1)
    tris = []
    for j in range(ny):
        for i in range(nx):
            c = ncorner + j * nx + i
            sw, se = gid(i, j), gid(i + 1, j)
            ne, nw = gid(i + 1, j + 1), gid(i, j + 1)
            tris += [(sw, se, c), (se, ne, c), (ne, nw, c), (nw, sw, c)]

    mesh = Mesh(vertices, np.asarray(tris))
    cert = validate_orthogonality(mesh)
    if not cert.passed:
        raise MeshError(
            "crossed mesh violates barycenter orthogonality "
            f"(worst edge {cert.worst_edge}, offset {cert.worst_offset:.3e}); "
            "crossed cells must be square: (x1-x0)/nx == (y1-y0)/ny"
        )
    return mesh


def edge_incidence(mesh: Mesh) -> list[list[tuple[int, int]]]:
    """Per-element list of (global edge id, sign of the stored normal).

    Interior edges use ids 0..nei-1 and sign +1 on the K side, -1 on the L
    side; boundary edges use ids nei.. and always sign +1 (outward normal).
    Signed sums of edge fluxes against these signs give element boundary
    integrals.
    """
    return [
        [(int(e), int(s)) for e, s in zip(mesh.elem_edge_ids[t], mesh.elem_edge_signs[t])]
        for t in range(mesh.n_triangles)
    ]


def save_mesh_text(mesh: Mesh, path: str) -> None:
    """Write the plain-text mesh format: header, vertex lines, triangle lines."""
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.n_vertices} triangles {mesh.n_triangles}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def load_mesh_text(path: str, tol: float = 1e-10) -> Mesh:
    """Load the plain-text mesh format and certify orthogonality.

    Raises MeshError if the file is malformed or the mesh fails the
    barycenter-orthogonality check (the bound-preservation mechanism needs it).
    """
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "vertices" or header[2] != "triangles":
            raise MeshError("mesh file header must be 'vertices N triangles M'")
        try:
            nv, nt = int(header[1]), int(header[3])
        except ValueError as exc:
            raise MeshError(f"bad mesh header counts: {exc}") from exc
        try:
            verts = np.array(
                [[float(w) for w in fh.readline().split()] for _ in range(nv)]
            ).reshape(nv, 2)
            tris = np.array(
                [[int(w) for w in fh.readline().split()] for _ in range(nt)]
            ).reshape(nt, 3)
        except ValueError as exc:
            raise MeshError(f"bad mesh file body: {exc}") from exc
    mesh = Mesh(verts, tris)
    cert = validate_orthogonality(mesh, tol=tol)
    if not cert.passed:
        raise MeshError(
            f"imported mesh violates barycenter orthogonality on "
            f"{len(cert.failing_edges)} edges (worst offset {cert.worst_offset:.3e})"
        )
    return mesh

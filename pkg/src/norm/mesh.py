"""Simplicial meshes and first-order finite element operators.

A :class:`Mesh` is a vertex table plus a cell table of a single kind,
triangles (surfaces in R^2 or R^3) or tetrahedra (volumes in R^3). On top of
it this module builds the two matrices every spectral computation needs:

* :func:`cotangent_stiffness` -- the symmetric positive semi-definite
  stiffness matrix. For triangles the classical cotangent weights are used,
  for tetrahedra the equivalent piecewise-linear FEM form assembled from
  gradients of the barycentric coordinates.
* :func:`lumped_mass` -- the diagonal mass matrix that distributes each
  cell's measure equally to its vertices.

File I/O covers OFF, OBJ (triangles) and a small JSON container (MSHJSON)
that also handles tetrahedra. Generators for structured unit-square meshes,
uniform refinement, and boundary extraction round out the module.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import (
    DegenerateCell,
    DimensionMismatch,
    IndexOutOfRange,
    ParseError,
    UnsupportedCellKind,
)

logger = logging.getLogger(__name__)

# Cells below these measures are treated as collapsed.
TRI_AREA_TOL = 1e-12
TET_VOL_TOL = 1e-14

_VERTS_PER_CELL = {"tri": 3, "tet": 4}


@dataclass(eq=False)
class Mesh:
    """Simplicial mesh of a single cell kind.

    Parameters
    ----------
    vertices : ndarray of shape (n_x, d)
        Vertex coordinates, d in {2, 3}. Stored as float64.
    cells : ndarray of shape (n_c, k)
        Vertex indices per cell, k = 3 for ``tri`` and 4 for ``tet``.
    cell_kind : str
        Either ``"tri"`` or ``"tet"``.

    Raises
    ------
    UnsupportedCellKind
        If ``cell_kind`` is not recognised or the cell table width does not
        match it.
    IndexOutOfRange
        If a cell references a vertex outside the table.
    DegenerateCell
        If any cell has measure below tolerance.
    DimensionMismatch
        If the coordinate dimension is unusable (tets need d = 3).
    """

    vertices: np.ndarray
    cells: np.ndarray
    cell_kind: str
    _measures: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        if self.cell_kind not in _VERTS_PER_CELL:
            raise UnsupportedCellKind(f"unknown cell kind {self.cell_kind!r}")
        k = _VERTS_PER_CELL[self.cell_kind]
        if self.vertices.ndim != 2 or self.vertices.shape[1] not in (2, 3):
            raise DimensionMismatch(
                f"vertices must be (n, 2) or (n, 3), got {self.vertices.shape}"
            )
        if self.cells.ndim != 2 or self.cells.shape[1] != k:
            raise UnsupportedCellKind(
                f"{self.cell_kind} cells need {k} vertices per row, "
                f"got table of shape {self.cells.shape}"
            )
        if self.cell_kind == "tet" and self.vertices.shape[1] != 3:
            raise DimensionMismatch("tet meshes need 3-D vertex coordinates")
        if not np.isfinite(self.vertices).all():
            raise ParseError("vertex coordinates contain non-finite values")
        if self.cells.size and (
            self.cells.min() < 0 or self.cells.max() >= self.n_vertices
        ):
            bad = int(self.cells.max() if self.cells.max() >= self.n_vertices
                      else self.cells.min())
            raise IndexOutOfRange(
                f"cell references vertex {bad}, table has {self.n_vertices}"
            )
        self._measures = _cell_measures(self.vertices, self.cells, self.cell_kind)
        tol = TRI_AREA_TOL if self.cell_kind == "tri" else TET_VOL_TOL
        if self.cells.size and self._measures.min() < tol:
            idx = int(np.argmin(self._measures))
            raise DegenerateCell(
                f"cell {idx} has measure {self._measures[idx]:.3e} < {tol:.0e}"
            )
        _warn_duplicate_vertices(self.vertices)

    # -- basic queries ------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    def cell_measures(self) -> np.ndarray:
        """Per-cell area (tri) or volume (tet)."""
        return self._measures.copy()

    def total_measure(self) -> float:
        return float(self._measures.sum())

    def content_hash(self) -> str:
        """SHA-256 of kind + coordinates + connectivity, hex encoded.

        Byte layout is fixed (little-endian float64/int64), so the hash is
        platform independent and identifies the discrete domain.
        """
        h = hashlib.sha256()
        h.update(self.cell_kind.encode())
        h.update(np.int64(self.dim).tobytes())
        h.update(self.vertices.astype("<f8").tobytes())
        h.update(self.cells.astype("<i8").tobytes())
        return h.hexdigest()

    def describe(self) -> dict:
        """Summary used by the CLI ``mesh info`` command."""
        lo = self.vertices.min(axis=0).tolist()
        hi = self.vertices.max(axis=0).tolist()
        return {
            "cell_kind": self.cell_kind,
            "dim": self.dim,
            "n_vertices": self.n_vertices,
            "n_cells": self.n_cells,
            "bbox_min": lo,
            "bbox_max": hi,
            "total_measure": self.total_measure(),
            "min_cell_measure": float(self._measures.min()),
            "max_cell_measure": float(self._measures.max()),
            "n_boundary_nodes": int(boundary_nodes(self).size),
            "content_hash": self.content_hash(),
        }


def _cell_measures(vertices, cells, cell_kind):
    if cells.shape[0] == 0:
        return np.zeros(0)
    pts = vertices[cells]
    if cell_kind == "tri":
        p = pts if vertices.shape[1] == 3 else np.concatenate(
            [pts, np.zeros(pts.shape[:2] + (1,))], axis=2
        )
        cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return 0.5 * np.linalg.norm(cr, axis=1)
    d = pts[:, 1:] - pts[:, :1]
    return np.abs(np.linalg.det(d)) / 6.0


def _warn_duplicate_vertices(vertices):
    # Exact-bucket check at coordinate tolerance 1e-12; advisory only.
    key = np.round(vertices / 1e-12).astype(np.int64)
    uniq = np.unique(key, axis=0)
    if uniq.shape[0] < vertices.shape[0]:
        warnings.warn(
            f"{vertices.shape[0] - uniq.shape[0]} vertex position(s) coincide "
            "within 1e-12",
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_mesh(path) -> Mesh:
    """Read a mesh, dispatching on file extension.

    ``.off`` and ``.obj`` hold triangle surfaces; ``.json`` holds the MSHJSON
    container (triangles or tetrahedra).
    """
    path = str(path)
    low = path.lower()
    if low.endswith(".off"):
        return _read_off(path)
    if low.endswith(".obj"):
        return _read_obj(path)
    if low.endswith(".json"):
        return _read_mshjson(path)
    raise ParseError(f"unrecognised mesh extension: {path}")


def save_mesh(mesh: Mesh, path) -> None:
    """Write a mesh, dispatching on file extension (.off, .obj, .json)."""
    path = str(path)
    low = path.lower()
    if low.endswith(".off"):
        _write_off(mesh, path)
    elif low.endswith(".obj"):
        _write_obj(mesh, path)
    elif low.endswith(".json"):
        _write_mshjson(mesh, path)
    else:
        raise ParseError(f"unrecognised mesh extension: {path}")


def _data_lines(path):
    with open(path, "r") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield ln, line


def _read_off(path) -> Mesh:
    lines = _data_lines(path)
    try:
        ln, header = next(lines)
    except StopIteration:
        raise ParseError(f"{path}: empty file") from None
    if header != "OFF":
        raise ParseError(f"{path}:{ln}: expected OFF header, got {header!r}")
    try:
        ln, counts = next(lines)
        nv, nf = [int(t) for t in counts.split()[:2]]
    except (StopIteration, ValueError):
        raise ParseError(f"{path}: missing or malformed count line") from None
    verts = np.zeros((nv, 3))
    for i in range(nv):
        try:
            ln, line = next(lines)
            verts[i] = [float(t) for t in line.split()[:3]]
        except (StopIteration, ValueError):
            raise ParseError(f"{path}: bad vertex line {i}") from None
    faces = np.zeros((nf, 3), dtype=np.int64)
    for i in range(nf):
        try:
            ln, line = next(lines)
            toks = line.split()
            k = int(toks[0])
        except (StopIteration, ValueError, IndexError):
            raise ParseError(f"{path}: bad face line {i}") from None
        if k != 3:
            raise UnsupportedCellKind(
                f"{path}:{ln}: face with {k} vertices; only triangles are read"
            )
        faces[i] = [int(t) for t in toks[1:4]]
    return Mesh(_squeeze_zero_z(verts), faces, "tri")


def _squeeze_zero_z(verts: np.ndarray) -> np.ndarray:
    # OFF/OBJ are 3-D formats; planar meshes written with z = 0 come back
    # as the 2-D meshes they were, keeping content hashes stable.
    if verts.shape[1] == 3 and not verts[:, 2].any():
        return verts[:, :2]
    return verts


def _write_off(mesh: Mesh, path) -> None:
    if mesh.cell_kind != "tri":
        raise UnsupportedCellKind("OFF stores triangle surfaces only")
    v = mesh.vertices
    if v.shape[1] == 2:
        v = np.column_stack([v, np.zeros(len(v))])
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_cells} 0\n")
        for p in v:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        for c in mesh.cells:
            fh.write(f"3 {int(c[0])} {int(c[1])} {int(c[2])}\n")


def _read_obj(path) -> Mesh:
    verts, faces = [], []
    for ln, line in _data_lines(path):
        toks = line.split()
        if toks[0] == "v":
            try:
                verts.append([float(t) for t in toks[1:4]])
            except ValueError:
                raise ParseError(f"{path}:{ln}: bad vertex") from None
        elif toks[0] == "f":
            refs = toks[1:]
            if len(refs) != 3:
                raise UnsupportedCellKind(
                    f"{path}:{ln}: face with {len(refs)} vertices; "
                    "only triangles are read"
                )
            try:
                idx = [int(r.split("/")[0]) for r in refs]
            except ValueError:
                raise ParseError(f"{path}:{ln}: bad face reference") from None
            if min(idx) < 1:
                raise ParseError(f"{path}:{ln}: face indices must be positive")
            faces.append([i - 1 for i in idx])
        # vt / vn / usemtl and friends are ignored.
    if not verts:
        raise ParseError(f"{path}: no vertices")
    return Mesh(_squeeze_zero_z(np.asarray(verts)),
                np.asarray(faces, dtype=np.int64), "tri")


def _write_obj(mesh: Mesh, path) -> None:
    if mesh.cell_kind != "tri":
        raise UnsupportedCellKind("OBJ stores triangle surfaces only")
    v = mesh.vertices
    if v.shape[1] == 2:
        v = np.column_stack([v, np.zeros(len(v))])
    with open(path, "w") as fh:
        for p in v:
            fh.write(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        for c in mesh.cells:
            fh.write(f"f {int(c[0]) + 1} {int(c[1]) + 1} {int(c[2]) + 1}\n")


def _read_mshjson(path) -> Mesh:
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from None
    for key in ("dim", "cell_kind", "vertices", "cells"):
        if key not in doc:
            raise ParseError(f"{path}: missing key {key!r}")
    kind = doc["cell_kind"]
    if kind not in _VERTS_PER_CELL:
        raise UnsupportedCellKind(f"{path}: cell_kind {kind!r}")
    verts = np.asarray(doc["vertices"], dtype=np.float64)
    cells = np.asarray(doc["cells"], dtype=np.int64)
    if verts.ndim != 2 or verts.shape[1] != int(doc["dim"]):
        raise ParseError(
            f"{path}: vertices shape {verts.shape} does not match dim {doc['dim']}"
        )
    return Mesh(verts, cells, kind)


def _write_mshjson(mesh: Mesh, path) -> None:
    doc = {
        "dim": mesh.dim,
        "cell_kind": mesh.cell_kind,
        "vertices": mesh.vertices.tolist(),
        "cells": mesh.cells.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def grid_mesh(n: int) -> Mesh:
    """Structured unit-square triangulation with (n+1)^2 vertices.

    Each of the n^2 squares is split along the same diagonal into two
    right triangles, oriented counter-clockwise.
    """
    if n < 1:
        raise ValueError("grid needs n >= 1")
    axis = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(axis, axis)  # index [iy, ix]
    verts = np.column_stack([xx.ravel(), yy.ravel()])
    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    a = (iy * (n + 1) + ix).ravel()
    b = a + 1
    c = a + n + 2
    d = a + n + 1
    tris = np.concatenate(
        [np.column_stack([a, b, c]), np.column_stack([a, c, d])]
    )
    return Mesh(verts, tris, "tri")


def notch_mesh(n: int) -> Mesh:
    """Unit square with an interior vertical slit, one element layer wide.

    Starting from :func:`grid_mesh`, the column of squares with
    x in [0.4, 0.4 + 1/n] and y spanning [0.3, 0.7] (slit ends snapped to
    the grid) is removed, which leaves a thin rectangular hole.
    """
    if n < 10:
        raise ValueError("notch needs n >= 10 so the slit stays interior")
    base = grid_mesh(n)
    h = 1.0 / n
    ix_slit = int(np.rint(0.4 * n))
    iy0 = int(np.rint(0.3 * n))
    iy1 = int(np.rint(0.7 * n))
    cent = base.vertices[base.cells].mean(axis=1)
    cx, cy = cent[:, 0], cent[:, 1]
    inside = (
        (cx > ix_slit * h) & (cx < (ix_slit + 1) * h)
        & (cy > iy0 * h) & (cy < iy1 * h)
    )
    cells = base.cells[~inside]
    used = np.unique(cells)
    remap = -np.ones(base.n_vertices, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return Mesh(base.vertices[used], remap[cells], "tri")


def refine(mesh: Mesh) -> Mesh:
    """Uniform refinement: each triangle splits into 4 via edge midpoints.

    Parent vertices keep their indices; midpoints are appended in the order
    of the sorted unique edge list, so the result is deterministic. Total
    area is conserved (children of a flat triangle tile it exactly).
    """
    if mesh.cell_kind != "tri":
        raise UnsupportedCellKind("refine handles triangle meshes")
    t = mesh.cells
    edges = np.sort(
        np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [0, 2]]]), axis=1
    )
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    m01, m12, m02 = np.split(mesh.n_vertices + inv, 3)
    children = np.concatenate([
        np.column_stack([t[:, 0], m01, m02]),
        np.column_stack([t[:, 1], m12, m01]),
        np.column_stack([t[:, 2], m02, m12]),
        np.column_stack([m01, m12, m02]),
    ])
    return Mesh(np.concatenate([mesh.vertices, mids]), children, "tri")


def prolongate(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """P1-interpolate nodal values from ``mesh`` onto ``refine(mesh)``.

    Parent nodes keep their values; each midpoint gets the mean of its edge
    endpoints, matching the vertex ordering :func:`refine` produces. Linear
    fields interpolate exactly. ``values`` is (n_x,) or (n_x, d_c); batches
    (N, n_x, d_c) are handled along the second axis.
    """
    if mesh.cell_kind != "tri":
        raise UnsupportedCellKind("prolongate handles triangle meshes")
    values = np.asarray(values, dtype=np.float64)
    axis = values.ndim - 2 if values.ndim >= 2 else 0
    if values.shape[axis] != mesh.n_vertices:
        raise DimensionMismatch(
            f"values have {values.shape[axis]} nodes, mesh has "
            f"{mesh.n_vertices}"
        )
    t = mesh.cells
    edges = np.sort(
        np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [0, 2]]]), axis=1
    )
    uniq = np.unique(edges, axis=0)
    coarse = np.moveaxis(values, axis, 0)
    mids = 0.5 * (coarse[uniq[:, 0]] + coarse[uniq[:, 1]])
    return np.moveaxis(np.concatenate([coarse, mids], axis=0), 0, axis)


# ---------------------------------------------------------------------------
# FEM operators
# ---------------------------------------------------------------------------

def cotangent_stiffness(mesh: Mesh, cell_weights=None) -> sparse.csr_matrix:
    """Symmetric PSD stiffness matrix of the piecewise-linear Laplacian.

    Triangles use the cotangent weights: the off-diagonal entry for edge
    (i, j) is -1/2 the sum of the cotangents of the two (one, on a boundary
    edge) angles opposite it, and each diagonal entry makes its row sum to
    zero. Tetrahedra assemble the identical bilinear form from gradients of
    the barycentric coordinates, element by element.

    Parameters
    ----------
    mesh : Mesh
    cell_weights : ndarray (n_cells,), optional
        Per-cell scale of the element contribution, e.g. an elementwise
        diffusion coefficient. Defaults to ones.

    Returns
    -------
    scipy.sparse.csr_matrix of shape (n_x, n_x)
        Constant functions lie in the kernel; x^T S x >= 0 for all x when
        the weights are non-negative.
    """
    if cell_weights is not None:
        cell_weights = np.asarray(cell_weights, dtype=np.float64)
        if cell_weights.shape != (mesh.n_cells,):
            raise DimensionMismatch(
                f"cell_weights must have shape ({mesh.n_cells},), "
                f"got {cell_weights.shape}"
            )
    if mesh.cell_kind == "tri":
        return _tri_stiffness(mesh, cell_weights)
    return _tet_stiffness(mesh, cell_weights)


def _tri_stiffness(mesh: Mesh, cell_weights=None) -> sparse.csr_matrix:
    n = mesh.n_vertices
    pts = mesh.vertices[mesh.cells]
    if mesh.dim == 2:
        pts = np.concatenate([pts, np.zeros(pts.shape[:2] + (1,))], axis=2)
    i0, i1, i2 = mesh.cells[:, 0], mesh.cells[:, 1], mesh.cells[:, 2]
    p0, p1, p2 = pts[:, 0], pts[:, 1], pts[:, 2]

    def cot(a, b):
        # cotangent of the angle between edge vectors a and b
        cr = np.linalg.norm(np.cross(a, b), axis=1)
        return np.einsum("ij,ij->i", a, b) / cr

    c0 = cot(p1 - p0, p2 - p0)  # angle at vertex 0, opposite edge (1,2)
    c1 = cot(p0 - p1, p2 - p1)
    c2 = cot(p0 - p2, p1 - p2)
    if cell_weights is not None:
        c0, c1, c2 = c0 * cell_weights, c1 * cell_weights, c2 * cell_weights
    w = 0.5 * np.concatenate([c0, c1, c2])
    rows = np.concatenate([i1, i0, i0])
    cols = np.concatenate([i2, i2, i1])
    off = sparse.coo_matrix((-w, (rows, cols)), shape=(n, n))
    off = off + off.T
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sparse.diags(diag)).tocsr()


def _tet_stiffness(mesh: Mesh, cell_weights=None) -> sparse.csr_matrix:
    n = mesh.n_vertices
    pts = mesh.vertices[mesh.cells]
    d = pts[:, 1:] - pts[:, :1]                      # (m, 3, 3), rows v_i - v_0
    vol = np.abs(np.linalg.det(d)) / 6.0
    if cell_weights is not None:
        vol = vol * cell_weights
    grads123 = np.linalg.inv(d).transpose(0, 2, 1)   # rows are grad lambda_i
    grad0 = -grads123.sum(axis=1, keepdims=True)
    g = np.concatenate([grad0, grads123], axis=1)    # (m, 4, 3)
    ke = np.einsum("mad,mbd,m->mab", g, g, vol)      # (m, 4, 4)
    rows = np.repeat(mesh.cells, 4, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, 4)).ravel()
    s = sparse.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n))
    return s.tocsr()


def lumped_mass(mesh: Mesh) -> sparse.csr_matrix:
    """Diagonal mass matrix: each cell sends measure/k to its k vertices.

    The trace equals the total mesh measure and every diagonal entry of a
    valid mesh is strictly positive (isolated vertices would make the matrix
    singular, and the eigensolver requires positive definiteness).
    """
    k = _VERTS_PER_CELL[mesh.cell_kind]
    diag = np.zeros(mesh.n_vertices)
    np.add.at(diag, mesh.cells.ravel(), np.repeat(mesh._measures / k, k))
    if diag.min() <= 0.0:
        idx = int(np.argmin(diag))
        raise DegenerateCell(f"vertex {idx} has no incident cell")
    return sparse.diags(diag).tocsr()


def dirichlet_energy(stiffness: sparse.spmatrix, values: np.ndarray):
    """Quadratic form f^T S f, per channel.

    Parameters
    ----------
    stiffness : sparse matrix (n_x, n_x)
    values : ndarray (n_x,) or (n_x, d_c)

    Returns
    -------
    float or ndarray (d_c,)
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != stiffness.shape[0]:
        raise DimensionMismatch(
            f"field has {values.shape[0]} rows, matrix is {stiffness.shape[0]}"
        )
    e = np.einsum("i...,i...->...", values, stiffness @ values)
    return float(e) if values.ndim == 1 else np.asarray(e)


# ---------------------------------------------------------------------------
# boundary
# ---------------------------------------------------------------------------

def boundary_edges(mesh: Mesh) -> np.ndarray:
    """Edges (tri) or faces (tet) that belong to exactly one cell."""
    t = mesh.cells
    if mesh.cell_kind == "tri":
        sides = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    else:
        sides = np.concatenate(
            [t[:, [0, 1, 2]], t[:, [0, 1, 3]], t[:, [0, 2, 3]], t[:, [1, 2, 3]]]
        )
    key = np.sort(sides, axis=1)
    uniq, counts = np.unique(key, axis=0, return_counts=True)
    return uniq[counts == 1]


def boundary_nodes(mesh: Mesh) -> np.ndarray:
    """Sorted indices of vertices on the boundary (empty if closed)."""
    be = boundary_edges(mesh)
    return np.unique(be) if be.size else np.zeros(0, dtype=np.int64)


def boundary_loops(mesh: Mesh) -> list[np.ndarray]:
    """Closed boundary loops of a triangle mesh, each an ordered node array.

    Each loop starts at its smallest vertex index and walks toward the
    smaller-indexed of that vertex's two boundary neighbours, so the output
    is deterministic. Loops are sorted by their starting index.
    """
    if mesh.cell_kind != "tri":
        raise UnsupportedCellKind("boundary loops are defined for triangle meshes")
    be = boundary_edges(mesh)
    nbr: dict[int, list[int]] = {}
    for a, b in be:
        nbr.setdefault(int(a), []).append(int(b))
        nbr.setdefault(int(b), []).append(int(a))
    for v, ns in nbr.items():
        if len(ns) != 2:
            raise ValueError(
                f"boundary is not a union of simple loops at vertex {v}"
            )
    loops = []
    seen: set[int] = set()
    for start in sorted(nbr):
        if start in seen:
            continue
        prev, cur = start, min(nbr[start])
        loop = [start]
        while cur != start:
            loop.append(cur)
            a, b = nbr[cur]
            prev, cur = cur, (b if a == prev else a)
        seen.update(loop)
        loops.append(np.asarray(loop, dtype=np.int64))
    return loops

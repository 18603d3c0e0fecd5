"""Legacy ASCII VTK export of nodal fields for external viewers."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, UnsupportedCellKind
from .mesh import Mesh

# legacy VTK cell type codes
_CELL_TYPE = {"tri": 5, "tet": 10}


def export_vtk(mesh: Mesh, values: np.ndarray, path,
               field_name: str = "field") -> None:
    """Write an unstructured grid with point data.

    ``values`` is (n_x,) or (n_x, d_c). Three channels are written as one
    VECTORS block; any other width becomes one SCALARS block per channel.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2 or values.shape[0] != mesh.n_vertices:
        raise DimensionMismatch(
            f"field shape {values.shape} does not fit a mesh with "
            f"{mesh.n_vertices} vertices"
        )
    if mesh.cell_kind not in _CELL_TYPE:
        raise UnsupportedCellKind(mesh.cell_kind)
    pts = mesh.vertices
    if pts.shape[1] == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    k = mesh.cells.shape[1]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{field_name}\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for p in pts:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        fh.write(f"CELLS {mesh.n_cells} {mesh.n_cells * (k + 1)}\n")
        for c in mesh.cells:
            fh.write(f"{k} " + " ".join(str(int(i)) for i in c) + "\n")
        fh.write(f"CELL_TYPES {mesh.n_cells}\n")
        code = _CELL_TYPE[mesh.cell_kind]
        for _ in range(mesh.n_cells):
            fh.write(f"{code}\n")
        fh.write(f"POINT_DATA {mesh.n_vertices}\n")
        if values.shape[1] == 3:
            fh.write(f"VECTORS {field_name} double\n")
            for row in values:
                fh.write(f"{float(row[0])!r} {float(row[1])!r} {float(row[2])!r}\n")
        else:
            for ch in range(values.shape[1]):
                name = field_name if values.shape[1] == 1 else f"{field_name}_{ch}"
                fh.write(f"SCALARS {name} double 1\n")
                fh.write("LOOKUP_TABLE default\n")
                for v in values[:, ch]:
                    fh.write(f"{float(v)!r}\n")

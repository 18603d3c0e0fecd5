"""Synthetic PDE datasets: Darcy flow and the heat semigroup.

Inputs are Gaussian random fields drawn by Karhunen-Loeve expansion in a
Laplace-Beltrami basis: coefficient i is a standard normal scaled by
``(lambda_i + shift)^(-power/2)``, i.e. samples of a field with covariance
``(-Laplacian + shift)^(-power)``.

The Darcy generator thresholds such a field into a two-valued conductivity,
solves ``-div(a grad u) = f`` with Dirichlet data by direct sparse
factorization, and records (a, u) pairs. The heat generator applies the
exact discrete semigroup ``exp(-t Laplacian)`` in a full eigenbasis, which
doubles as an independent oracle for trained operators.

Every sample draws from its own generator seeded by ``seed XOR i``, so any
prefix of a dataset is reproducible regardless of batch layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse.linalg import splu

from .errors import (
    BoundaryNotFound,
    DimensionMismatch,
    InvalidModeCount,
    NonPositiveCoefficient,
    ParseError,
    SingularSystem,
)
from .mesh import Mesh, boundary_loops, cotangent_stiffness, lumped_mass
from .spectral import SpectralBasis, lbo_basis

__all__ = [
    "GrfSpec",
    "BoundaryCondition",
    "Dataset",
    "grf_sample",
    "threshold_coefficient",
    "darcy_solve",
    "notch_boundary_conditions",
    "make_darcy_dataset",
    "heat_semigroup_target",
    "make_heat_dataset",
    "save_dataset",
    "load_dataset",
]

_NDS_MAGIC = b"NORMDS1\x00"


@dataclass
class GrfSpec:
    """Karhunen-Loeve sampling parameters: covariance (-Lap + shift)^(-power)."""

    d_m: int
    shift: float = 25.0
    power: float = 2.0


@dataclass
class BoundaryCondition:
    """Dirichlet data: node indices and the values pinned there."""

    nodes: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.nodes.shape != self.values.shape:
            raise DimensionMismatch("boundary nodes and values differ in length")


@dataclass(eq=False)
class Dataset:
    """Stacked input/output fields with a fixed train/test split.

    ``inputs`` has shape (N, n_in, d_a) and ``outputs`` (N, n_out, d_u); the
    two node counts may differ (cross-domain problems). ``split`` maps
    "train"/"test" to index arrays; ``provenance`` records how the data was
    made (never timestamps, so regeneration is byte-identical).
    """

    inputs: np.ndarray
    outputs: np.ndarray
    input_domain_id: str
    output_domain_id: str
    split: dict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.outputs = np.ascontiguousarray(self.outputs, dtype=np.float64)
        if self.inputs.ndim != 3 or self.outputs.ndim != 3:
            raise DimensionMismatch("dataset arrays must be (N, n_x, d_c)")
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise DimensionMismatch("inputs and outputs disagree on N")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]


def _default_split(n: int) -> dict:
    n_train = (5 * n) // 6
    return {
        "train": np.arange(n_train, dtype=np.int64),
        "test": np.arange(n_train, n, dtype=np.int64),
    }


# ---------------------------------------------------------------------------
# Gaussian random fields
# ---------------------------------------------------------------------------

def grf_sample(basis: SpectralBasis, spec: GrfSpec, rng: np.random.Generator
               ) -> np.ndarray:
    """One field sampled by KL expansion in the leading spec.d_m modes."""
    if not 1 <= spec.d_m <= basis.d_m:
        raise InvalidModeCount(
            f"GRF wants {spec.d_m} modes, basis has {basis.d_m}"
        )
    lam = basis.eigenvalues[: spec.d_m]
    std = (lam + spec.shift) ** (-spec.power / 2.0)
    xi = rng.standard_normal(spec.d_m)
    return basis.modes[:, : spec.d_m] @ (std * xi)


def threshold_coefficient(mu: np.ndarray, low: float = 4.0,
                          high: float = 12.0,
                          threshold: float = 0.0) -> np.ndarray:
    """Two-valued conductivity: high where mu >= threshold, low elsewhere."""
    if min(low, high) <= 0.0:
        raise NonPositiveCoefficient(
            f"conductivity values must be positive, got {low} and {high}"
        )
    mu = np.asarray(mu, dtype=np.float64)
    return np.where(mu >= threshold, high, low)


# ---------------------------------------------------------------------------
# Darcy flow
# ---------------------------------------------------------------------------

def darcy_solve(mesh: Mesh, coeff: np.ndarray, source,
                bc: BoundaryCondition) -> np.ndarray:
    """Solve -div(a grad u) = f with Dirichlet data, piecewise-linear FEM.

    The nodal coefficient is averaged per cell, the weighted stiffness is
    assembled, the load uses the lumped mass (f constant or nodal), and the
    reduced interior system goes through a direct sparse LU. The interior
    residual is checked to 1e-10 relative.

    Raises
    ------
    NonPositiveCoefficient
        If the coefficient is not strictly positive everywhere.
    BoundaryNotFound
        If no Dirichlet nodes are given.
    SingularSystem
        If the factorization fails or the residual check does not pass.
    """
    coeff = np.asarray(coeff, dtype=np.float64).reshape(-1)
    if coeff.shape[0] != mesh.n_vertices:
        raise DimensionMismatch(
            f"coefficient has {coeff.shape[0]} entries, mesh has "
            f"{mesh.n_vertices} vertices"
        )
    if coeff.min() <= 0.0:
        raise NonPositiveCoefficient(
            f"coefficient min is {coeff.min():.3e}; must be > 0"
        )
    if bc is None or bc.nodes.size == 0:
        raise BoundaryNotFound("Dirichlet data required, none given")

    cell_coeff = coeff[mesh.cells].mean(axis=1)
    K = cotangent_stiffness(mesh, cell_weights=cell_coeff).tocsr()
    mdiag = lumped_mass(mesh).diagonal()
    f = np.asarray(source, dtype=np.float64)
    rhs_full = mdiag * f if f.ndim else mdiag * float(f)

    n = mesh.n_vertices
    fixed = np.zeros(n, dtype=bool)
    fixed[bc.nodes] = True
    free = np.nonzero(~fixed)[0]
    u = np.zeros(n)
    u[bc.nodes] = bc.values
    rhs = rhs_full[free] - K[free][:, bc.nodes] @ bc.values
    K_ff = K[free][:, free].tocsc()
    try:
        u_free = splu(K_ff).solve(rhs)
    except RuntimeError as exc:
        raise SingularSystem(f"sparse factorization failed: {exc}") from None
    resid = np.linalg.norm(K_ff @ u_free - rhs)
    scale = max(np.linalg.norm(rhs), 1e-300)
    if resid > 1e-10 * scale:
        raise SingularSystem(
            f"solve residual {resid / scale:.3e} exceeds 1e-10 relative"
        )
    u[free] = u_free
    return u


def notch_boundary_conditions(mesh: Mesh) -> BoundaryCondition:
    """Dirichlet data for slit problems: sine profile outside, zero on holes.

    The outer loop (largest bounding box) carries u = 0.1 sin(2 pi s), with
    s the normalized arclength starting at the node nearest the origin and
    walking toward increasing x; every other loop (hole rims) is pinned to
    zero.
    """
    loops = boundary_loops(mesh)
    if not loops:
        raise BoundaryNotFound("mesh has no boundary")

    def extent(loop):
        pts = mesh.vertices[loop]
        return float((pts.max(axis=0) - pts.min(axis=0)).sum())

    outer_idx = int(np.argmax([extent(lp) for lp in loops]))
    nodes_all, values_all = [], []
    for li, loop in enumerate(loops):
        if li != outer_idx:
            nodes_all.append(loop)
            values_all.append(np.zeros(loop.size))
            continue
        pts = mesh.vertices[loop]
        start = int(np.argmin((pts[:, :2] ** 2).sum(axis=1)))
        loop = np.roll(loop, -start)
        pts = mesh.vertices[loop]
        if pts[1, 0] <= pts[-1, 0]:  # walk along increasing x first
            loop = np.roll(loop[::-1], 1)
            pts = mesh.vertices[loop]
        seg = np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)
        total = seg.sum()
        s = np.concatenate([[0.0], np.cumsum(seg[:-1])]) / total
        nodes_all.append(loop)
        values_all.append(0.1 * np.sin(2.0 * np.pi * s))
    return BoundaryCondition(
        nodes=np.concatenate(nodes_all),
        values=np.concatenate(values_all),
    )


def make_darcy_dataset(
    mesh: Mesh,
    grf_basis: SpectralBasis,
    n_samples: int,
    seed: int,
    bc: Optional[BoundaryCondition] = None,
    grf: Optional[GrfSpec] = None,
    source: float = 1.0,
) -> Dataset:
    """(conductivity, head) pairs on one mesh.

    Each sample i draws its Gaussian field from a fresh generator seeded
    ``seed XOR i``, thresholds it into the two-valued conductivity, and
    solves the Darcy problem with unit source. Split is 5:1 by index order.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    bc_tag = "default-notch" if bc is None else "explicit"
    if bc is None:
        bc = notch_boundary_conditions(mesh)
    if grf is None:
        grf = GrfSpec(d_m=grf_basis.d_m, shift=25.0, power=2.0)
    n = mesh.n_vertices
    inputs = np.zeros((n_samples, n, 1))
    outputs = np.zeros((n_samples, n, 1))
    for i in range(n_samples):
        rng = np.random.default_rng(seed ^ i)
        mu = grf_sample(grf_basis, grf, rng)
        a = threshold_coefficient(mu)
        inputs[i, :, 0] = a
        outputs[i, :, 0] = darcy_solve(mesh, a, source, bc)
    mesh_id = mesh.content_hash()
    return Dataset(
        inputs=inputs,
        outputs=outputs,
        input_domain_id=mesh_id,
        output_domain_id=mesh_id,
        split=_default_split(n_samples),
        provenance={
            "generator": "darcy",
            "format_version": 1,
            "seed": seed,
            "n_samples": n_samples,
            "mesh": mesh_id,
            "grf": {"d_m": grf.d_m, "shift": grf.shift, "power": grf.power},
            "source": source,
            "bc": bc_tag,
        },
    )


# ---------------------------------------------------------------------------
# heat semigroup
# ---------------------------------------------------------------------------

def heat_semigroup_target(basis: SpectralBasis, values: np.ndarray,
                          t: float) -> np.ndarray:
    """Apply exp(-t Laplacian) spectrally: damp each coefficient by e^{-t l}."""
    if t < 0.0:
        raise ValueError("diffusion time must be non-negative")
    coeffs = basis.encode(values)
    damp = np.exp(-t * basis.eigenvalues)
    return basis.decode(damp[:, None] * coeffs if coeffs.ndim == 2
                        else damp * coeffs)


def make_heat_dataset(
    mesh: Mesh,
    n_samples: int,
    t: float,
    seed: int,
    d_full: Optional[int] = None,
    grf_modes: int = 256,
    grf_shift: float = 25.0,
    grf_power: float = 1.0,
) -> Dataset:
    """(initial condition, diffused state) pairs on one mesh.

    Targets apply the exact discrete semigroup in a basis of
    ``d_full = min(n_x, 512)`` modes; inputs are rough GRFs (power 1) drawn
    in the leading ``grf_modes`` of that same basis. Split is 5:1 by index.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    n = mesh.n_vertices
    if d_full is None:
        d_full = min(n, 512)
    stiffness = cotangent_stiffness(mesh)
    mass = lumped_mass(mesh)
    mesh_id = mesh.content_hash()
    basis = lbo_basis(stiffness, mass, d_full, source_id=mesh_id)
    grf = GrfSpec(d_m=min(grf_modes, d_full), shift=grf_shift, power=grf_power)
    inputs = np.zeros((n_samples, n, 1))
    outputs = np.zeros((n_samples, n, 1))
    for i in range(n_samples):
        rng = np.random.default_rng(seed ^ i)
        a = grf_sample(basis, grf, rng)
        inputs[i, :, 0] = a
        outputs[i, :, 0] = heat_semigroup_target(basis, a, t)
    return Dataset(
        inputs=inputs,
        outputs=outputs,
        input_domain_id=mesh_id,
        output_domain_id=mesh_id,
        split=_default_split(n_samples),
        provenance={
            "generator": "heat",
            "format_version": 1,
            "seed": seed,
            "n_samples": n_samples,
            "mesh": mesh_id,
            "t": t,
            "d_full": d_full,
            "grf": {"d_m": grf.d_m, "shift": grf.shift, "power": grf.power},
        },
    )


# ---------------------------------------------------------------------------
# .nds dataset files
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset file.

    Layout: magic ``NORMDS1\\0``, u64 little-endian header length, UTF-8
    header JSON (shapes, domain ids, split, provenance), float64 inputs
    (row-major), float64 outputs. Identical datasets serialize to identical
    bytes: the header is canonical JSON and carries no timestamps.
    """
    header = {
        "format_version": 1,
        "n_samples": dataset.n_samples,
        "input_shape": list(dataset.inputs.shape),
        "output_shape": list(dataset.outputs.shape),
        "input_domain_id": dataset.input_domain_id,
        "output_domain_id": dataset.output_domain_id,
        "split": {
            "train": np.asarray(dataset.split["train"]).tolist(),
            "test": np.asarray(dataset.split["test"]).tolist(),
        },
        "provenance": dataset.provenance,
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_NDS_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(dataset.inputs.astype("<f8").tobytes())
        fh.write(dataset.outputs.astype("<f8").tobytes())


def load_dataset(path) -> Dataset:
    """Read a dataset file written by :func:`save_dataset`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != _NDS_MAGIC:
        raise ParseError(f"{path}: not a dataset file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad header: {exc}") from None
    in_shape = tuple(header["input_shape"])
    out_shape = tuple(header["output_shape"])
    off = 16 + hlen
    n_in = int(np.prod(in_shape))
    n_out = int(np.prod(out_shape))
    if len(raw) != off + 8 * (n_in + n_out):
        raise ParseError(f"{path}: size does not match header shapes")
    inputs = np.frombuffer(raw, dtype="<f8", count=n_in,
                           offset=off).reshape(in_shape).copy()
    outputs = np.frombuffer(raw, dtype="<f8", count=n_out,
                            offset=off + 8 * n_in).reshape(out_shape).copy()
    return Dataset(
        inputs=inputs,
        outputs=outputs,
        input_domain_id=header["input_domain_id"],
        output_domain_id=header["output_domain_id"],
        split={
            "train": np.asarray(header["split"]["train"], dtype=np.int64),
            "test": np.asarray(header["split"]["test"], dtype=np.int64),
        },
        provenance=header.get("provenance", {}),
    )

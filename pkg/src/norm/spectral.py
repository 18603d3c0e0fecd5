"""Spectral bases on discrete domains and the maps in and out of them.

Three basis families share one container, :class:`SpectralBasis`:

* Laplace-Beltrami eigenfunctions (:func:`lbo_basis`), from the generalized
  symmetric eigenproblem ``S phi = lambda M phi`` with the stiffness and
  lumped mass matrices of a mesh;
* data-driven modes (:func:`pod_basis`), left singular vectors of a snapshot
  matrix;
* trigonometric modes on a uniform periodic time grid (:func:`fourier_basis`).

A basis stores its mode matrix ``Phi`` (columns scaled to unit Euclidean
norm, sign-fixed so the largest-magnitude entry is positive) together with
the precomputed least-squares pseudo-inverse ``pinv = (Phi^T Phi)^{-1} Phi^T``.
Encoding a field means applying ``pinv``; decoding applies ``Phi``.

The on-disk cache format (``.nsb``) is a fixed little-endian layout declared
in :func:`save_basis`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    InvalidModeCount,
    ParseError,
    RankDeficient,
    TooFewSnapshots,
    ZeroEigenvalue,
)

__all__ = [
    "Field",
    "SpectralBasis",
    "BoundCheck",
    "pseudo_inverse",
    "lbo_basis",
    "pod_basis",
    "fourier_basis",
    "projection_bound_check",
    "save_basis",
    "load_basis",
    "DENSE_EIG_CUTOFF",
]

# Above this vertex count the generalized eigenproblem goes to the
# shift-invert Lanczos path instead of a dense LAPACK solve.
DENSE_EIG_CUTOFF = 3000
_SHIFT = -1e-3
_ITER_TOL = 1e-9
_ITER_MAXITER = 500

_NSB_MAGIC = b"NORMSB1\x00"
_KIND_CODES = {"lbo": 0, "pod": 1, "fourier": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(eq=False)
class Field:
    """Values of a (possibly multi-channel) function on a discrete domain.

    ``values`` has shape (n_x, d_c). ``domain_id`` ties the field to the
    domain it was sampled on (a mesh content hash or a time-grid id) so that
    operators can refuse fields from the wrong domain.
    """

    values: np.ndarray
    domain_id: Optional[str] = None
    channel_names: Optional[list[str]] = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise DimensionMismatch(
                f"field values must be (n_x, d_c), got {self.values.shape}"
            )
        if not np.isfinite(self.values).all():
            raise ValueError("field values contain non-finite entries")

    @property
    def n_x(self) -> int:
        return self.values.shape[0]

    @property
    def d_c(self) -> int:
        return self.values.shape[1]


@dataclass(eq=False)
class SpectralBasis:
    """A truncated basis with its precomputed pseudo-inverse.

    Attributes
    ----------
    kind : str
        "lbo", "pod" or "fourier".
    modes : ndarray (n_x, d_m)
        Columns of unit Euclidean norm, sign-fixed.
    eigenvalues : ndarray (d_m,)
        Laplacian eigenvalues (ascending) for "lbo"/"fourier"; singular
        values (descending) for "pod".
    pinv : ndarray (d_m, n_x)
        Least-squares left inverse of ``modes``.
    source_id : str
        Hex SHA-256 identifying what the basis was computed from.
    mean : ndarray (n_x,), optional
        Snapshot mean of a centered POD basis; None otherwise.
    """

    kind: str
    modes: np.ndarray
    eigenvalues: np.ndarray
    pinv: np.ndarray
    source_id: str
    mean: Optional[np.ndarray] = None

    def __post_init__(self):
        self.modes = np.ascontiguousarray(self.modes, dtype=np.float64)
        self.eigenvalues = np.ascontiguousarray(self.eigenvalues, dtype=np.float64)
        self.pinv = np.ascontiguousarray(self.pinv, dtype=np.float64)
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.modes.shape[1] != self.eigenvalues.shape[0]:
            raise DimensionMismatch("mode count does not match eigenvalue count")
        if self.pinv.shape != (self.modes.shape[1], self.modes.shape[0]):
            raise DimensionMismatch("pinv shape does not match modes")

    @property
    def n_x(self) -> int:
        return self.modes.shape[0]

    @property
    def d_m(self) -> int:
        return self.modes.shape[1]

    def encode(self, values: np.ndarray) -> np.ndarray:
        """Least-squares coefficients of ``values``, shape (d_m, d_c).

        For a centered POD basis the stored snapshot mean is subtracted
        first, so that ``encode`` inverts ``decode`` exactly.
        """
        values = np.asarray(values, dtype=np.float64)
        squeeze = values.ndim == 1
        if squeeze:
            values = values[:, None]
        if values.shape[0] != self.n_x:
            raise DimensionMismatch(
                f"field has {values.shape[0]} rows, basis has {self.n_x}"
            )
        if self.mean is not None:
            values = values - self.mean[:, None]
        out = self.pinv @ values
        return out[:, 0] if squeeze else out

    def decode(self, coeffs: np.ndarray) -> np.ndarray:
        """Field values ``modes @ coeffs`` (+ snapshot mean if centered)."""
        coeffs = np.asarray(coeffs, dtype=np.float64)
        squeeze = coeffs.ndim == 1
        if squeeze:
            coeffs = coeffs[:, None]
        if coeffs.shape[0] != self.d_m:
            raise DimensionMismatch(
                f"coefficients have {coeffs.shape[0]} rows, basis has {self.d_m}"
            )
        out = self.modes @ coeffs
        if self.mean is not None:
            out = out + self.mean[:, None]
        return out[:, 0] if squeeze else out

    def truncate(self, k: int) -> "SpectralBasis":
        """Basis of the leading k modes, with a freshly computed pinv.

        Slicing the stored pseudo-inverse would be wrong whenever the modes
        are not exactly Euclidean-orthogonal, so it is recomputed.
        """
        if not 1 <= k <= self.d_m:
            raise InvalidModeCount(f"k={k} outside [1, {self.d_m}]")
        if k == self.d_m:
            return self
        modes = self.modes[:, :k].copy()
        return SpectralBasis(
            kind=self.kind,
            modes=modes,
            eigenvalues=self.eigenvalues[:k].copy(),
            pinv=pseudo_inverse(modes),
            source_id=self.source_id,
            mean=None if self.mean is None else self.mean.copy(),
        )


def pseudo_inverse(modes: np.ndarray) -> np.ndarray:
    """Least-squares left inverse ``(Phi^T Phi)^{-1} Phi^T``.

    Raises
    ------
    RankDeficient
        If the Gram matrix has condition number >= 1e12.
    """
    modes = np.asarray(modes, dtype=np.float64)
    if modes.ndim != 2:
        raise DimensionMismatch("modes must be a 2-D array")
    gram = modes.T @ modes
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond >= 1e12:
        raise RankDeficient(
            f"mode matrix is numerically rank deficient (cond(Phi^T Phi) = {cond:.3e})"
        )
    return np.linalg.solve(gram, modes.T)


def _fix_columns(modes: np.ndarray) -> np.ndarray:
    """Scale columns to unit Euclidean norm; flip so the largest-magnitude
    entry (lowest index on ties) is positive."""
    norms = np.linalg.norm(modes, axis=0)
    if norms.min() == 0.0:
        raise RankDeficient("a basis column is identically zero")
    modes = modes / norms
    lead = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[lead, np.arange(modes.shape[1])])
    return modes * signs


def lbo_basis(
    stiffness: sparse.spmatrix,
    mass: sparse.spmatrix,
    d_m: int,
    source_id: Optional[str] = None,
) -> SpectralBasis:
    """First d_m Laplace-Beltrami eigenpairs of ``S phi = lambda M phi``.

    Up to :data:`DENSE_EIG_CUTOFF` vertices the problem is solved densely
    (LAPACK, exact subset); above that a shift-invert Lanczos iteration
    around a small negative shift extracts the bottom of the spectrum.
    Eigenvalues come back ascending; eigenvectors are returned with unit
    Euclidean column norm and deterministic signs, and stay M-orthogonal.

    Parameters
    ----------
    stiffness, mass : sparse matrices (n_x, n_x)
    d_m : int
        Number of modes, 1 <= d_m <= n_x.
    source_id : str, optional
        Hex digest identifying the originating mesh; defaults to a hash of
        the two matrices.
    """
    n = stiffness.shape[0]
    if not 1 <= d_m <= n:
        raise InvalidModeCount(f"d_m={d_m} outside [1, {n}]")
    if stiffness.shape != mass.shape:
        raise DimensionMismatch("stiffness and mass shapes differ")
    if n <= DENSE_EIG_CUTOFF:
        vals, vecs = scipy.linalg.eigh(
            np.asarray(stiffness.todense()),
            np.asarray(mass.todense()),
            subset_by_index=[0, d_m - 1],
        )
    else:
        try:
            vals, vecs = spla.eigsh(
                stiffness.tocsc(),
                k=d_m,
                M=mass.tocsc(),
                sigma=_SHIFT,
                which="LM",
                tol=_ITER_TOL,
                maxiter=_ITER_MAXITER,
            )
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceFailure(
                f"eigensolver did not converge for d_m={d_m}: {exc}"
            ) from None
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    if source_id is None:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(stiffness.tocoo().data).astype("<f8").tobytes())
        h.update(np.ascontiguousarray(mass.diagonal()).astype("<f8").tobytes())
        source_id = h.hexdigest()
    modes = _fix_columns(vecs)
    return SpectralBasis(
        kind="lbo",
        modes=modes,
        eigenvalues=vals,
        pinv=pseudo_inverse(modes),
        source_id=source_id,
    )


def pod_basis(snapshots: np.ndarray, d_m: int, center: bool = True) -> SpectralBasis:
    """Proper orthogonal decomposition of a snapshot set.

    Parameters
    ----------
    snapshots : ndarray (N, n_x) or (N, n_x, d_c)
        Sampled fields; multi-channel snapshots contribute one column per
        (sample, channel) pair.
    d_m : int
        Number of modes to keep.
    center : bool
        Subtract the column mean before the SVD (default). The mean is
        stored on the basis and re-added by ``decode``.

    Raises
    ------
    TooFewSnapshots
        If fewer snapshot columns than requested modes.
    RankDeficient
        If the (centered) snapshot matrix has rank below d_m.
    """
    snaps = np.asarray(snapshots, dtype=np.float64)
    if snaps.ndim == 2:
        snaps = snaps[:, :, None]
    if snaps.ndim != 3:
        raise DimensionMismatch(
            f"snapshots must be (N, n_x) or (N, n_x, d_c), got {snaps.shape}"
        )
    n_cols = snaps.shape[0] * snaps.shape[2]
    if d_m < 1:
        raise InvalidModeCount(f"d_m={d_m} must be positive")
    if n_cols < d_m:
        raise TooFewSnapshots(f"{n_cols} snapshot column(s) for d_m={d_m}")
    cols = snaps.transpose(1, 0, 2).reshape(snaps.shape[1], n_cols)
    mean = None
    if center:
        mean = cols.mean(axis=1)
        cols = cols - mean[:, None]
    u, s, _ = np.linalg.svd(cols, full_matrices=False)
    rank = int(np.sum(s > 1e-12 * max(s[0], 1e-300)))
    if rank < d_m:
        raise RankDeficient(
            f"snapshot matrix has rank {rank} < d_m={d_m}"
            + (" after centering" if center else "")
        )
    modes = _fix_columns(u[:, :d_m])
    h = hashlib.sha256()
    h.update(snaps.astype("<f8").tobytes())
    h.update(b"centered" if center else b"raw")
    return SpectralBasis(
        kind="pod",
        modes=modes,
        eigenvalues=s[:d_m].copy(),
        pinv=pseudo_inverse(modes),
        source_id=h.hexdigest(),
        mean=mean,
    )


def fourier_basis(n_t: int, d_t: int) -> SpectralBasis:
    """Trigonometric basis on the uniform periodic grid t_j = j/n_t.

    Columns are the constant mode followed by cos/sin pairs at integer
    frequencies k = 1, 2, ...; the matching Laplacian eigenvalues are 0 and
    (2 pi k)^2, each repeated for its pair. ``d_t`` must be odd so the pairs
    close, and cannot exceed ``n_t``.
    """
    if n_t < 1:
        raise InvalidModeCount(f"n_t={n_t} must be positive")
    if d_t < 1 or d_t > n_t:
        raise InvalidModeCount(f"d_t={d_t} outside [1, {n_t}]")
    if d_t % 2 == 0:
        raise InvalidModeCount(f"d_t={d_t} must be odd (cos/sin pairs plus constant)")
    t = np.arange(n_t) / n_t
    cols = [np.ones(n_t)]
    vals = [0.0]
    for k in range(1, (d_t - 1) // 2 + 1):
        cols.append(np.cos(2.0 * np.pi * k * t))
        cols.append(np.sin(2.0 * np.pi * k * t))
        vals.extend([(2.0 * np.pi * k) ** 2] * 2)
    modes = _fix_columns(np.column_stack(cols))
    source_id = hashlib.sha256(f"timegrid:{n_t}".encode()).hexdigest()
    return SpectralBasis(
        kind="fourier",
        modes=modes,
        eigenvalues=np.asarray(vals),
        pinv=pseudo_inverse(modes),
        source_id=source_id,
    )


# ---------------------------------------------------------------------------
# projection bound
# ---------------------------------------------------------------------------

@dataclass
class BoundCheck:
    """Result of :func:`projection_bound_check`."""

    residual_norm_sq: float
    bound: float
    passed: bool


def projection_bound_check(
    basis: SpectralBasis,
    stiffness: sparse.spmatrix,
    mass: sparse.spmatrix,
    values: np.ndarray,
    n: int,
    slack: float = 1.05,
) -> BoundCheck:
    """Check the spectral projection error bound for one field.

    The squared M-norm of the residual after M-orthogonal projection onto
    the first ``n`` modes is compared against the Dirichlet energy of the
    field divided by the (n+1)-th eigenvalue; the discrete bound holds with
    the given slack factor for fields resolved by the basis.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape[0] != basis.n_x:
        raise DimensionMismatch(
            f"field has {values.shape[0]} rows, basis has {basis.n_x}"
        )
    if not 1 <= n < basis.d_m:
        raise InvalidModeCount(f"n={n} needs 1 <= n < d_m={basis.d_m}")
    lam = basis.eigenvalues[n]
    if lam < 1e-12:
        raise ZeroEigenvalue(f"eigenvalue {n + 1} is {lam:.3e}; bound undefined")
    phi_n = basis.modes[:, :n]
    mphi = mass @ phi_n
    coeff = np.linalg.solve(phi_n.T @ mphi, mphi.T @ values)
    resid = values - phi_n @ coeff
    residual_norm_sq = float(resid @ (mass @ resid))
    energy = float(values @ (stiffness @ values))
    bound = energy / lam
    return BoundCheck(
        residual_norm_sq=residual_norm_sq,
        bound=bound,
        passed=residual_norm_sq <= slack * bound,
    )


# ---------------------------------------------------------------------------
# .nsb cache files
# ---------------------------------------------------------------------------

def save_basis(basis: SpectralBasis, path) -> None:
    """Write a basis cache file.

    Layout (little-endian): magic ``NORMSB1\\0``, u32 kind code, u64 n_x,
    u64 d_m, float64 eigenvalues[d_m], float64 modes (row-major, n_x*d_m),
    float64 pinv (row-major, d_m*n_x), 32-byte source hash.
    """
    if basis.mean is not None:
        raise ValueError(
            "the basis cache format has no slot for a POD mean; "
            "build the basis with center=False to serialize it"
        )
    with open(path, "wb") as fh:
        fh.write(_NSB_MAGIC)
        fh.write(struct.pack("<IQQ", _KIND_CODES[basis.kind], basis.n_x, basis.d_m))
        fh.write(basis.eigenvalues.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.modes).astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.pinv).astype("<f8").tobytes())
        fh.write(bytes.fromhex(basis.source_id))


def load_basis(path) -> SpectralBasis:
    """Read a basis cache file written by :func:`save_basis`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:8] != _NSB_MAGIC:
        raise ParseError(f"{path}: not a basis cache file (bad magic)")
    try:
        kind_code, n_x, d_m = struct.unpack_from("<IQQ", raw, 8)
    except struct.error:
        raise ParseError(f"{path}: truncated header") from None
    if kind_code not in _KIND_NAMES:
        raise ParseError(f"{path}: unknown basis kind code {kind_code}")
    off = 8 + 4 + 16
    need = off + 8 * (d_m + 2 * n_x * d_m) + 32
    if len(raw) != need:
        raise ParseError(
            f"{path}: size {len(raw)} does not match header (expected {need})"
        )
    vals = np.frombuffer(raw, dtype="<f8", count=d_m, offset=off).copy()
    off += 8 * d_m
    modes = np.frombuffer(raw, dtype="<f8", count=n_x * d_m, offset=off)
    modes = modes.reshape(n_x, d_m).copy()
    off += 8 * n_x * d_m
    pinv = np.frombuffer(raw, dtype="<f8", count=n_x * d_m, offset=off)
    pinv = pinv.reshape(d_m, n_x).copy()
    off += 8 * n_x * d_m
    source_id = raw[off:off + 32].hex()
    return SpectralBasis(
        kind=_KIND_NAMES[kind_code],
        modes=modes,
        eigenvalues=vals,
        pinv=pinv,
        source_id=source_id,
    )

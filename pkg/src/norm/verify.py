"""Self-contained verification suites behind the ``verify`` CLI command.

Each suite generates everything it needs (meshes, bases, models), checks a
mathematical property against an independent reference, and reports
worst-case margins:

* ``spectrum``      -- unit-square Laplacian eigenvalues vs the closed-form
                       Neumann spectrum pi^2 (m^2 + n^2);
* ``bound``         -- the spectral projection error bound, including its
                       tightness on the (n+1)-th eigenfunction;
* ``gradcheck``     -- reverse-mode gradients vs central differences on a
                       small full model;
* ``tensor-oracle`` -- the per-mode mixing contraction vs a plain
                       triple-loop evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import cotangent_stiffness, grid_mesh, lumped_mass
from .operator import ModelSpec, build_model
from .spectral import lbo_basis, projection_bound_check

__all__ = ["CheckResult", "SUITES", "run_suite", "neumann_square_eigenvalues",
           "mix_reference"]


@dataclass
class CheckResult:
    """One named check with its worst observed value and its tolerance."""

    name: str
    passed: bool
    value: float
    tolerance: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name}: worst {self.value:.3e} "
                f"(tolerance {self.tolerance:.3e})")


def neumann_square_eigenvalues(count: int) -> np.ndarray:
    """Smallest ``count`` Laplacian eigenvalues of the unit square with
    natural boundary conditions: pi^2 (m^2 + n^2), m, n >= 0, sorted."""
    k = int(np.ceil(np.sqrt(count))) + 2
    m, n = np.meshgrid(np.arange(k), np.arange(k))
    vals = np.sort((np.pi ** 2) * (m ** 2 + n ** 2).ravel())
    return vals[:count]


def mix_reference(R: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Triple-loop evaluation of mix[k, l] = sum_j R[k, l, j] c[k, j]."""
    d_m, d_v_out, d_v_in = R.shape
    out = np.zeros((d_m, d_v_out))
    for k in range(d_m):
        for l in range(d_v_out):
            acc = 0.0
            for j in range(d_v_in):
                acc += R[k, l, j] * coeffs[k, j]
            out[k, l] = acc
    return out


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def spectrum_suite(n: int = 64, n_eigs: int = 10, tol: float = 0.02
                   ) -> list[CheckResult]:
    """First ``n_eigs`` nonzero unit-square eigenvalues within ``tol``."""
    mesh = grid_mesh(n)
    basis = lbo_basis(cotangent_stiffness(mesh), lumped_mass(mesh),
                      n_eigs + 1, source_id=mesh.content_hash())
    got = basis.eigenvalues[1:]
    want = neumann_square_eigenvalues(n_eigs + 1)[1:]
    rel = np.abs(got - want) / want
    checks = [CheckResult(
        name=f"square-grid n={n}: first {n_eigs} nonzero eigenvalues",
        passed=bool(rel.max() <= tol),
        value=float(rel.max()),
        tolerance=tol,
    )]
    lam1 = abs(basis.eigenvalues[0])
    checks.append(CheckResult(
        name="constant mode eigenvalue near zero",
        passed=bool(lam1 <= 1e-8),
        value=float(lam1),
        tolerance=1e-8,
    ))
    return checks


def bound_suite(n_grid: int = 32, trunc_levels=(8, 32, 64), n_fields: int = 20,
                seed: int = 0) -> list[CheckResult]:
    """Projection residual vs Dirichlet-energy bound on band-limited fields."""
    mesh = grid_mesh(n_grid)
    stiffness = cotangent_stiffness(mesh)
    mass = lumped_mass(mesh)
    d_m = max(trunc_levels) + 6
    basis = lbo_basis(stiffness, mass, d_m, source_id=mesh.content_hash())
    rng = np.random.default_rng(seed)
    band = max(trunc_levels) + 2
    checks = []
    worst_ratio = 0.0
    for _ in range(n_fields):
        f = basis.modes[:, :band] @ rng.standard_normal(band)
        for n in trunc_levels:
            res = projection_bound_check(basis, stiffness, mass, f, n)
            ratio = res.residual_norm_sq / max(res.bound, 1e-300)
            worst_ratio = max(worst_ratio, ratio)
            if not res.passed:
                break
    checks.append(CheckResult(
        name=f"bound holds for {n_fields} band-limited fields at "
             f"n in {tuple(trunc_levels)}",
        passed=bool(worst_ratio <= 1.05),
        value=float(worst_ratio),
        tolerance=1.05,
    ))
    # tightness: for f = phi_{n+1} the residual equals the bound
    worst_gap = 0.0
    for n in trunc_levels:
        f = basis.modes[:, n]
        res = projection_bound_check(basis, stiffness, mass, f, n)
        gap = abs(res.residual_norm_sq - res.bound) / max(res.bound, 1e-300)
        worst_gap = max(worst_gap, gap)
    checks.append(CheckResult(
        name="bound tight on the (n+1)-th eigenfunction",
        passed=bool(worst_gap <= 1e-6),
        value=float(worst_gap),
        tolerance=1e-6,
    ))
    return checks


def _small_model(seed: int = 0, n_grid: int = 8, d_m: int = 8, d_v: int = 4,
                 n_layers: int = 2):
    mesh = grid_mesh(n_grid)
    basis = lbo_basis(cotangent_stiffness(mesh), lumped_mass(mesh), d_m,
                      source_id=mesh.content_hash())
    spec = ModelSpec(
        wiring="same", d_a=1, d_v=d_v, d_u=1, n_layers=n_layers,
        basis_in=basis, activation="gelu", seed=seed,
    )
    return build_model(spec), basis


def gradcheck_suite(n_params: int = 30, step: float = 1e-6,
                    tol: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    """Reverse-mode vs central differences on a small full model."""
    from .training import gradcheck

    model, basis = _small_model(seed=seed)
    rng = np.random.default_rng(seed + 1)
    a = rng.standard_normal((basis.n_x, 1))
    worst = gradcheck(model, a, n_params=n_params, step=step, seed=seed)
    return [CheckResult(
        name=f"gradcheck on {n_params} parameters (2 L-layers, d_m=8, d_v=4)",
        passed=bool(worst <= tol),
        value=float(worst),
        tolerance=tol,
    )]


def tensor_oracle_suite(n_shapes: int = 50, tol: float = 1e-13,
                        seed: int = 0) -> list[CheckResult]:
    """Vectorized mixing contraction vs the triple loop, random shapes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_shapes):
        d_m = int(rng.integers(1, 40))
        d_v = int(rng.integers(1, 12))
        R = rng.standard_normal((d_m, d_v, d_v))
        coeffs = rng.standard_normal((d_m, d_v))
        fast = np.einsum("klj,kj->kl", R, coeffs, optimize=True)
        ref = mix_reference(R, coeffs)
        scale = max(1.0, float(np.abs(ref).max()))
        worst = max(worst, float(np.abs(fast - ref).max()) / scale)
    return [CheckResult(
        name=f"mixing tensor contraction vs triple loop ({n_shapes} shapes)",
        passed=bool(worst <= tol),
        value=float(worst),
        tolerance=tol,
    )]


SUITES = {
    "spectrum": spectrum_suite,
    "bound": bound_suite,
    "gradcheck": gradcheck_suite,
    "tensor-oracle": tensor_oracle_suite,
}


def run_suite(name: str) -> list[CheckResult]:
    """Run one suite by name, or all of them with ``"all"``."""
    if name == "all":
        out = []
        for key in SUITES:
            out.extend(SUITES[key]())
        return out
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}")
    return SUITES[name]()

"""Spectral bases: eigenpairs, POD, Fourier, projection bound, cache files.

Hand oracles:

* modes [[1,0],[0,2],[0,0]] have Gram diag(1,4), so the least-squares
  left inverse is [[1,0,0],[0,1/2,0]].
* Snapshot matrix with rows (2,0) and (0,1): raw POD modes are the axes
  with singular values (2,1); after centering the matrix has rank 1 with
  direction (2,-1)/sqrt(5).
* Fourier n_t=4, d_t=3: columns proportional to (1,1,1,1), (1,0,-1,0),
  (0,1,0,-1), eigenvalues (0, 4 pi^2, 4 pi^2).
* Unit-square Neumann spectrum: pi^2 (m^2 + n^2).
"""

import numpy as np
import pytest

from norm.errors import (
    DimensionMismatch,
    InvalidModeCount,
    ParseError,
    RankDeficient,
    TooFewSnapshots,
    ZeroEigenvalue,
)
from norm.mesh import Mesh, cotangent_stiffness, grid_mesh, lumped_mass
from norm.spectral import (
    Field,
    fourier_basis,
    lbo_basis,
    load_basis,
    pod_basis,
    projection_bound_check,
    pseudo_inverse,
    save_basis,
)
from norm.verify import neumann_square_eigenvalues


# -- pseudo-inverse -----------------------------------------------------------

def test_pseudo_inverse_hand_example():
    modes = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
    want = np.array([[1.0, 0.0, 0.0], [0.0, 0.5, 0.0]])
    assert np.allclose(pseudo_inverse(modes), want, atol=1e-14)


def test_pseudo_inverse_orthonormal_is_transpose(rng):
    q, _ = np.linalg.qr(rng.standard_normal((12, 5)))
    assert np.allclose(pseudo_inverse(q), q.T, atol=1e-12)


def test_pseudo_inverse_rank_deficient():
    col = np.arange(4.0)[:, None]
    with pytest.raises(RankDeficient):
        pseudo_inverse(np.hstack([col, col]))


# -- LBO basis ----------------------------------------------------------------

@pytest.fixture(scope="module")
def grid16_ops():
    mesh = grid_mesh(16)
    return mesh, cotangent_stiffness(mesh), lumped_mass(mesh)


def test_lbo_spectrum_matches_neumann_values(grid16_ops):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 7)
    want = neumann_square_eigenvalues(7)
    assert abs(basis.eigenvalues[0]) < 1e-8
    rel = np.abs(basis.eigenvalues[1:] - want[1:]) / want[1:]
    assert rel.max() < 0.02


def test_lbo_basis_identities(grid16_ops):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 10)
    d_m = basis.d_m
    # left inverse
    assert np.abs(basis.pinv @ basis.modes - np.eye(d_m)).max() < 1e-8
    # eigen-residual, relative to the Rayleigh scale of each pair
    resid = S @ basis.modes - (M @ basis.modes) * basis.eigenvalues
    scale = np.maximum(np.abs(basis.eigenvalues), 1.0)
    assert (np.abs(resid).max(axis=0) / scale).max() < 1e-7
    # M-orthogonality and unit Euclidean columns
    gram = basis.modes.T @ (M @ basis.modes)
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() < 1e-10
    assert np.allclose(np.linalg.norm(basis.modes, axis=0), 1.0, atol=1e-12)
    # ascending eigenvalues, deterministic signs
    assert (np.diff(basis.eigenvalues) >= -1e-12).all()
    lead = np.argmax(np.abs(basis.modes), axis=0)
    assert (basis.modes[lead, np.arange(d_m)] > 0).all()


def test_lbo_mode_count_validation(grid16_ops):
    _, S, M = grid16_ops
    with pytest.raises(InvalidModeCount):
        lbo_basis(S, M, 0)
    with pytest.raises(InvalidModeCount):
        lbo_basis(S, M, S.shape[0] + 1)


def test_lbo_deterministic(grid16_ops):
    _, S, M = grid16_ops
    b1 = lbo_basis(S, M, 6)
    b2 = lbo_basis(S, M, 6)
    assert np.array_equal(b1.modes, b2.modes)
    assert np.array_equal(b1.eigenvalues, b2.eigenvalues)


# -- encode / decode ----------------------------------------------------------

def test_encode_decode_roundtrip_in_span(grid16_ops):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 6)
    coeffs = np.linspace(-1.0, 1.0, 6)
    values = basis.decode(coeffs)
    assert values.shape == (basis.n_x,)
    back = basis.encode(values)
    assert np.allclose(back, coeffs, atol=1e-10)


def test_encode_is_least_squares(grid16_ops, rng):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 5)
    v = rng.standard_normal((basis.n_x, 2))
    resid = v - basis.modes @ basis.encode(v)
    # Euclidean least squares: residual orthogonal to the span
    assert np.abs(basis.modes.T @ resid).max() < 1e-10


def test_truncate_prefix_and_fresh_pinv(grid16_ops):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 9)
    small = basis.truncate(4)
    assert small.d_m == 4
    assert np.array_equal(small.modes, basis.modes[:, :4])
    assert np.array_equal(small.eigenvalues, basis.eigenvalues[:4])
    assert np.abs(small.pinv @ small.modes - np.eye(4)).max() < 1e-10
    with pytest.raises(InvalidModeCount):
        basis.truncate(0)
    with pytest.raises(InvalidModeCount):
        basis.truncate(10)


def test_field_validation():
    f = Field(np.arange(3.0))
    assert f.values.shape == (3, 1)
    with pytest.raises(DimensionMismatch):
        Field(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        Field(np.array([1.0, np.inf]))


# -- POD ----------------------------------------------------------------------

def test_pod_hand_example_raw():
    snaps = np.array([[2.0, 0.0], [0.0, 1.0]])
    basis = pod_basis(snaps, 2, center=False)
    assert np.allclose(basis.modes, np.eye(2), atol=1e-14)
    assert np.allclose(basis.eigenvalues, [2.0, 1.0], atol=1e-14)


def test_pod_hand_example_centered():
    snaps = np.array([[2.0, 0.0], [0.0, 1.0]])
    basis = pod_basis(snaps, 1, center=True)
    assert np.allclose(basis.mean, [1.0, 0.5], atol=1e-14)
    want = np.array([2.0, -1.0]) / np.sqrt(5.0)
    assert np.allclose(basis.modes[:, 0], want, atol=1e-14)
    # centering leaves rank 1, so asking for 2 modes must fail
    with pytest.raises(RankDeficient):
        pod_basis(snaps, 2, center=True)


def test_pod_centered_encode_decode_roundtrip():
    rng = np.random.default_rng(5)
    snaps = rng.standard_normal((6, 10))
    basis = pod_basis(snaps, 5, center=True)
    rebuilt = basis.decode(basis.encode(snaps[2]))
    assert np.allclose(rebuilt, snaps[2], atol=1e-10)


def test_pod_reconstructs_low_rank_data(rng):
    left = rng.standard_normal((30, 3))
    right = rng.standard_normal((3, 40))
    snaps = left @ right  # rank 3, shape (N=30, n_x=40)
    basis = pod_basis(snaps, 3, center=False)
    rebuilt = (basis.modes @ basis.encode(snaps.T)).T
    assert np.abs(rebuilt - snaps).max() < 1e-10


def test_pod_multichannel_snapshots(rng):
    snaps = rng.standard_normal((4, 9, 2))
    basis = pod_basis(snaps, 6, center=False)  # 8 columns available
    assert basis.d_m == 6
    assert basis.n_x == 9


def test_pod_too_few_snapshots():
    with pytest.raises(TooFewSnapshots):
        pod_basis(np.zeros((2, 5)) + np.eye(2, 5), 3)


# -- Fourier ------------------------------------------------------------------

def test_fourier_frozen_columns():
    basis = fourier_basis(4, 3)
    want = np.column_stack([
        np.full(4, 0.5),
        np.array([1.0, 0.0, -1.0, 0.0]) / np.sqrt(2.0),
        np.array([0.0, 1.0, 0.0, -1.0]) / np.sqrt(2.0),
    ])
    assert np.allclose(basis.modes, want, atol=1e-14)
    assert np.allclose(basis.eigenvalues,
                       [0.0, 4.0 * np.pi ** 2, 4.0 * np.pi ** 2], atol=1e-12)


def test_fourier_columns_orthonormal():
    basis = fourier_basis(16, 7)
    assert np.abs(basis.modes.T @ basis.modes - np.eye(7)).max() < 1e-12


def test_fourier_validation():
    with pytest.raises(InvalidModeCount):
        fourier_basis(8, 4)  # even
    with pytest.raises(InvalidModeCount):
        fourier_basis(4, 5)  # more modes than samples


# -- projection bound ---------------------------------------------------------

def test_bound_zero_residual_in_span(grid16_ops):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 8)
    f = basis.modes[:, :3] @ np.array([0.3, -1.2, 0.7])
    res = projection_bound_check(basis, S, M, f, 5)
    assert res.passed
    assert res.residual_norm_sq < 1e-16 * max(res.bound, 1.0)


def test_bound_tight_on_next_eigenfunction(grid16_ops):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 8)
    for n in (1, 4):
        res = projection_bound_check(basis, S, M, basis.modes[:, n], n)
        assert res.passed
        assert res.residual_norm_sq == pytest.approx(res.bound, rel=1e-6)


def test_bound_rejects_zero_eigenvalue():
    # two disconnected triangles give a doubly degenerate zero eigenvalue
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0],
                      [3.0, 0.0], [4.0, 0.0], [3.0, 1.0]])
    cells = np.array([[0, 1, 2], [3, 4, 5]])
    mesh = Mesh(verts, cells, "tri")
    basis = lbo_basis(cotangent_stiffness(mesh), lumped_mass(mesh), 4)
    assert abs(basis.eigenvalues[1]) < 1e-12
    with pytest.raises(ZeroEigenvalue):
        projection_bound_check(basis, cotangent_stiffness(mesh),
                               lumped_mass(mesh), verts[:, 0], 1)


def test_bound_mode_count_validation(grid16_ops):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 4)
    with pytest.raises(InvalidModeCount):
        projection_bound_check(basis, S, M, np.zeros(basis.n_x), 4)


# -- cache files --------------------------------------------------------------

def test_basis_file_roundtrip(tmp_path, grid16_ops):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 5, source_id="ab" * 32)
    path = tmp_path / "b.nsb"
    save_basis(basis, path)
    back = load_basis(path)
    assert back.kind == "lbo"
    assert back.source_id == basis.source_id
    assert np.array_equal(back.modes, basis.modes)
    assert np.array_equal(back.eigenvalues, basis.eigenvalues)
    assert np.array_equal(back.pinv, basis.pinv)


def test_basis_file_roundtrip_fourier(tmp_path):
    basis = fourier_basis(8, 5)
    path = tmp_path / "f.nsb"
    save_basis(basis, path)
    assert load_basis(path).kind == "fourier"


def test_basis_file_saves_are_byte_identical(tmp_path, grid16_ops):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 5)
    p1, p2 = tmp_path / "a.nsb", tmp_path / "b.nsb"
    save_basis(basis, p1)
    save_basis(basis, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_centered_pod_cannot_be_saved(tmp_path):
    snaps = np.random.default_rng(1).standard_normal((5, 8))
    basis = pod_basis(snaps, 3, center=True)
    with pytest.raises(ValueError):
        save_basis(basis, tmp_path / "p.nsb")


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.nsb"
    path.write_bytes(b"NOTABASISFILE" + b"\x00" * 64)
    with pytest.raises(ParseError):
        load_basis(path)


def test_load_rejects_truncated_file(tmp_path, grid16_ops):
    _, S, M = grid16_ops
    basis = lbo_basis(S, M, 4)
    path = tmp_path / "t.nsb"
    save_basis(basis, path)
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(ParseError):
        load_basis(path)

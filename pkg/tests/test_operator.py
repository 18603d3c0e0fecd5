"""Operator model: spectral block, L-layers, wirings, gradients, checkpoints.

Reference computations used below:

* The spectral block is checked against an explicit triple loop over
  (mode, out-channel, in-channel).
* A full L-layer is checked against sigma(V W + b + Phi R pinv V) written
  with plain loops and the erf form of GELU.
* Parameter-count example, affine P and Q: d_a=1, d_v=2, d_u=1, one layer,
  d_m=3 gives P: 1*2+2=4, layer: W 4 + b 2 + R 3*2*2=12, Q: 2*1+1=3,
  total 25.
* exp(-t Laplacian) is diagonal in the full eigenbasis, so a one-layer
  model with zero skip and R[k] = exp(-t lambda_k) I reproduces the heat
  semigroup exactly.
"""

import numpy as np
import pytest
from scipy.special import erf

from norm.datagen import heat_semigroup_target
from norm.errors import (
    DimensionMismatch,
    DomainMismatch,
    InvalidSpec,
    ParseError,
)
from norm.mesh import cotangent_stiffness, grid_mesh, lumped_mass, refine
from norm.operator import (
    ModelSpec,
    build_model,
    forward,
    l_layer_forward,
    load_checkpoint,
    rebind,
    save_checkpoint,
    spectral_block,
)
from norm.spectral import Field, SpectralBasis, fourier_basis, lbo_basis
from norm.training import Normalizer, gradcheck
from norm.verify import mix_reference


def make_basis(n_grid, d_m):
    mesh = grid_mesh(n_grid)
    return lbo_basis(cotangent_stiffness(mesh), lumped_mass(mesh), d_m,
                     source_id=mesh.content_hash())


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


# -- spectral block ------------------------------------------------------------

def test_spectral_block_matches_triple_loop(rng):
    basis = make_basis(5, 6)
    R = rng.standard_normal((6, 3, 3))
    values = rng.standard_normal((basis.n_x, 3))
    got = spectral_block(R, basis, basis, values)
    want = basis.modes @ mix_reference(R, basis.pinv @ values)
    assert np.abs(got - want).max() < 1e-13


def test_spectral_block_cross_domain(rng):
    b_in, b_out = make_basis(5, 4), make_basis(4, 4)
    R = rng.standard_normal((4, 2, 2))
    values = rng.standard_normal((b_in.n_x, 2))
    got = spectral_block(R, b_in, b_out, values)
    assert got.shape == (b_out.n_x, 2)
    want = b_out.modes @ mix_reference(R, b_in.pinv @ values)
    assert np.abs(got - want).max() < 1e-13


def test_spectral_block_shape_validation(rng):
    basis = make_basis(4, 3)
    with pytest.raises(DimensionMismatch):
        spectral_block(rng.standard_normal((5, 2, 2)), basis, basis,
                       np.zeros((basis.n_x, 2)))
    with pytest.raises(DimensionMismatch):
        spectral_block(rng.standard_normal((3, 2, 2)), basis, basis,
                       np.zeros((7, 2)))


def test_l_layer_dense_reference(rng):
    basis = make_basis(4, 5)
    spec = ModelSpec(wiring="same", d_a=1, d_v=3, d_u=1, n_layers=2,
                     basis_in=basis, activation="gelu", seed=7)
    lay = build_model(spec).layers[0]
    V = rng.standard_normal((basis.n_x, 3))
    got = l_layer_forward(lay, V)

    n_x, d_v = V.shape
    Z = V @ lay.W + lay.b
    coeffs = basis.pinv @ V
    for y in range(n_x):
        for l in range(d_v):
            acc = 0.0
            for k in range(basis.d_m):
                for j in range(d_v):
                    acc += basis.modes[y, k] * lay.R[k, l, j] * coeffs[k, j]
            Z[y, l] += acc
    assert np.abs(got - gelu(Z)).max() < 1e-12


def test_final_layer_activation_is_identity():
    basis = make_basis(4, 3)
    spec = ModelSpec(wiring="same", d_a=1, d_v=2, d_u=1, n_layers=3,
                     basis_in=basis, activation="gelu", seed=0)
    model = build_model(spec)
    assert [lay.activation for lay in model.layers] == \
        ["gelu", "gelu", "identity"]


# -- construction ---------------------------------------------------------------

def test_param_count_worked_example():
    basis = make_basis(4, 3)
    spec = ModelSpec(wiring="same", d_a=1, d_v=2, d_u=1, n_layers=1,
                     basis_in=basis, activation="gelu", seed=0,
                     p_hidden=None, q_hidden=None)
    assert build_model(spec).param_count() == 25


def test_param_count_independent_of_mesh_size():
    coarse = grid_mesh(6)
    fine = refine(coarse)
    counts = []
    for mesh in (coarse, fine):
        basis = lbo_basis(cotangent_stiffness(mesh), lumped_mass(mesh), 8,
                          source_id=mesh.content_hash())
        spec = ModelSpec(wiring="same", d_a=1, d_v=4, d_u=1, n_layers=2,
                         basis_in=basis, activation="gelu", seed=0)
        counts.append(build_model(spec).param_count())
    assert counts[0] == counts[1]


def test_initialization_is_seeded_and_shaped():
    basis = make_basis(4, 5)
    spec = ModelSpec(wiring="same", d_a=2, d_v=4, d_u=3, n_layers=2,
                     basis_in=basis, activation="gelu", seed=11)
    m1, m2 = build_model(spec), build_model(spec)
    for (n1, a1), (n2, a2) in zip(m1.parameters(), m2.parameters()):
        assert n1 == n2
        assert np.array_equal(a1, a2)
    m3 = build_model(ModelSpec(wiring="same", d_a=2, d_v=4, d_u=3,
                               n_layers=2, basis_in=basis,
                               activation="gelu", seed=12))
    assert not np.array_equal(m1.layers[0].W, m3.layers[0].W)

    lay = m1.layers[0]
    assert np.abs(lay.W).max() <= 1.0 / np.sqrt(4)
    assert not lay.b.any()
    assert lay.R.shape == (5, 4, 4)
    # mixing tensor scale: std 1/(d_v sqrt(d_m)), loose statistical check
    want_std = 1.0 / (4 * np.sqrt(5))
    pooled = np.concatenate([l.R.ravel() for l in m1.layers])
    assert 0.5 * want_std < pooled.std() < 1.5 * want_std


def test_invalid_specs():
    basis = make_basis(4, 4)
    other = make_basis(5, 3)
    with pytest.raises(InvalidSpec):
        build_model(ModelSpec(wiring="weird", d_a=1, d_v=2, d_u=1,
                              n_layers=1, basis_in=basis))
    with pytest.raises(InvalidSpec):
        build_model(ModelSpec(wiring="same", d_a=1, d_v=0, d_u=1,
                              n_layers=1, basis_in=basis))
    with pytest.raises(InvalidSpec):
        build_model(ModelSpec(wiring="cross", d_a=1, d_v=2, d_u=1,
                              n_layers=2, basis_in=basis))
    with pytest.raises(InvalidSpec):
        build_model(ModelSpec(wiring="cross", d_a=1, d_v=2, d_u=1,
                              n_layers=2, basis_in=basis, basis_out=other))
    with pytest.raises(InvalidSpec):
        build_model(ModelSpec(wiring="temporal", d_a=1, d_v=2, d_u=1,
                              n_layers=2, basis_time=basis, basis_out=basis))
    with pytest.raises(InvalidSpec):
        build_model(ModelSpec(wiring="same", d_a=1, d_v=2, d_u=1,
                              n_layers=1, basis_in=basis,
                              activation="softplus"))


def test_temporal_mode_count_validation():
    by = make_basis(4, 4)
    with pytest.raises(InvalidSpec):
        build_model(ModelSpec(wiring="temporal", d_a=1, d_v=2, d_u=1,
                              n_layers=2, basis_time=fourier_basis(16, 5),
                              basis_out=make_basis(4, 3)))  # d_t > d_m
    even = fourier_basis(16, 5).truncate(4)
    with pytest.raises(InvalidSpec):
        build_model(ModelSpec(wiring="temporal", d_a=1, d_v=2, d_u=1,
                              n_layers=2, basis_time=even, basis_out=by))


# -- forward --------------------------------------------------------------------

def test_forward_checks_domain_and_shape(rng):
    basis = make_basis(4, 3)
    model = build_model(ModelSpec(wiring="same", d_a=1, d_v=2, d_u=1,
                                  n_layers=1, basis_in=basis, seed=0))
    good = Field(rng.standard_normal((basis.n_x, 1)),
                 domain_id=basis.source_id)
    out = forward(model, good)
    assert out.values.shape == (basis.n_x, 1)
    assert out.domain_id == basis.source_id
    with pytest.raises(DomainMismatch):
        forward(model, Field(good.values, domain_id="0" * 64))
    with pytest.raises(DimensionMismatch):
        forward(model, Field(rng.standard_normal((7, 1))))
    with pytest.raises(DimensionMismatch):
        forward(model, Field(rng.standard_normal((basis.n_x, 2))))


def test_forward_batch_consistent_with_single(rng):
    from norm.operator import _forward_batch

    basis = make_basis(5, 6)
    model = build_model(ModelSpec(wiring="same", d_a=2, d_v=3, d_u=2,
                                  n_layers=2, basis_in=basis, seed=3))
    A = rng.standard_normal((4, basis.n_x, 2))
    U, _ = _forward_batch(model, A)
    for i in range(4):
        u = forward(model, Field(A[i]))
        assert np.abs(U[i] - u.values).max() < 1e-14


def test_node_permutation_equivariance(rng):
    basis = make_basis(5, 5)
    model = build_model(ModelSpec(wiring="same", d_a=1, d_v=3, d_u=1,
                                  n_layers=2, basis_in=basis, seed=2))
    perm = rng.permutation(basis.n_x)
    permuted = SpectralBasis(
        kind=basis.kind,
        modes=basis.modes[perm],
        eigenvalues=basis.eigenvalues,
        pinv=basis.pinv[:, perm],
        source_id="11" * 32,
    )
    model_p = rebind(model, permuted)
    a = rng.standard_normal((basis.n_x, 1))
    u = forward(model, Field(a)).values
    u_p = forward(model_p, Field(a[perm])).values
    assert np.abs(u_p - u[perm]).max() < 1e-12


def test_heat_semigroup_exactly_representable(rng):
    mesh = grid_mesh(6)
    basis = lbo_basis(cotangent_stiffness(mesh), lumped_mass(mesh),
                      mesh.n_vertices, source_id=mesh.content_hash())
    t = 0.03
    spec = ModelSpec(wiring="same", d_a=1, d_v=1, d_u=1, n_layers=1,
                     basis_in=basis, seed=0, p_hidden=None, q_hidden=None)
    model = build_model(spec)
    model.p.w1[:] = 1.0
    model.p.b1[:] = 0.0
    model.q.w1[:] = 1.0
    model.q.b1[:] = 0.0
    lay = model.layers[0]
    lay.W[:] = 0.0
    lay.b[:] = 0.0
    lay.R[:, 0, 0] = np.exp(-t * basis.eigenvalues)
    a = rng.standard_normal(mesh.n_vertices)
    got = forward(model, Field(a)).values[:, 0]
    want = heat_semigroup_target(basis, a, t)
    assert np.abs(got - want).max() < 1e-10


# -- wiring shapes ----------------------------------------------------------------

def test_cross_wiring_output_domain(rng):
    b_in, b_out = make_basis(5, 4), make_basis(4, 4)
    model = build_model(ModelSpec(wiring="cross", d_a=1, d_v=3, d_u=2,
                                  n_layers=3, basis_in=b_in, basis_out=b_out,
                                  seed=1))
    u = forward(model, Field(rng.standard_normal((b_in.n_x, 1)),
                             domain_id=b_in.source_id))
    assert u.values.shape == (b_out.n_x, 2)
    assert u.domain_id == b_out.source_id


def test_temporal_wiring_output_shape(rng):
    bt = fourier_basis(12, 5)
    by = make_basis(4, 6)
    model = build_model(ModelSpec(wiring="temporal", d_a=1, d_v=3, d_u=1,
                                  n_layers=3, basis_time=bt, basis_out=by,
                                  seed=4))
    u = forward(model, Field(rng.standard_normal((12, 1)),
                             domain_id=bt.source_id))
    # spatial-major rows: entry (t, y) lives at row t * n_y + y
    assert u.values.shape == (12 * by.n_x, 1)


# -- gradients ---------------------------------------------------------------------

def test_gradcheck_same_wiring(rng):
    basis = make_basis(8, 8)
    model = build_model(ModelSpec(wiring="same", d_a=1, d_v=4, d_u=1,
                                  n_layers=2, basis_in=basis, seed=0))
    a = rng.standard_normal((basis.n_x, 1))
    assert gradcheck(model, a, n_params=30, seed=0) < 1e-5


def test_gradcheck_cross_wiring(rng):
    b_in, b_out = make_basis(5, 4), make_basis(4, 4)
    model = build_model(ModelSpec(wiring="cross", d_a=2, d_v=3, d_u=1,
                                  n_layers=2, basis_in=b_in, basis_out=b_out,
                                  seed=5))
    a = rng.standard_normal((b_in.n_x, 2))
    assert gradcheck(model, a, n_params=25, seed=1) < 1e-5


def test_gradcheck_temporal_wiring(rng):
    bt = fourier_basis(10, 3)
    by = make_basis(4, 5)
    model = build_model(ModelSpec(wiring="temporal", d_a=1, d_v=3, d_u=1,
                                  n_layers=3, basis_time=bt, basis_out=by,
                                  seed=6))
    a = rng.standard_normal((10, 1))
    assert gradcheck(model, a, n_params=25, seed=2) < 1e-4


def test_input_gradient_matches_finite_differences(rng):
    from norm.operator import backward

    basis = make_basis(4, 4)
    model = build_model(ModelSpec(wiring="same", d_a=1, d_v=3, d_u=1,
                                  n_layers=2, basis_in=basis, seed=9))
    a = rng.standard_normal((basis.n_x, 1))
    G = rng.standard_normal((basis.n_x, 1))
    _, dA = backward(model, Field(a), G)
    step = 1e-6
    for idx in [(0, 0), (7, 0), (24, 0)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += step
        am[idx] -= step
        sp = float((forward(model, Field(ap)).values * G).sum())
        sm = float((forward(model, Field(am)).values * G).sum())
        fd = (sp - sm) / (2 * step)
        assert abs(dA[idx] - fd) / max(abs(fd), 1e-8) < 1e-6


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_roundtrip_same(tmp_path, rng):
    basis = make_basis(5, 5)
    model = build_model(ModelSpec(wiring="same", d_a=1, d_v=3, d_u=1,
                                  n_layers=2, basis_in=basis, seed=0))
    model.normalizer = Normalizer(
        mode="global_per_channel",
        in_mean=np.array([0.5]), in_scale=np.array([2.0]),
        out_mean=np.array([-1.0]), out_scale=np.array([0.25]),
    )
    path = tmp_path / "ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    for (n1, a1), (n2, a2) in zip(model.parameters(), back.parameters()):
        assert n1 == n2
        assert np.array_equal(a1, a2)
    assert back.normalizer.mode == "global_per_channel"
    assert np.array_equal(back.normalizer.in_scale, [2.0])
    a = Field(rng.standard_normal((basis.n_x, 1)))
    assert np.array_equal(forward(model, a).values, forward(back, a).values)


def test_checkpoint_roundtrip_cross(tmp_path, rng):
    b_in, b_out = make_basis(5, 4), make_basis(4, 4)
    model = build_model(ModelSpec(wiring="cross", d_a=1, d_v=2, d_u=1,
                                  n_layers=2, basis_in=b_in, basis_out=b_out,
                                  seed=8))
    path = tmp_path / "ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.wiring == "cross"
    a = Field(rng.standard_normal((b_in.n_x, 1)))
    assert np.array_equal(forward(model, a).values, forward(back, a).values)


def test_checkpoint_rejects_corrupt_params(tmp_path):
    basis = make_basis(4, 3)
    model = build_model(ModelSpec(wiring="same", d_a=1, d_v=2, d_u=1,
                                  n_layers=1, basis_in=basis, seed=0))
    path = tmp_path / "ckpt"
    save_checkpoint(model, path)
    blob = (path / "params.bin").read_bytes()
    (path / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(ParseError):
        load_checkpoint(path)
    (path / "params.bin").write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ParseError):
        load_checkpoint(path)


# -- rebind ----------------------------------------------------------------------

def test_rebind_requires_matching_mode_count():
    basis = make_basis(4, 4)
    model = build_model(ModelSpec(wiring="same", d_a=1, d_v=2, d_u=1,
                                  n_layers=1, basis_in=basis, seed=0))
    with pytest.raises(InvalidSpec):
        rebind(model, make_basis(5, 3))


def test_rebind_shares_parameters():
    model = build_model(ModelSpec(wiring="same", d_a=1, d_v=2, d_u=1,
                                  n_layers=2, basis_in=make_basis(4, 4),
                                  seed=0))
    fine = make_basis(8, 4)
    bound = rebind(model, fine)
    assert bound.layers[0].W is model.layers[0].W
    assert bound.layers[0].basis_in is fine
    assert bound.param_count() == model.param_count()

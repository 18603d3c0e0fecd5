"""Random fields, Darcy and heat problem generators, dataset files.

Reference computations used below:

* KL sampling with covariance (-Lap + 25)^(-2): the coefficient of the
  constant mode (eigenvalue 0) is N(0, 25^-2), so its standard deviation
  is 0.04.
* threshold_coefficient maps mu >= 0 to 12 and mu < 0 to 4.
* Patch test: with a = 1 and zero source, piecewise-linear FEM reproduces
  the harmonic function u = x exactly (it lies in the trial space).
* Poisson oracle: -Lap u = 1 on the unit square, u = 0 on the boundary, has
  u(1/2, 1/2) = sum over odd m, n of
  16 sin(m pi / 2) sin(n pi / 2) / (pi^4 m n (m^2 + n^2)) ~= 0.07367,
  which is also the maximum of u.
* exp(-t1 L) exp(-t2 L) = exp(-(t1 + t2) L), and t = 0 is the identity on
  fields inside the basis span.
"""

import numpy as np
import pytest

from norm.datagen import (
    BoundaryCondition,
    GrfSpec,
    darcy_solve,
    grf_sample,
    heat_semigroup_target,
    load_dataset,
    make_darcy_dataset,
    make_heat_dataset,
    notch_boundary_conditions,
    save_dataset,
    threshold_coefficient,
)
from norm.errors import (
    BoundaryNotFound,
    InvalidModeCount,
    NonPositiveCoefficient,
    ParseError,
)
from norm.mesh import (
    boundary_loops,
    cotangent_stiffness,
    grid_mesh,
    lumped_mass,
    notch_mesh,
)
from norm.spectral import lbo_basis


def make_basis(mesh, d_m):
    return lbo_basis(cotangent_stiffness(mesh), lumped_mass(mesh), d_m,
                     source_id=mesh.content_hash())


def poisson_center_series(terms=199):
    val = 0.0
    for m in range(1, terms + 1, 2):
        for n in range(1, terms + 1, 2):
            val += (16.0 * np.sin(m * np.pi / 2) * np.sin(n * np.pi / 2)
                    / (np.pi ** 4 * m * n * (m * m + n * n)))
    return val


# -- random fields -----------------------------------------------------------------

def test_grf_constant_mode_std():
    basis = make_basis(grid_mesh(6), 1)
    spec = GrfSpec(d_m=1, shift=25.0, power=2.0)
    rng = np.random.default_rng(0)
    coeffs = np.array([
        basis.pinv @ grf_sample(basis, spec, rng) for _ in range(4000)
    ]).ravel()
    assert abs(coeffs.std() - 0.04) / 0.04 < 0.05


def test_grf_mode_count_validation():
    basis = make_basis(grid_mesh(4), 3)
    with pytest.raises(InvalidModeCount):
        grf_sample(basis, GrfSpec(d_m=4), np.random.default_rng(0))


def test_grf_is_seed_deterministic():
    basis = make_basis(grid_mesh(5), 6)
    spec = GrfSpec(d_m=6)
    a = grf_sample(basis, spec, np.random.default_rng(42))
    b = grf_sample(basis, spec, np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_threshold_coefficient_values():
    got = threshold_coefficient(np.array([-1.0, 0.0, 2.0]))
    assert np.array_equal(got, [4.0, 12.0, 12.0])
    got = threshold_coefficient(np.array([0.4]), low=1.0, high=3.0,
                                threshold=0.5)
    assert np.array_equal(got, [1.0])
    with pytest.raises(NonPositiveCoefficient):
        threshold_coefficient(np.zeros(3), low=0.0)


# -- darcy solver ------------------------------------------------------------------

def test_darcy_linear_patch_test():
    mesh = grid_mesh(9)
    nodes = np.concatenate(boundary_loops(mesh))
    bc = BoundaryCondition(nodes=nodes, values=mesh.vertices[nodes, 0])
    u = darcy_solve(mesh, np.ones(mesh.n_vertices), 0.0, bc)
    assert np.abs(u - mesh.vertices[:, 0]).max() < 1e-10


def test_darcy_poisson_center_value():
    mesh = grid_mesh(33)
    nodes = np.concatenate(boundary_loops(mesh))
    bc = BoundaryCondition(nodes=nodes, values=np.zeros(nodes.size))
    u = darcy_solve(mesh, np.ones(mesh.n_vertices), 1.0, bc)
    want = poisson_center_series()
    assert abs(u.max() - want) / want < 0.02
    center = np.argmin(((mesh.vertices - 0.5) ** 2).sum(axis=1))
    assert abs(u[center] - want) / want < 0.02


def test_darcy_validation():
    mesh = grid_mesh(5)
    nodes = np.concatenate(boundary_loops(mesh))
    bc = BoundaryCondition(nodes=nodes, values=np.zeros(nodes.size))
    with pytest.raises(NonPositiveCoefficient):
        darcy_solve(mesh, np.zeros(mesh.n_vertices), 1.0, bc)
    with pytest.raises(BoundaryNotFound):
        darcy_solve(mesh, np.ones(mesh.n_vertices), 1.0,
                    BoundaryCondition(nodes=np.zeros(0, dtype=np.int64),
                                      values=np.zeros(0)))


def test_darcy_nodal_source_matches_constant():
    mesh = grid_mesh(7)
    nodes = np.concatenate(boundary_loops(mesh))
    bc = BoundaryCondition(nodes=nodes, values=np.zeros(nodes.size))
    a = np.ones(mesh.n_vertices)
    u1 = darcy_solve(mesh, a, 1.0, bc)
    u2 = darcy_solve(mesh, a, np.ones(mesh.n_vertices), bc)
    assert np.array_equal(u1, u2)


# -- boundary conditions --------------------------------------------------------------

def test_notch_boundary_conditions_profile():
    mesh = notch_mesh(12)
    bc = notch_boundary_conditions(mesh)
    loops = boundary_loops(mesh)
    outer = max(loops, key=lambda lp: np.ptp(mesh.vertices[lp], axis=0).sum())
    by_node = dict(zip(bc.nodes.tolist(), bc.values.tolist()))
    hole_nodes = [n for lp in loops for n in lp.tolist()
                  if n not in set(outer.tolist())]
    assert all(by_node[n] == 0.0 for n in hole_nodes)
    outer_vals = np.array([by_node[n] for n in outer.tolist()])
    assert abs(outer_vals.max() - 0.1) < 5e-3
    assert abs(outer_vals.min() + 0.1) < 5e-3
    start = min(outer.tolist(),
                key=lambda n: (mesh.vertices[n, :2] ** 2).sum())
    assert by_node[start] == 0.0


def test_boundary_condition_shape_validation():
    from norm.errors import DimensionMismatch
    with pytest.raises(DimensionMismatch):
        BoundaryCondition(nodes=np.arange(3), values=np.zeros(2))


# -- dataset generators ----------------------------------------------------------------

def test_make_heat_dataset_properties():
    mesh = grid_mesh(6)
    data = make_heat_dataset(mesh, 6, t=0.05, seed=9, grf_modes=20)
    assert data.inputs.shape == (6, mesh.n_vertices, 1)
    assert data.n_samples == 6
    assert np.array_equal(data.split["train"], np.arange(5))
    assert np.array_equal(data.split["test"], [5])
    assert data.provenance["generator"] == "heat"
    assert data.input_domain_id == mesh.content_hash()
    # the target really is the damped spectral expansion of the input
    basis = make_basis(mesh, mesh.n_vertices)
    want = heat_semigroup_target(basis, data.inputs[0, :, 0], 0.05)
    assert np.abs(data.outputs[0, :, 0] - want).max() < 1e-10


def test_make_heat_dataset_seed_xor_property():
    mesh = grid_mesh(5)
    full = make_heat_dataset(mesh, 4, t=0.02, seed=5, grf_modes=10)
    lone = make_heat_dataset(mesh, 1, t=0.02, seed=5 ^ 3, grf_modes=10)
    assert np.array_equal(full.inputs[3], lone.inputs[0])
    again = make_heat_dataset(mesh, 4, t=0.02, seed=5, grf_modes=10)
    assert np.array_equal(full.inputs, again.inputs)
    assert np.array_equal(full.outputs, again.outputs)


def test_heat_semigroup_composition():
    basis = make_basis(grid_mesh(5), 25)
    rng = np.random.default_rng(1)
    a = basis.decode(rng.standard_normal(25))  # in-span field
    assert np.abs(heat_semigroup_target(basis, a, 0.0) - a).max() < 1e-12
    two_step = heat_semigroup_target(
        basis, heat_semigroup_target(basis, a, 0.03), 0.07)
    one_step = heat_semigroup_target(basis, a, 0.10)
    assert np.abs(two_step - one_step).max() < 1e-12
    with pytest.raises(ValueError):
        heat_semigroup_target(basis, a, -0.1)


def test_make_darcy_dataset_properties():
    mesh = notch_mesh(10)
    grf_basis = make_basis(mesh, 12)
    data = make_darcy_dataset(mesh, grf_basis, 3, seed=4)
    vals = np.unique(data.inputs)
    assert set(vals.tolist()) <= {4.0, 12.0}
    assert data.provenance["generator"] == "darcy"
    assert data.provenance["bc"] == "default-notch"
    # sample 0 reproduces from its seed
    rng = np.random.default_rng(4 ^ 0)
    mu = grf_sample(grf_basis, GrfSpec(d_m=12, shift=25.0, power=2.0), rng)
    a = threshold_coefficient(mu)
    assert np.array_equal(data.inputs[0, :, 0], a)
    u = darcy_solve(mesh, a, 1.0, notch_boundary_conditions(mesh))
    assert np.array_equal(data.outputs[0, :, 0], u)


# -- dataset files ------------------------------------------------------------------

def test_dataset_file_roundtrip(tmp_path):
    mesh = grid_mesh(5)
    data = make_heat_dataset(mesh, 4, t=0.01, seed=2, grf_modes=8)
    path = tmp_path / "heat.nds"
    save_dataset(data, path)
    back = load_dataset(path)
    assert np.array_equal(back.inputs, data.inputs)
    assert np.array_equal(back.outputs, data.outputs)
    assert back.input_domain_id == data.input_domain_id
    assert np.array_equal(back.split["test"], data.split["test"])
    assert back.provenance == data.provenance
    save_dataset(back, tmp_path / "again.nds")
    assert (tmp_path / "again.nds").read_bytes() == path.read_bytes()


def test_dataset_file_rejects_corruption(tmp_path):
    mesh = grid_mesh(4)
    data = make_heat_dataset(mesh, 2, t=0.01, seed=0, grf_modes=4)
    path = tmp_path / "d.nds"
    save_dataset(data, path)
    blob = path.read_bytes()
    bad = tmp_path / "bad.nds"
    bad.write_bytes(b"NOTADSET" + blob[8:])
    with pytest.raises(ParseError, match="magic"):
        load_dataset(bad)
    bad.write_bytes(blob[:-16])
    with pytest.raises(ParseError, match="size"):
        load_dataset(bad)

import numpy as np
import pytest

from metamg.discretization import PdeSpec, assemble_matrix
from metamg.grid import ContractError, conv, prolong, restrict
from metamg.mgnet import (
    CheckpointError, MetaMgNetDirect, MetaMgNetSC, PdeMgNet, adaptive_pool_matrix, learned_solve,
    load_checkpoint, meta_direct_smoother, meta_mgnet_iterate, meta_nn_sc, meta_sc_smoother,
    pde_mgnet_forward, save_checkpoint,
)
from metamg.multigrid import Hierarchy, MgConfig, energy_error, mg_cycle, solve
from metamg.smoothers import SmootherSpec, jacobi_apply, krylov_sc_apply, sc_apply


def field(n, seed=0, batch=None):
    shape = (1, n - 1, n - 1) if batch is None else (batch, 1, n - 1, n - 1)
    return np.random.default_rng(seed).standard_normal(shape)


def jacobi_net(hier, nu, omega=2 / 3):
    net = PdeMgNet(levels=hier.depth, nu=nu)
    centers = [hier.operators[0][l].stencil.center() for l in range(hier.depth)]
    net.init_params([c * (2 / 3) / omega for c in centers])
    return net


def test_zero_kernels_give_coarse_correction_only():
    hier = Hierarchy.from_pde(PdeSpec("aniso2d", (0.1, 0.2), 16), 2)
    net = PdeMgNet(levels=2, nu=(2, 1))
    net.params = {k: np.zeros(s) for k, s in net.param_shapes().items()}
    f = field(16)
    coarse = hier.coarse_solve(restrict(hier.R, f)[None])[0]
    np.testing.assert_allclose(pde_mgnet_forward(f, net, hier), prolong(hier.P, coarse), atol=1e-13)


def test_jacobi_kernels_reproduce_classical_cycle():
    hier = Hierarchy.from_pde(PdeSpec("aniso2d", (1e-2, 0.0), 32), 3)
    net = jacobi_net(hier, (2, 1, 1), omega=0.8)
    f = field(32)
    expected = mg_cycle(f, hier, MgConfig(levels=3, nu=(2, 1, 1), smoother=SmootherSpec("jacobi", omega=0.8)))
    np.testing.assert_allclose(pde_mgnet_forward(f, net, hier), expected, rtol=0, atol=1e-13 * np.abs(expected).max())


def test_jacobi_kernels_reproduce_iterates():
    hier = Hierarchy.from_pde(PdeSpec("aniso2d", (0.1, 0.0), 32), 3)
    net = jacobi_net(hier, (2, 1, 1))
    config = MgConfig(levels=3, nu=(2, 1, 1), smoother=SmootherSpec("jacobi"))
    f = field(32, 1)
    ours, theirs = [], []
    _, r1 = learned_solve(net, hier, f, config, callback=lambda t, u: ours.append(u.copy()))
    _, r2 = solve(hier, f, config, callback=lambda t, u: theirs.append(u.copy()))
    assert r1.iterations == r2.iterations
    for a, b in zip(ours, theirs):
        assert np.abs(a - b).max() <= 1e-12 * np.abs(b).max()


def test_pde_mgnet_is_linear_in_rhs():
    hier = Hierarchy.from_pde(PdeSpec("aniso2d", (0.3, 0.1), 16), 3)
    net = jacobi_net(hier, (2, 1, 1))
    rng = np.random.default_rng(2)
    net.params = {k: v + 0.01 * rng.standard_normal(v.shape) for k, v in net.params.items()}
    f, g = field(16, 3), field(16, 4)
    lhs = pde_mgnet_forward(2.0 * f - 3.0 * g, net, hier)
    rhs = 2.0 * pde_mgnet_forward(f, net, hier) - 3.0 * pde_mgnet_forward(g, net, hier)
    assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(rhs).max()


def test_pde_mgnet_shape_checks():
    hier = Hierarchy.from_pde(PdeSpec("aniso2d", (1.0, 0.0), 16), 3)
    net = PdeMgNet(levels=2, nu=(1, 1)).init_params([1.0, 1.0])
    with pytest.raises(ContractError):
        pde_mgnet_forward(field(16), net, hier)
    net = PdeMgNet(levels=3, nu=(1, 1, 1)).init_params([1.0] * 3)
    net.params["kernel_l0_s0"] = np.zeros((1, 1, 5, 5))
    with pytest.raises(ContractError):
        pde_mgnet_forward(field(16), net, hier)


def test_meta_basis_layout():
    model = MetaMgNetSC().init_params(0)
    assert model.basis_size == 10
    assert model.gamma_size == 49 * (3 + 12 + 21)
    K = PdeSpec("aniso2d", (1e-2, 0.0), 16).stencil()
    r = field(16, 5)
    G = meta_nn_sc(r, K, model)
    assert G.shape == (10, 15, 15)
    np.testing.assert_array_equal(G[0], r[0])
    np.testing.assert_array_equal(G, meta_nn_sc(r, K, model))


def test_zero_hypernetwork_reduces_to_steepest_descent():
    model = MetaMgNetSC().zero_params()
    K = PdeSpec("aniso2d", (0.1, 0.5), 16).stencil()
    r = field(16, 6)
    G = meta_nn_sc(r, K, model)
    assert not np.any(G[1:])
    np.testing.assert_allclose(meta_sc_smoother(K, r, model), krylov_sc_apply(K, r, 0), atol=1e-14)


def test_meta_sc_orthogonality_and_scaling():
    model = MetaMgNetSC().init_params(3)
    K = PdeSpec("aniso2d", (1e-3, 0.9), 16).stencil()
    r = field(16, 7)
    e = meta_sc_smoother(K, r, model)
    G = meta_nn_sc(r, K, model).reshape(10, -1)
    resid = (r - conv(K, e)).ravel()
    assert np.abs(G @ resid).max() <= 1e-9 * np.abs(G).max() * np.abs(r).sum()
    np.testing.assert_allclose(sc_apply(K, G.reshape(10, 15, 15), r), e, atol=1e-12)
    e2 = meta_sc_smoother(K, 7.5 * r, model)
    assert np.abs(e2 - 7.5 * e).max() <= 1e-11 * np.abs(7.5 * e).max()


def test_direct_smoother_zero_weights_give_zero_kernel():
    model = MetaMgNetDirect().zero_params()
    K = PdeSpec("aniso2d", (1.0, 0.0), 16).stencil()
    kernel, e = meta_direct_smoother(K, field(16), model)
    assert not np.any(kernel) and not np.any(e)


def test_direct_kernel_ignores_residual_scale():
    model = MetaMgNetDirect().init_params(1, center=2.0)
    K = PdeSpec("aniso2d", (1e-2, 0.0), 16).stencil()
    r = field(16, 8)
    k1, e1 = meta_direct_smoother(K, r, model)
    k2, e2 = meta_direct_smoother(K, 1e3 * r, model)
    np.testing.assert_allclose(k2, k1, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(e2, 1e3 * e1, rtol=1e-10, atol=1e-10)


def test_direct_bias_replicates_jacobi():
    K = PdeSpec("aniso2d", (1e-2, 0.0), 16).stencil()
    model = MetaMgNetDirect().zero_params()
    model.params["fc3_b"][24] = (2 / 3) / K.center()
    r = field(16, 9)
    _, e = meta_direct_smoother(K, r, model)
    np.testing.assert_allclose(e, jacobi_apply(K, r, 2 / 3), atol=1e-15)
    _, e0 = meta_direct_smoother(K, np.zeros_like(r), model)
    assert not np.any(e0)


def test_adaptive_pool_rows_average():
    for n in (3, 7, 15, 63):
        M = adaptive_pool_matrix(n, 8)
        np.testing.assert_allclose(M.sum(axis=1), 1.0)
        assert np.all(M.sum(axis=0) > 0)


def test_untrained_meta_converges_on_poisson():
    hier = Hierarchy.from_pde(PdeSpec("aniso2d", (1.0, 0.0), 64), 4)
    _, report = meta_mgnet_iterate(field(64), hier, MetaMgNetSC().zero_params(), MgConfig(levels=4, nu=(2, 1, 1, 1)))
    assert report.converged


@pytest.mark.parametrize("seed", [0, 1])
def test_meta_iteration_energy_error_non_increasing(seed):
    spec = PdeSpec("aniso2d", (1.0, 0.0), 16)
    hier = Hierarchy.from_pde(spec, 3)
    M = assemble_matrix(spec.stencil(), spec.extent).toarray()
    f = field(16, seed)
    exact = np.linalg.solve(M, f.ravel())
    errors = [energy_error(M, exact, np.zeros_like(exact))]
    model = MetaMgNetSC().init_params(seed)
    meta_mgnet_iterate(f, hier, model, MgConfig(levels=3, nu=(2, 1, 1), max_iters=30),
                       callback=lambda t, u: errors.append(energy_error(M, exact, u)))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(errors, errors[1:]))


def test_three_dimensional_meta_model():
    model = MetaMgNetSC.default_3d().init_params(0)
    assert model.basis_size == 4
    hier = Hierarchy.from_pde(PdeSpec("aniso3d", (1.0, 0.1, 0.01), 8), 2)
    f = np.random.default_rng(0).standard_normal((1, 7, 7, 7))
    _, report = meta_mgnet_iterate(f, hier, model, MgConfig(levels=2, nu=(2, 1), max_iters=200))
    assert report.converged


@pytest.mark.parametrize("model", [
    PdeMgNet(levels=3, nu=(2, 1, 1)).init_params([2.0, 2.0, 2.0]),
    MetaMgNetSC().init_params(4),
    MetaMgNetDirect().init_params(5, center=2.5),
])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, {"seed": 3})
    loaded, meta = load_checkpoint(path)
    assert type(loaded) is type(model) and meta["seed"] == "3"
    for name, value in model.params.items():
        assert loaded.params[name].tobytes() == value.tobytes()
    save_checkpoint(tmp_path / "again.ckpt", loaded, {"seed": 3})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_and_truncated_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    path = tmp_path / "ok.ckpt"
    save_checkpoint(path, MetaMgNetSC().init_params(0))
    bad.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)

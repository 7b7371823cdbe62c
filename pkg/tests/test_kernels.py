"""Fused-kernel backends: numpy reference vs numba, and structural
properties that must hold in either one."""

import itertools

import numpy as np
import pytest

from wifimode import kernels, nn
from wifimode.model import ArchitectureSpec, Model, ModelConfig, init_params

HAS_NUMBA = "numba" in kernels.available_backends()

needs_numba = pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")


def kernel_args(width=10, blocks=2, lpb=2, seed=0, batch=8, n_in=15):
    arch = ArchitectureSpec(blocks, lpb)
    p = init_params(arch, width, seed, n_in)
    rng = np.random.default_rng(seed + 1)
    X = rng.random((batch, n_in))
    y = rng.integers(0, 3, batch)
    return p, X, np.ascontiguousarray(y, dtype=np.int64), arch


def run_forward_backward(backend, p, X, y, lpb, use_bn, use_residual,
                         update_running=False, masks=None, scale=1.0):
    use_dropout = masks is not None
    if masks is None:
        masks = np.empty((0, X.shape[0], p.Wh.shape[1]))
    return backend.forward_backward(
        X, y, p.Wi, p.bi, p.Wh, p.bh, p.gamma, p.beta, p.run_mean, p.run_var,
        p.Wo, p.bo, lpb, use_bn, use_residual, update_running, nn.BN_MOMENTUM,
        masks, scale, use_dropout)


@needs_numba
@pytest.mark.parametrize("use_bn,use_dropout,use_residual,lpb", list(
    itertools.product([False, True], [False, True], [False, True], [2, 3])))
def test_backends_agree(use_bn, use_dropout, use_residual, lpb):
    p, X, y, arch = kernel_args(width=10, blocks=2, lpb=lpb, batch=8)
    n_sites = arch.block_count * (lpb - 1)
    masks = None
    scale = 1.0
    if use_dropout:
        masks = (np.random.default_rng(3).random((n_sites, 8, 10)) >= 0.5).astype(float)
        scale = 2.0

    outs = {}
    for name in ("numpy", "numba"):
        backend = kernels._BACKENDS[name]
        pc = p.copy()
        res = run_forward_backward(backend, pc, X, y, lpb, use_bn, use_residual,
                                   update_running=True, masks=masks, scale=scale)
        ev = backend.forward_eval(X, pc.Wi, pc.bi, pc.Wh, pc.bh, pc.gamma, pc.beta,
                                  pc.run_mean, pc.run_var, pc.Wo, pc.bo,
                                  lpb, use_bn, use_residual)
        outs[name] = (res, ev, pc)

    res_np, ev_np, p_np = outs["numpy"]
    res_nb, ev_nb, p_nb = outs["numba"]
    assert res_np[0] == pytest.approx(res_nb[0], rel=1e-12)
    assert res_np[1] == res_nb[1]
    for a, b in zip(res_np[2:], res_nb[2:]):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(ev_np, ev_nb, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(p_np.run_mean, p_nb.run_mean, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(p_np.run_var, p_nb.run_var, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("backend_name", ["numpy", "numba"])
def test_zeroed_blocks_are_exact_identity(backend_name):
    """With BN off and all residual-branch weights zero, the block stack
    must pass its input through unchanged, bit for bit."""
    if backend_name == "numba" and not HAS_NUMBA:
        pytest.skip("numba unavailable")
    backend = kernels._BACKENDS[backend_name]
    p, X, y, arch = kernel_args(width=10, blocks=4, lpb=3, batch=6)
    p.Wh[:] = 0.0
    p.bh[:] = 0.0
    logits = backend.forward_eval(X, p.Wi, p.bi, p.Wh, p.bh, p.gamma, p.beta,
                                  p.run_mean, p.run_var, p.Wo, p.bo,
                                  3, False, True)
    stem = X @ p.Wi.T + p.bi
    expected = stem @ p.Wo.T + p.bo
    assert np.max(np.abs(logits - expected)) == 0.0


@pytest.mark.parametrize("backend_name", ["numpy", "numba"])
def test_residual_flag_off_breaks_identity(backend_name):
    if backend_name == "numba" and not HAS_NUMBA:
        pytest.skip("numba unavailable")
    backend = kernels._BACKENDS[backend_name]
    p, X, _, _ = kernel_args(width=10, blocks=2, lpb=2, batch=4)
    p.Wh[:] = 0.0
    p.bh[:] = 0.0
    logits = backend.forward_eval(X, p.Wi, p.bi, p.Wh, p.bh, p.gamma, p.beta,
                                  p.run_mean, p.run_var, p.Wo, p.bo, 2, False, False)
    # without shortcuts a zeroed stack collapses to the head bias
    np.testing.assert_array_equal(logits, np.tile(p.bo, (4, 1)))


def test_running_stats_update_only_when_asked():
    backend = kernels._BACKENDS["numpy"]
    p, X, y, _ = kernel_args(width=5, blocks=1, lpb=2)
    before = (p.run_mean.copy(), p.run_var.copy())
    run_forward_backward(backend, p, X, y, 2, True, True, update_running=False)
    np.testing.assert_array_equal(p.run_mean, before[0])
    np.testing.assert_array_equal(p.run_var, before[1])
    run_forward_backward(backend, p, X, y, 2, True, True, update_running=True)
    assert not np.array_equal(p.run_mean, before[0])
    assert not np.array_equal(p.run_var, before[1])


def test_train_vs_eval_batchnorm_differ():
    backend = kernels._BACKENDS["numpy"]
    p, X, y, _ = kernel_args(width=5, blocks=1, lpb=2)
    ev = backend.forward_eval(X, p.Wi, p.bi, p.Wh, p.bh, p.gamma, p.beta,
                              p.run_mean, p.run_var, p.Wo, p.bo, 2, True, True)
    loss_eval = nn.softmax_xent(ev, y)[0]
    loss_train = run_forward_backward(backend, p, X, y, 2, True, True)[0]
    assert loss_eval != pytest.approx(loss_train, abs=1e-9)


def test_dropout_mask_routes_forward_and_backward():
    backend = kernels._BACKENDS["numpy"]
    p, X, y, arch = kernel_args(width=6, blocks=2, lpb=2, batch=4)
    n_sites = arch.block_count
    all_on = np.ones((n_sites, 4, 6))
    out_plain = run_forward_backward(backend, p.copy(), X, y, 2, False, True)
    out_masked = run_forward_backward(backend, p.copy(), X, y, 2, False, True,
                                      masks=all_on, scale=1.0)
    # all-ones mask at scale 1 is the no-dropout network
    assert out_plain[0] == out_masked[0]
    for a, b in zip(out_plain[2:], out_masked[2:]):
        np.testing.assert_array_equal(a, b)

    half = all_on.copy()
    half[0, :, :3] = 0.0
    out_half = run_forward_backward(backend, p.copy(), X, y, 2, False, True,
                                    masks=half, scale=2.0)
    assert out_half[0] != pytest.approx(out_plain[0])


@needs_numba
def test_adam_backends_agree():
    # moments match exactly; the fused update may differ by an ulp in
    # the division order, so the parameter gets a tight tolerance
    rng = np.random.default_rng(0)
    p1 = rng.normal(size=257)
    g = rng.normal(size=257)
    m1, v1 = np.zeros(257), np.zeros(257)
    p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
    for t in range(1, 6):
        kernels._BACKENDS["numpy"].adam_update(p1, g, m1, v1, t, 1e-3, 0.9, 0.999, 1e-8)
        kernels._BACKENDS["numba"].adam_update(p2, g, m2, v2, t, 1e-3, 0.9, 0.999, 1e-8)
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(v1, v2)
    np.testing.assert_allclose(p1, p2, rtol=1e-12, atol=0)


class TestBackendSelection:
    def test_env_flag(self, monkeypatch):
        monkeypatch.setenv(kernels.ENV_VAR, "0")
        assert kernels.backend_name() == "numpy"
        if HAS_NUMBA:
            monkeypatch.setenv(kernels.ENV_VAR, "1")
            assert kernels.backend_name() == "numba"
        monkeypatch.setenv(kernels.ENV_VAR, "auto")
        assert kernels.backend_name() in kernels.available_backends()

    def test_bad_env_value(self, monkeypatch):
        monkeypatch.setenv(kernels.ENV_VAR, "fastest")
        with pytest.raises(ValueError):
            kernels.backend_name()

    def test_override_context(self):
        with kernels.use_backend("numpy") as backend:
            assert backend is kernels._BACKENDS["numpy"]
            assert kernels.backend_name() == "numpy"

    def test_unknown_override(self):
        with pytest.raises(ValueError):
            kernels.set_backend("cuda")


def test_gradcheck_through_both_backends():
    """The fused kernels differentiate correctly under every flag combo;
    spots subtle cache/index bugs that equivalence tests alone can miss."""
    from wifimode.model import gradcheck_model
    rng = np.random.default_rng(11)
    X = rng.random((6, 15))
    y = rng.integers(0, 3, 6)
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            for bn in (False, True):
                model = Model.build(ModelConfig(5, bn, False),
                                    ArchitectureSpec(2, 2), seed=2)
                report = gradcheck_model(model, X, y, max_entries_per_param=25)
                assert report.passed, f"{name} bn={bn}: {report.max_rel_err}"

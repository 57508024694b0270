import numpy as np
import pytest
import torch

from hetdiff.denoiser import DenoiserQuery, evaluate, jacobian_finite_diff
from hetdiff.errors import NumericDomainError
from hetdiff.net import (DTYPE, LinearDenoiser, TorchDenoiser, backward, cond_tensors, load_denoiser,
                         save_denoiser, step_embedding)
from hetdiff.scene import CondScene

from helpers import random_cond, random_query, rel_err, tiny_net


def test_zero_heads():
    den = TorchDenoiser(tiny_net(zero_heads=True))
    q = random_query(np.random.default_rng(0), 4, 3)
    out = den.evaluate(q)
    assert np.all(out.eps_mu == 0)
    assert np.all(out.eps_cov[..., :2] == 0.5) and np.all(out.eps_cov[..., 2] == 0)


def test_zero_heads_give_zero_jacobian():
    den = TorchDenoiser(tiny_net(zero_heads=True))
    q = random_query(np.random.default_rng(1), 3, 2)
    assert np.all(jacobian_finite_diff(den, q) == 0)


def test_output_boxes(rng):
    for bivariate in (True, False):
        den = TorchDenoiser(tiny_net(3, bivariate=bivariate))
        for _ in range(10):
            q = random_query(rng, 4, 3)
            q.x_s *= 10
            c = den.evaluate(q).eps_cov
            assert np.all((c[..., :2] > 0) & (c[..., :2] < 1))
            assert np.all(np.abs(c[..., 2]) < 1)
            if not bivariate:
                assert np.all(c[..., 2] == 0)


def test_nan_names_layer(rng):
    den = TorchDenoiser(tiny_net())
    q = random_query(rng, 3, 2)
    q.x_s[1, 1, 0] = np.nan
    with pytest.raises(NumericDomainError, match="embed"):
        evaluate(den, q)


def test_determinism(rng):
    den = TorchDenoiser(tiny_net(1))
    q = random_query(rng, 4, 3, "diagonal")
    a, b = den.evaluate(q), den.evaluate(q)
    assert np.array_equal(a.eps_mu, b.eps_mu) and np.array_equal(a.jac_diag, b.jac_diag)


def permute(q, perm):
    c = q.cond
    cond = CondScene(c.observed[:, perm], c.mask[:, perm], c.roles[perm], c.scene_id)
    return DenoiserQuery(q.x_s[:, perm], q.s, cond)


def test_agent_permutation_equivariance(rng):
    den = TorchDenoiser(tiny_net(2))
    for _ in range(10):
        q = random_query(rng, 4, 3)
        perm = rng.permutation(3)
        a, b = den.evaluate(q), den.evaluate(permute(q, perm))
        np.testing.assert_allclose(b.eps_mu, a.eps_mu[:, perm], atol=1e-9)
        np.testing.assert_allclose(b.eps_cov, a.eps_cov[:, perm], atol=1e-9)


def test_time_reversal_with_mirrored_filters(rng):
    net = tiny_net(4)
    with torch.no_grad():
        for blk in net.blocks:
            tm = blk.mix.temporal
            tm.w_bwd.load_state_dict(tm.w_fwd.state_dict())
            tm.decay_bwd.copy_(tm.decay_fwd)
    den = TorchDenoiser(net)
    q = random_query(rng, 5, 3)
    c = q.cond
    rq = DenoiserQuery(q.x_s[::-1].copy(), q.s,
                       CondScene(c.observed[::-1].copy(), c.mask[::-1].copy(), c.roles, c.scene_id))
    a, b = den.evaluate(q), den.evaluate(rq)
    np.testing.assert_allclose(b.eps_mu, a.eps_mu[::-1], atol=1e-12)
    # without mirroring the outputs are not time-symmetric
    den2 = TorchDenoiser(tiny_net(4))
    assert not np.allclose(den2.evaluate(rq).eps_mu, den2.evaluate(q).eps_mu[::-1], atol=1e-6)


def test_backward_matches_finite_differences(rng):
    net = tiny_net(5)
    q = random_query(rng, 3, 2)
    up_mu, up_cov = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 3))
    pg, gx = backward(net, q, up_mu, up_cov)

    def f(x=None):
        obs, mask, roles = cond_tensors(q.cond)
        with torch.no_grad():
            mu, cov = net(torch.as_tensor((q.x_s if x is None else x)[None]), q.s, obs, mask, roles)
        return float((mu[0].numpy() * up_mu).sum() + (cov[0].numpy() * up_cov).sum())

    h = 1e-4
    fd = np.zeros_like(q.x_s)
    for idx in np.ndindex(q.x_s.shape):
        e = np.zeros_like(q.x_s)
        e[idx] = h
        fd[idx] = (f(q.x_s + e) - f(q.x_s - e)) / (2 * h)
    assert rel_err(gx, fd) < 1e-3
    params = dict(net.named_parameters())
    for name in ("embed.weight", "blocks.0.mix.temporal.decay_fwd", "blocks.1.mix.social.q.weight",
                 "head_std.weight", "head_rho.bias"):
        p = params[name]
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(5, flat.numel()), replace=False):
            old = flat[i].item()
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            assert rel_err(pg[name].reshape(-1)[i], (fp - fm) / (2 * h)) < 1e-3, name


def test_linear_gradient_closed_form(rng):
    lin = LinearDenoiser(50)
    with torch.no_grad():
        lin.weight.normal_()
    cond = random_cond(rng, 3, 2)
    x = rng.standard_normal((3, 2, 2))
    delta = rng.standard_normal((3, 2, 2))
    pg, gx = backward(lin, DenoiserQuery(x, 7, cond), delta)
    X, D = x.reshape(-1, 2), delta.reshape(-1, 2)
    np.testing.assert_allclose(pg["weight"][6], D.T @ X, atol=1e-12)
    np.testing.assert_allclose(pg["bias"][6], D.sum(0), atol=1e-12)
    assert not pg["weight"][5].any()
    W = lin.weight[6].detach().numpy()
    np.testing.assert_allclose(gx, delta @ W, atol=1e-12)


@pytest.mark.parametrize("method", ["exact", "two_pass"])
def test_state_local_jacobian(rng, method):
    # with mixing off, the scene Jacobian is block-diagonal over states
    net = tiny_net(6, temporal_mixing=False, social_mixing=False)
    den = TorchDenoiser(net)
    q = random_query(rng, 3, 2)
    obs, mask, roles = cond_tensors(q.cond)
    full = torch.autograd.functional.jacobian(
        lambda x: net(x[None], q.s, obs, mask, roles)[0][0], torch.as_tensor(q.x_s)).numpy()
    J = full.reshape(6, 2, 6, 2)
    off = J.copy()
    for i in range(6):
        off[i, :, i, :] = 0
    assert np.all(off == 0)
    out = den.evaluate(DenoiserQuery(q.x_s, q.s, q.cond, "full", method))
    blocks = np.stack([J[i, :, i, :] for i in range(6)]).reshape(3, 2, 2, 2)
    np.testing.assert_allclose(out.jac_full, blocks, atol=1e-12)


def test_exact_jacobian_matches_finite_differences(rng):
    den = TorchDenoiser(tiny_net(7))
    for _ in range(3):
        q = random_query(rng, 3, 2, "full", jacobian_method="exact")
        out = den.evaluate(q)
        fd = jacobian_finite_diff(den, q, 1e-4, full=True)
        assert rel_err(out.jac_full, fd) < 1e-3
        diag = den.evaluate(DenoiserQuery(q.x_s, q.s, q.cond, "diagonal", "exact")).jac_diag
        np.testing.assert_allclose(diag, np.stack([out.jac_full[..., 0, 0], out.jac_full[..., 1, 1]], -1),
                                   atol=1e-12)


def test_two_pass_is_column_sum(rng):
    net = tiny_net(8)
    den = TorchDenoiser(net)
    q = random_query(rng, 3, 2)
    obs, mask, roles = cond_tensors(q.cond)
    full = torch.autograd.functional.jacobian(
        lambda x: net(x[None], q.s, obs, mask, roles)[0][0], torch.as_tensor(q.x_s)).numpy()
    # d sum_{t,n} mu[t,n,p] / d x[t',n',d]
    colsum = full.sum(axis=(0, 1))  # (p, T, N, d)
    out = den.evaluate(DenoiserQuery(q.x_s, q.s, q.cond, "full", "two_pass"))
    np.testing.assert_allclose(out.jac_full, np.moveaxis(colsum, 0, -2), atol=1e-12)


def test_batched_evaluate_matches_single(rng):
    den = TorchDenoiser(tiny_net(9))
    q = random_query(rng, 4, 3)
    xs = rng.standard_normal((3, 4, 3, 2))
    batch = den.evaluate(DenoiserQuery(xs, q.s, q.cond, "diagonal", "exact"))
    for i in range(3):
        one = den.evaluate(DenoiserQuery(xs[i], q.s, q.cond, "diagonal", "exact"))
        np.testing.assert_allclose(batch.eps_mu[i], one.eps_mu, atol=1e-12)
        np.testing.assert_allclose(batch.jac_diag[i], one.jac_diag, atol=1e-10)


def test_step_embedding_shape():
    e = step_embedding([1, 50], 9)
    assert e.shape == (2, 9) and e.dtype == DTYPE
    assert not torch.allclose(e[0], e[1])


def test_checkpoint_roundtrip(tmp_path, rng):
    for module in (tiny_net(10), LinearDenoiser(50, bivariate=False)):
        with torch.no_grad():
            for p in module.parameters():
                p.add_(0.01 * torch.randn_like(p))
        path = tmp_path / "d.ckpt"
        save_denoiser(path, module, {"note": 1})
        back, cfg = load_denoiser(path)
        assert cfg["note"] == 1
        q = random_query(rng, 3, 2)
        a, b = TorchDenoiser(module).evaluate(q), TorchDenoiser(back).evaluate(q)
        assert np.array_equal(a.eps_mu, b.eps_mu) and np.array_equal(a.eps_cov, b.eps_cov)

import numpy as np
import pytest

from wsopt.net.gradcheck import INPUT, gradient_check
from wsopt.net.model import NetworkConfig, init_params

TINY = NetworkConfig(growth_rate=4, num_blocks=1, layers_per_block=1, stem_channels=4, input_size=8)
FULL = NetworkConfig(growth_rate=8, num_blocks=2, layers_per_block=4, stem_channels=16, input_size=16)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def jittered_batch(r, shape, w, b, u=1.0, margin=1e-3):
    """Inputs whose windowing-layer preactivations stay off the clamp kinks."""
    x = r.uniform(0.0, 1.0, size=shape)
    pre = w * x + b
    for kink in (0.0, u):
        near = np.abs(pre - kink) < margin
        x[near] += 2 * margin / w
        pre = w * x + b
    return x


def labels_for(n, r):
    return (r.uniform(size=n) < 0.5).astype(np.float64)


def test_tiny_network_passes():
    r = rng(1)
    params = init_params(TINY, seed=1, dtype=np.float64)
    batch = r.normal(size=(2, 1, 8, 8))
    res = gradient_check(params, TINY, batch, labels_for(2, r), n_samples=250, seed=2)
    assert res.n_checked >= 200
    assert res.passed, res.summary()
    assert res.max_rel_err < 1e-5


def test_full_network_with_wso_passes():
    r = rng(2)
    params = init_params(FULL, seed=3, dtype=np.float64)
    params["wso/w"] = np.array([1.7])
    params["wso/b"] = np.array([-0.2])
    batch = jittered_batch(r, (2, 1, 16, 16), 1.7, -0.2)
    res = gradient_check(params, FULL, batch, labels_for(2, r), n_samples=250, seed=4)
    assert res.n_checked >= 250
    assert res.passed, res.summary()
    assert "wso/w" in res.per_param_max and "wso/b" in res.per_param_max
    assert INPUT in res.per_param_max


def test_boundary_inputs_excluded_not_failed():
    r = rng(3)
    params = init_params(TINY, seed=5, dtype=np.float64)
    params["wso/w"] = np.array([1.0])
    params["wso/b"] = np.array([0.0])
    batch = jittered_batch(r, (1, 1, 8, 8), 1.0, 0.0)
    batch[0, 0, 0, 0] = 0.0  # exactly on the lower clamp kink
    res = gradient_check(
        params, TINY, batch, labels_for(1, r), n_samples=300, seed=6, check_input=True
    )
    assert ("kink", INPUT, 0) in res.excluded
    assert res.passed, res.summary()


def test_impossible_tolerance_fails():
    r = rng(4)
    params = init_params(TINY, seed=7, dtype=np.float64)
    batch = r.normal(size=(1, 1, 8, 8))
    res = gradient_check(params, TINY, batch, labels_for(1, r), n_samples=60, tol=1e-14, seed=8)
    assert not res.passed
    assert "FAIL" in res.summary()


def test_backward_matches_torch_autograd():
    # independent reverse-mode oracle: an autograd replica of the same
    # topology must agree with the hand-written backward to near machine
    # precision, including in the tiny-gradient regime finite differences
    # cannot resolve
    torch = pytest.importorskip("torch")
    import torch.nn.functional as F

    from wsopt.net import ops
    from wsopt.net.model import backward, forward
    from wsopt.wso import clamp_affine, clamp_affine_backward

    cfg = FULL
    r = rng(21)
    params = init_params(cfg, seed=3, dtype=np.float64)
    wso_w, wso_b = 1.7, -0.2
    batch = jittered_batch(r, (2, 1, 16, 16), wso_w, wso_b)
    y = labels_for(2, r)

    net_in = clamp_affine(batch, wso_w, wso_b, 1.0)
    logits, cache = forward(params, cfg, net_in)
    losses, dlog = ops.bce_with_logits(logits, y)
    grads, dnet_in = backward(params, cfg, cache, dlog / len(dlog))
    dx, dw, db = clamp_affine_backward(batch, wso_w, wso_b, 1.0, dnet_in)

    tp = {k: torch.tensor(v, requires_grad=True) for k, v in params.items()}
    tw = torch.tensor([wso_w], requires_grad=True, dtype=torch.float64)
    tb = torch.tensor([wso_b], requires_grad=True, dtype=torch.float64)
    tx = torch.tensor(batch, requires_grad=True)
    h = torch.clamp(tw * tx + tb, 0.0, 1.0)
    h = F.relu(F.conv2d(h, tp["stem/w"], tp["stem/b"], padding=1))
    for b in range(1, cfg.num_blocks + 1):
        for l in range(1, cfg.layers_per_block + 1):
            n = f"block{b}/layer{l}"
            t = F.relu(F.conv2d(h, tp[f"{n}/squeeze/w"], tp[f"{n}/squeeze/b"]))
            t = F.relu(F.conv2d(t, tp[f"{n}/grow/w"], tp[f"{n}/grow/b"], padding=1))
            h = torch.cat([h, t], dim=1)
        if b < cfg.num_blocks:
            n = f"block{b}/transition"
            h = F.avg_pool2d(F.relu(F.conv2d(h, tp[f"{n}/w"], tp[f"{n}/b"])), 2)
    pooled = h.mean(dim=(2, 3))
    tlogits = pooled @ tp["head/w"] + tp["head/b"][0]
    tloss = F.binary_cross_entropy_with_logits(tlogits, torch.tensor(y))
    tloss.backward()

    assert np.allclose(tlogits.detach().numpy(), logits, atol=1e-12)
    for k in params:
        ref = tp[k].grad.numpy()
        scale = max(np.abs(ref).max(), 1e-12)
        assert np.abs(ref - grads[k]).max() / scale < 1e-12, k
    assert float(tw.grad[0]) == pytest.approx(dw, rel=1e-12)
    assert float(tb.grad[0]) == pytest.approx(db, rel=1e-12)
    assert np.abs(tx.grad.numpy() - dx).max() < 1e-14


def test_saturated_wso_kills_gradient():
    # every preactivation far above U: dw, db and dx must all be exactly 0
    from wsopt.wso import clamp_affine_backward

    r = rng(5)
    x = r.uniform(0.5, 1.0, size=(3, 4))
    g = r.normal(size=(3, 4))
    dx, dw, db = clamp_affine_backward(x, 5.0, 1.0, 1.0, g)
    assert dw == 0.0 and db == 0.0
    assert not dx.any()

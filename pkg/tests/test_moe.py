import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lavide.errors import ConfigError, ShapeError
from lavide.moe import (
    ExpertBank,
    FuseClassifier,
    MoEDiscriminator,
    MoEScale,
    Router,
    downsample_text_embedding,
    expert_difference,
    fuse_and_classify,
    moe_difference,
    route_weights,
)

from gradcheck import finite_difference_check
from oracles import avg_pool, bilinear, gelu


def _t(a):
    return torch.as_tensor(a)


def test_pool_constant_map():
    x = torch.full((1, 3, 8, 8), 0.7)
    out = downsample_text_embedding(x, (2, 4))
    torch.testing.assert_close(out, torch.full((1, 3, 2, 4), 0.7), rtol=0, atol=1e-15)


def test_pool_two_by_two_block():
    a, b = 0.3, 1.9
    x = torch.tensor([[[[a, a], [b, b]]]])
    assert float(downsample_text_embedding(x, (1, 1))) == pytest.approx((a + b) / 2, abs=1e-15)


def test_pool_matches_naive(rng):
    for _ in range(100):
        th, tw = rng.integers(1, 4, size=2)
        fh, fw = rng.integers(1, 5, size=2)
        x = rng.normal(size=(int(rng.integers(1, 6)), th * fh, tw * fw))
        out = downsample_text_embedding(_t(x)[None], (int(th), int(tw)))[0].numpy()
        assert np.abs(out - avg_pool(x, th, tw)).max() <= 1e-9


def test_pool_non_divisible():
    with pytest.raises(ShapeError):
        downsample_text_embedding(torch.zeros(1, 1, 8, 8), (3, 3))


def test_router_single_expert_weight_one(rng):
    r = Router(6, 1)
    w = route_weights(_t(rng.normal(size=(1, 2, 3, 3))), _t(rng.normal(size=(1, 4, 3, 3))), r)
    assert torch.equal(w, torch.ones_like(w))


def test_router_equal_logits_uniform():
    r = Router(4, 5)
    with torch.no_grad():
        r.pointwise.weight.zero_()
        r.pointwise.bias.fill_(0.3)
    w = route_weights(torch.rand(1, 2, 2, 2), torch.rand(1, 2, 2, 2), r)
    np.testing.assert_allclose(w.detach().numpy(), 0.2, atol=1e-15)


def test_router_analytic_softmax():
    r = Router(2, 2)
    with torch.no_grad():
        r.pointwise.weight.zero_()
        r.pointwise.bias.copy_(torch.tensor([0.0, math.log(3.0)]))
    w = r(torch.rand(1, 2, 1, 1))[0, :, 0, 0]
    np.testing.assert_allclose(w.detach().numpy(), [0.25, 0.75], atol=1e-15)


def test_router_expert_count_mismatch():
    with pytest.raises(ConfigError):
        route_weights(torch.rand(1, 1, 2, 2), torch.rand(1, 1, 2, 2), Router(2, 3), num_experts=4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_route_weights_simplex(seed, n):
    torch.manual_seed(seed)
    g = np.random.default_rng(seed)
    r = Router(7, n)
    w = r(_t(g.normal(scale=5.0, size=(2, 7, 3, 4)))).detach()
    assert bool((w >= 0).all())
    assert float((w.sum(1) - 1).abs().max()) <= 1e-6


def test_expert_shape_and_position_independence(rng):
    bank = ExpertBank(5, 3, hidden=7, d_diff=4)
    gt = rng.normal(size=(1, 2, 2, 2))
    gv = rng.normal(size=(1, 3, 2, 2))
    gt[..., 1, 1] = gt[..., 0, 0]
    gv[..., 1, 1] = gv[..., 0, 0]
    d = expert_difference(_t(gt), _t(gv), bank, 1)
    assert d.shape == (1, 4, 2, 2)
    assert torch.equal(d[..., 0, 0], d[..., 1, 1])


def test_expert_matches_matmul_oracle(rng):
    bank = ExpertBank(5, 2, hidden=6, d_diff=3)
    gt = rng.normal(size=(1, 2, 2, 2))
    gv = rng.normal(size=(1, 3, 2, 2))
    out = expert_difference(_t(gt), _t(gv), bank, 1)[0].detach().numpy()
    w1, b1 = bank.w1[1].detach().numpy(), bank.b1[1].detach().numpy()
    w2, b2 = bank.w2[1].detach().numpy(), bank.b2[1].detach().numpy()
    for i in range(2):
        for j in range(2):
            x = np.concatenate([gt[0, :, i, j], gv[0, :, i, j]])
            ref = gelu(x @ w1 + b1) @ w2 + b2
            np.testing.assert_allclose(out[:, i, j], ref, atol=1e-12)


def test_single_expert_bit_match(rng):
    torch.manual_seed(0)
    scale = MoEScale(3, 4, 1, 8, 5)
    gt, gv = _t(rng.normal(size=(2, 3, 4, 4))), _t(rng.normal(size=(2, 4, 4, 4)))
    single = scale.bank(torch.cat([gt, gv], 1))[:, 0]
    assert torch.equal(moe_difference(gt, gv, scale), single)


def test_identical_experts_ignore_weights(rng):
    torch.manual_seed(0)
    scale = MoEScale(3, 4, 4, 8, 5)
    with torch.no_grad():
        for p in (scale.bank.w1, scale.bank.b1, scale.bank.w2, scale.bank.b2):
            p.copy_(p[:1].expand_as(p))
    gt, gv = _t(rng.normal(size=(1, 3, 3, 3))), _t(rng.normal(size=(1, 4, 3, 3)))
    torch.testing.assert_close(moe_difference(gt, gv, scale), expert_difference(gt, gv, scale.bank, 0),
                               rtol=0, atol=1e-12)


def brute_force_moe(scale, gt, gv):
    w = route_weights(gt, gv, scale.router).detach().numpy()
    ds = [expert_difference(gt, gv, scale.bank, j).detach().numpy() for j in range(scale.bank.num_experts)]
    b, _, h, wd = w.shape
    out = np.zeros_like(ds[0])
    for bi in range(b):
        for i in range(h):
            for k in range(wd):
                for j in range(len(ds)):
                    out[bi, :, i, k] += w[bi, j, i, k] * ds[j][bi, :, i, k]
    return out


def test_moe_weighted_sum_matches_brute_force(rng):
    for trial in range(100):
        torch.manual_seed(trial)
        scale = MoEScale(2, 3, 3, 6, 4)
        gt, gv = _t(rng.normal(size=(1, 2, 3, 3))), _t(rng.normal(size=(1, 3, 3, 3)))
        got = moe_difference(gt, gv, scale).detach().numpy()
        assert np.abs(got - brute_force_moe(scale, gt, gv)).max() <= 1e-9


def test_permutation_equivariance(rng):
    torch.manual_seed(2)
    n = 5
    scale = MoEScale(3, 3, n, 6, 4)
    gt, gv = _t(rng.normal(size=(1, 3, 4, 4))), _t(rng.normal(size=(1, 3, 4, 4)))
    before = moe_difference(gt, gv, scale)
    perm = torch.as_tensor(rng.permutation(n))
    with torch.no_grad():
        for p in (scale.bank.w1, scale.bank.b1, scale.bank.w2, scale.bank.b2):
            p.copy_(p[perm])
        scale.router.pointwise.weight.copy_(scale.router.pointwise.weight[perm])
        scale.router.pointwise.bias.copy_(scale.router.pointwise.bias[perm])
    torch.testing.assert_close(moe_difference(gt, gv, scale), before, rtol=0, atol=1e-9)


def test_moe_shape_errors():
    scale = MoEScale(2, 2, 2, 4, 3)
    with pytest.raises(ShapeError):
        scale(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 2, 2))


def _pyramid(rng, b=1, h=8, channels=(3, 4, 5, 6)):
    return [_t(rng.normal(size=(b, c, h // s, h // s))) for c, s in zip(channels, (4, 8, 16, 32))]


def test_fuse_classify_shape_and_decision(rng):
    torch.manual_seed(0)
    head = FuseClassifier(4, 4, 6)
    diffs = [_t(rng.normal(size=(2, 4, 16 // s, 16 // s))) for s in (1, 2, 4, 8)]
    logits = fuse_and_classify(diffs, head, (64, 64))
    assert logits.shape == (2, 2, 64, 64)
    b = logits.argmax(1)
    assert set(b.unique().tolist()) <= {0, 1}


def test_fuse_missing_scale():
    with pytest.raises(ConfigError):
        FuseClassifier(4, 4, 6)([torch.zeros(1, 4, 2, 2)] * 3, (8, 8))


def test_discriminator_matches_scripted_oracle_8x8(rng):
    """Full MoE + fusion forward on a 32x32 image grid with stride-4 map 8x8."""
    torch.manual_seed(3)
    channels = (3, 4, 5, 6)
    d_t, n, hid, dd, df = 2, 3, 5, 4, 6
    disc = MoEDiscriminator(d_t, channels, n, hid, dd, df)
    g_t = rng.normal(size=(1, d_t, 32, 32))
    pyr = [rng.normal(size=(1, c, 32 // s, 32 // s)) for c, s in zip(channels, (4, 8, 16, 32))]
    logits = disc(_t(g_t), [_t(p) for p in pyr])[0].detach().numpy()

    diffs = []
    for scale, p in zip(disc.scales, pyr):
        h = p.shape[-1]
        x = np.concatenate([avg_pool(g_t[0], h, h), p[0]])
        dw = scale.router.depthwise
        from oracles import conv2d
        mixed = conv2d(x, dw.weight.detach().numpy(), dw.bias.detach().numpy(), pad=1, groups=x.shape[0])
        pw = scale.router.pointwise
        lg = np.einsum("oc,chw->ohw", pw.weight.detach().numpy()[:, :, 0, 0], mixed) + pw.bias.detach().numpy()[:, None, None]
        w = np.exp(lg - lg.max(0)) / np.exp(lg - lg.max(0)).sum(0)
        bank = scale.bank
        out = np.zeros((dd, h, h))
        for j in range(n):
            hdn = gelu(np.einsum("chw,ck->khw", x, bank.w1[j].detach().numpy()) + bank.b1[j].detach().numpy()[:, None, None])
            dj = np.einsum("khw,ko->ohw", hdn, bank.w2[j].detach().numpy()) + bank.b2[j].detach().numpy()[:, None, None]
            out += w[j] * dj
        diffs.append(out)
    base = diffs[0].shape[-1]
    cat = np.concatenate([diffs[0]] + [bilinear(d, base, base) for d in diffs[1:]])
    fw = disc.head.fuse
    fused = np.einsum("oc,chw->ohw", fw.weight.detach().numpy()[:, :, 0, 0], cat) + fw.bias.detach().numpy()[:, None, None]
    cw = disc.head.classifier
    lo = np.einsum("oc,chw->ohw", cw.weight.detach().numpy()[:, :, 0, 0], fused) + cw.bias.detach().numpy()[:, None, None]
    np.testing.assert_allclose(logits, bilinear(lo, 32, 32), atol=1e-12)


@pytest.mark.parametrize("part", ["router", "bank"])
def test_moe_scale_gradients(rng, part):
    torch.manual_seed(4)
    scale = MoEScale(3, 4, 3, 6, 5)
    gt, gv = _t(rng.normal(size=(1, 3, 4, 4))), _t(rng.normal(size=(1, 4, 4, 4)))
    r = _t(rng.normal(size=(1, 5, 4, 4)))
    err, _, _ = finite_difference_check(lambda: (scale(gt, gv) * r).sum(), getattr(scale, part))
    assert err <= 1e-4


def test_fuse_classifier_gradient(rng):
    torch.manual_seed(5)
    head = FuseClassifier(3, 4, 5)
    diffs = [_t(rng.normal(size=(1, 3, 8 // s, 8 // s))) for s in (1, 2, 4, 8)]
    r = _t(rng.normal(size=(1, 2, 32, 32)))
    err, _, _ = finite_difference_check(lambda: (head(diffs, (32, 32)) * r).sum(), head)
    assert err <= 1e-4

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sota.attention import (AttentionConfig, CrossAttention, SotaAttention, concat_fuse, cosine_cost,
                            cross_attention_forward, sota_forward, subqueries_and_supply)
from sota.numerics import ParamStore, Tensor, check_gradients, projected
from sota.ot import OTProblem, sinkhorn_logdomain

SMALL = AttentionConfig(d_model=6, d_att=4, n_sub=2, grid=(2, 3), n_heads=2)


def make(cfg=SMALL, seed=0, kind="sota"):
    store = ParamStore(seed=seed)
    head = (SotaAttention if kind == "sota" else CrossAttention)(store, kind, cfg)
    return store, head


def inputs(cfg=SMALL, seed=0):
    r = np.random.default_rng(seed)
    return r.standard_normal(cfg.d_att), r.standard_normal((cfg.n_patch, cfg.d_model))


def test_zero_supply_head_is_uniform():
    store, _ = make()
    store["sota.supply.weight"].data[:] = 0
    store["sota.supply.bias"].data[:] = 0
    _, gamma, _ = subqueries_and_supply(inputs()[0], store, SMALL)
    assert np.allclose(gamma.data, 0.5, atol=1e-15)


def test_single_subquery_has_unit_supply():
    cfg = AttentionConfig(d_model=6, d_att=4, n_sub=1, grid=(2, 3))
    store, _ = make(cfg)
    for seed in range(5):
        _, gamma, _ = subqueries_and_supply(inputs(cfg, seed)[0], store, cfg)
        assert gamma.data.tolist() == [1.0]


def test_subqueries_match_scalar_matmul():
    store, _ = make()
    z = inputs()[0]
    q, _, _ = subqueries_and_supply(z, store, SMALL)
    W, b = store["sota.qry.weight"].data, store["sota.qry.bias"].data
    flat = [sum(z[i] * W[i][j] for i in range(len(z))) + b[j] for j in range(W.shape[1])]
    assert np.allclose(q.data.reshape(-1), flat, atol=1e-12, rtol=0)


def test_cosine_cost_cases():
    k = np.array([[1.0, 2.0, 0.0], [-2.0, 1.0, 0.0], [-1.0, -2.0, 0.0], [0.0, 0.0, 0.0]])
    c = cosine_cost(np.array([[2.0, 4.0, 0.0]]), k).data[0]
    assert np.allclose(c[:3], [-1.0, 0.0, 1.0], atol=1e-12)
    assert c[3] == 0.0      # zero-norm patch stays finite


@given(st.integers(0, 10**6))
def test_cosine_cost_range(seed):
    r = np.random.default_rng(seed)
    c = cosine_cost(r.standard_normal((3, 5)), r.standard_normal((7, 5))).data
    assert np.all(c >= -1 - 1e-12) and np.all(c <= 1 + 1e-12)


def test_single_subquery_is_capacity_weighted_mean():
    cfg = AttentionConfig(d_model=6, d_att=4, n_sub=1, grid=(2, 3))
    store, head = make(cfg)
    z_fp, z_img = inputs(cfg)
    out = head(z_fp, z_img)
    v = z_img @ store["sota.val.weight"].data
    assert np.allclose(out.fused.data, v.T @ np.full(cfg.n_patch, 1 / cfg.n_patch), atol=1e-9, rtol=0)


def test_identical_values_collapse():
    store, head = make()
    z_fp = inputs()[0]
    z_img = np.tile(np.random.default_rng(5).standard_normal(SMALL.d_model), (SMALL.n_patch, 1))
    out = head(z_fp, z_img)
    v = z_img[0] @ store["sota.val.weight"].data
    assert np.allclose(out.fused.data, out.patch_weights.data.sum() * v, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_forward_equals_composed_ops(seed):
    store, head = make(seed=seed)
    z_fp, z_img = inputs(seed=seed)
    out = head(z_fp, z_img)
    q, gamma, _ = subqueries_and_supply(z_fp, store, SMALL)
    keys = z_img @ store["sota.key.weight"].data
    vals = z_img @ store["sota.val.weight"].data
    C = cosine_cost(q.data, keys).data
    plan = sinkhorn_logdomain(OTProblem(C, gamma.data, np.full(SMALL.n_patch, 1 / SMALL.n_patch),
                                        SMALL.epsilon, SMALL.n_ot)).numpy()
    fused = sum(g * (plan[l] @ vals) for l, g in enumerate(gamma.data))
    assert np.allclose(out.plan.data, plan, atol=1e-12)
    assert np.allclose(out.fused.data, fused, atol=1e-12)
    assert np.allclose(out.patch_weights.data, gamma.data @ plan, atol=1e-12)


@given(st.integers(0, 10**6))
def test_patch_weight_mass(seed):
    store, head = make(seed=seed % 7)
    out = head(*inputs(seed=seed))
    zeta, g, plan = out.patch_weights.data, out.supply.data, out.plan.data
    assert np.all(zeta >= 0)
    assert abs(zeta.sum() - g @ plan.sum(-1)) <= 1e-9


def test_patch_weight_mass_converged():
    cfg = AttentionConfig(d_model=6, d_att=4, n_sub=3, grid=(2, 3), n_ot=1000)
    store, head = make(cfg)
    out = head(*inputs(cfg))
    assert abs(out.patch_weights.data.sum() - (out.supply.data ** 2).sum()) <= 1e-6


def test_conditioning_dependence():
    store, head = make()
    z_fp, z_img = inputs()
    base = head(z_fp, z_img).fused.data
    moved = head(z_fp + np.random.default_rng(9).standard_normal(z_fp.shape), z_img).fused.data
    assert np.linalg.norm(moved - base) > 1e-6
    cfg1 = AttentionConfig(d_model=6, d_att=4, n_sub=1, grid=(2, 3))
    store1, head1 = make(cfg1)
    a = head1(z_fp, z_img).fused.data
    b = head1(-3 * z_fp + 1, z_img).fused.data
    assert np.allclose(a, b, atol=1e-12)


@given(st.integers(0, 10**6))
def test_patch_permutation_equivariance(seed):
    store, head = make()
    z_fp, z_img = inputs(seed=seed)
    perm = np.random.default_rng(seed).permutation(SMALL.n_patch)
    a, b = head(z_fp, z_img), head(z_fp, z_img[perm])
    assert np.allclose(a.fused.data, b.fused.data, atol=1e-9)
    assert np.allclose(a.patch_weights.data[perm], b.patch_weights.data, atol=1e-9)


def test_batched_forward_matches_single():
    store, head = make()
    r = np.random.default_rng(2)
    z_fp, z_img = r.standard_normal((3, 2, SMALL.d_att)), r.standard_normal((3, 2, SMALL.n_patch, SMALL.d_model))
    out = head(z_fp, z_img)
    for i in range(3):
        for j in range(2):
            assert np.allclose(out.fused.data[i, j], head(z_fp[i, j], z_img[i, j]).fused.data, atol=1e-12)


def test_cross_attention_uniform_for_identical_keys():
    store, head = make(kind="ca")
    z_fp = inputs()[0]
    z_img = np.tile(np.random.default_rng(1).standard_normal(SMALL.d_model), (SMALL.n_patch, 1))
    _, w = head(z_fp, z_img)
    assert np.allclose(w.data, 1 / SMALL.n_patch, atol=1e-15)


def test_cross_attention_aligned_key_wins():
    cfg = AttentionConfig(d_model=4, d_att=4, grid=(1, 4), n_heads=1)
    store = ParamStore()
    CrossAttention(store, "ca", cfg)
    for n in ("qry", "key", "val", "out"):
        store[f"ca.{n}.weight"].data[:] = np.eye(4)
    store["ca.qry.bias"].data[:] = 0
    z_img = np.eye(4)
    _, w = cross_attention_forward(np.array([1.0, 0, 0, 0]), z_img, store, cfg)
    assert w.data[0] > 1 / 4 and np.isclose(w.data.sum(), 1)


def test_single_head_matches_scalar_oracle():
    cfg = AttentionConfig(d_model=5, d_att=4, grid=(2, 3), n_heads=1)
    store, head = make(cfg, kind="ca")
    z_fp, z_img = inputs(cfg, 3)
    z, w = head(z_fp, z_img)
    s = {k: v.data for k, v in store.items()}
    q = z_fp @ s["ca.qry.weight"] + s["ca.qry.bias"]
    ks = z_img @ s["ca.key.weight"]
    vs = z_img @ s["ca.val.weight"]
    qn = q / math.sqrt(sum(x * x for x in q))
    scores = [sum(a * b for a, b in zip(qn, k / math.sqrt(sum(x * x for x in k)))) / math.sqrt(4) for k in ks]
    m = max(scores)
    e = [math.exp(x - m) for x in scores]
    ref_w = [x / sum(e) for x in e]
    att = sum(wi * vi for wi, vi in zip(ref_w, vs))
    ref_z = att @ s["ca.out.weight"] + s["ca.out.bias"]
    assert np.allclose(w.data, ref_w, atol=1e-10) and np.allclose(z.data, ref_z, atol=1e-10)


def test_cross_attention_head_split_validation():
    with pytest.raises(ValueError):
        make(AttentionConfig(d_model=6, d_att=6, grid=(2, 3), n_heads=4), kind="ca")


def test_concat_examples():
    assert concat_fuse([1.0, 2.0], [3.0], [4.0, 5.0]).data.tolist() == [1, 2, 3, 4, 5]
    out = concat_fuse(np.ones(64), np.zeros(16), np.full(10, 2.0)).data
    assert out.shape == (90,) and not out[64:80].any() and (out[:64] == 1).all() and (out[80:] == 2).all()


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("kind", ["sota", "ca"])
def test_head_gradients(seed, kind):
    store, head = make(seed=seed, kind=kind)
    z_fp, z_img = inputs(seed=seed)
    zf = Tensor(z_fp, requires_grad=True)
    zi = Tensor(z_img, requires_grad=True)
    fn = (lambda: head(zf, zi).fused) if kind == "sota" else (lambda: head(zf, zi)[0])
    point = dict(store.items(), z_fp=zf, z_img=zi)
    rep = check_gradients(projected(fn, seed), point)
    assert rep.passed, str(rep)

import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from sota.datapipe import fit_stats
from sota.interpret import (bilinear_upsample, compute_heatmap, explain_episode, export_overlay,
                            export_ratios_csv, heat_colormap, modal_influence, overlay)
from sota.numerics import ParamStore, Tensor
from sota.backbone import BackboneConfig, FusionBackbone
from sota.policy import DiffusionPolicy, PolicyConfig
from sota.sim import collect_demos


def test_copy_stub_gets_all_influence():
    tok = np.random.default_rng(0).standard_normal((3, 8))
    for m in range(3):
        r = modal_influence(tok, lambda t, m=m: t[..., m, :])
        assert np.array_equal(r, np.eye(3)[m])


def test_constant_fuse_is_uniform():
    r = modal_influence(np.ones((4, 3, 5)), lambda t: Tensor(np.zeros(t.shape[:-2] + (5,))))
    assert np.array_equal(r, np.full((4, 3), 1 / 3))


def test_symmetric_init_identical_tokens_uniform():
    store = ParamStore(seed=0)
    bb = FusionBackbone(store, BackboneConfig())
    tok = np.tile(np.random.default_rng(1).standard_normal(64), (3, 1))
    r = modal_influence(tok, bb.framewise_fuse)
    assert np.allclose(r, 1 / 3, atol=1e-12)


@given(st.integers(0, 10**6))
def test_ratios_on_simplex(seed):
    r = np.random.default_rng(seed)
    W = r.standard_normal((3, 6, 6))
    fuse = lambda t: Tensor(np.tanh(np.einsum("...md,mde->...e", t.data, W)))
    ratios = modal_influence(r.standard_normal((5, 3, 6)), fuse)
    assert np.all(ratios >= 0) and np.allclose(ratios.sum(-1), 1, atol=1e-12)


def test_heatmap_examples():
    h = compute_heatmap(np.ones(49), 0.3)
    assert h.grid.shape == (7, 7) and np.allclose(h.grid, 0.3 / 49, rtol=0, atol=1e-17)
    one = np.zeros(49)
    one[17] = 2.0
    h = compute_heatmap(one, 0.42)
    assert h.grid.reshape(-1)[17] == 0.42 and h.grid.sum() == 0.42
    for bad in (np.zeros(49), -np.ones(49), np.ones(48)):
        with pytest.raises(ValueError):
            compute_heatmap(bad, 0.3)


@given(st.integers(0, 10**6), st.floats(0, 1))
def test_heatmap_mass(seed, share):
    z = np.random.default_rng(seed).random(49)
    h = compute_heatmap(z, share)
    assert np.all(h.grid >= 0) and abs(h.grid.sum() - share) <= 1e-12


def test_upsample_constant_and_corner():
    assert np.allclose(bilinear_upsample(np.full((7, 7), 0.25), (56, 56)), 0.25)
    g = np.arange(4.0).reshape(2, 2)
    up = bilinear_upsample(g, (4, 4))
    assert up[0, 0] == 0 and up[-1, -1] == 3


def test_colormap_ends():
    assert heat_colormap(0.0).tolist() == [0, 0, 0] and heat_colormap(1.0).tolist() == [1, 1, 1]


def test_zero_heatmap_leaves_image(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (56, 56, 3), dtype=np.uint8)
    out, w = overlay(img, np.zeros((7, 7)))
    assert np.array_equal(out, img) and not w.any()
    export_overlay(img, np.zeros((7, 7)), tmp_path / "z.png")
    assert np.array_equal(np.asarray(Image.open(tmp_path / "z.png")), img)


def test_overlay_weights_and_fixed_bytes(tmp_path):
    img = np.full((56, 56, 3), 100, np.uint8)
    grid = np.linspace(0, 1, 49).reshape(7, 7)
    w = export_overlay(img, grid, tmp_path / "a.png")
    export_overlay(img, grid, tmp_path / "b.png")
    assert w.min() >= 0 and w.max() <= 1
    a, b = (tmp_path / "a.png").read_bytes(), (tmp_path / "b.png").read_bytes()
    assert a == b
    pixels = np.asarray(Image.open(tmp_path / "a.png"))
    assert hashlib.sha256(pixels.tobytes()).hexdigest()[:16] == "5afb96b0aa7cf759"


def test_ratio_csv(tmp_path):
    export_ratios_csv(np.array([[0.2, 0.3, 0.5]]), tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines == ["t,w_force,w_pose,w_sota", "0,0.2,0.3,0.5"]


@pytest.fixture(scope="module")
def probe_setup():
    eps = collect_demos(2, 11)
    policy = DiffusionPolicy(PolicyConfig(dtype="float64"), fit_stats(eps))
    r = np.random.default_rng(0)
    policy.store["backbone.gate.weight"].data[:] = r.standard_normal((64, 3))
    return policy, eps


def test_explain_episode_invariants(probe_setup):
    policy, eps = probe_setup
    before = policy.store.checksum()
    ex = explain_episode(policy, eps[0])
    assert policy.store.checksum() == before
    n = len(eps[0])
    assert ex.ratios.shape == (n, 3) and len(ex.heatmaps) == n and ex.force_norm.shape == (n,)
    assert np.all(ex.ratios >= 0) and np.all(np.abs(ex.ratios.sum(-1) - 1) <= 1e-9)
    for t, h in enumerate(ex.heatmaps):
        assert h.frame == t and np.all(h.grid >= 0)
        assert abs(h.grid.sum() - ex.ratios[t, 2]) <= 1e-9
    assert not np.allclose(ex.ratios, 1 / 3)


def test_explain_rejects_non_ot_variant(probe_setup):
    _, eps = probe_setup
    cfg = PolicyConfig(backbone=BackboneConfig(variant="concat"))
    with pytest.raises(ValueError):
        explain_episode(DiffusionPolicy(cfg, fit_stats(eps)), eps[0])

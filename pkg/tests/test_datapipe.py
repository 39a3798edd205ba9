import json
import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from sota.datapipe import (DataError, Episode, TrainingSet, archive_hash, dataset_read, dataset_write,
                           denormalize_actions, fit_stats, integrate_increments, minmax_apply, minmax_fit,
                           minmax_invert, normalize_actions, pair_count, planar_rotation, pose_increments,
                           read_manifest, rot_from_6d, rot_to_6d, split_wrench, window_indices, windowize,
                           wrap_angle)


def make_episode(n=12, seed=0, size=8):
    r = np.random.default_rng(seed)
    theta = r.uniform(-0.3, 0.3, n)
    return Episode(images=r.integers(0, 256, (n, size, size, 3), dtype=np.uint8),
                   timestamps=np.arange(n) * 0.1, wrench=r.normal(0, 3, (n, 6)),
                   grip_force=r.uniform(0, 10, n), position=r.normal(0, 0.05, (n, 3)),
                   rotation=planar_rotation(theta), gripper=r.uniform(0, 0.02, n),
                   planar=np.stack([r.normal(0, 0.05, n), r.normal(0, 0.05, n), theta], -1),
                   success=bool(seed % 2), meta={"seed": seed, "suite": "nominal"})


def test_split_wrench_345():
    out = split_wrench([3, 4, 0, 0, 0, 0], 2.5)
    assert out.shape == (9,)
    assert np.allclose(out[:4], [5, 0.6, 0.8, 0], atol=1e-15)
    assert np.all(out[4:8] == 0) and out[8] == 2.5


def test_split_wrench_zero():
    assert not split_wrench(np.zeros(6)).any()


@given(st.integers(0, 10**6))
def test_split_wrench_round_trip(seed):
    w = np.random.default_rng(seed).normal(0, 10, (5, 6))
    out = split_wrench(w)
    assert np.allclose(out[:, :1] * out[:, 1:4], w[:, :3], atol=1e-12, rtol=0)
    assert np.allclose(out[:, 4:5] * out[:, 5:8], w[:, 3:], atol=1e-12, rtol=0)
    assert np.allclose(np.linalg.norm(out[:, 1:4], axis=-1), 1, atol=1e-12)


def test_rot6d_identity_and_round_trip():
    assert np.array_equal(rot_to_6d(np.eye(3)), [1, 0, 0, 0, 1, 0])
    R = Rotation.random(100, random_state=3).as_matrix()
    back = rot_from_6d(rot_to_6d(R))
    assert np.max(np.abs(back - R)) <= 1e-12


def test_rot6d_scale_invariant_and_degenerate():
    v = np.random.default_rng(0).normal(size=6)
    assert np.allclose(rot_from_6d(2 * v), rot_from_6d(v), atol=1e-15)
    R = rot_from_6d(v)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12) and math.isclose(np.linalg.det(R), 1, abs_tol=1e-12)
    with pytest.raises(ValueError):
        rot_from_6d([1, 2, 3, 2, 4, 6])
    with pytest.raises(ValueError):
        rot_from_6d([0, 0, 0, 0, 1, 0])


def test_planar_rotation_is_a_rotation():
    R = planar_rotation(np.array([0.0, 0.4, -2.0]))
    assert np.allclose(R[0], np.eye(3))
    assert np.allclose(np.einsum("nji,njk->nik", R, R), np.eye(3), atol=1e-15)


def test_pose_increments_constant_and_wrap():
    assert not pose_increments(np.tile([0.1, 0.2, 0.3], (5, 1))).any()
    d = pose_increments(np.radians([[0, 0, 179], [0, 0, -179]]))
    assert math.isclose(d[1, 2], math.radians(2), rel_tol=1e-12)
    assert wrap_angle(-math.pi) == math.pi and wrap_angle(math.pi) == math.pi


@given(st.integers(0, 10**6), st.integers(1, 40))
def test_increments_integrate_back(seed, n):
    r = np.random.default_rng(seed)
    p = np.cumsum(r.normal(0, 0.3, (n, 3)), axis=0)
    back = integrate_increments(p[0], pose_increments(p))
    assert np.allclose(back, p, atol=1e-12, rtol=0)


def test_minmax_examples():
    lo, hi = minmax_fit(np.array([[-2.0, 5.0], [2.0, 5.0]]))
    assert minmax_apply(np.array([0.0, 5.0]), lo, hi).tolist() == [0.5, 0.5]
    assert minmax_apply(lo, lo, hi)[0] == 0 and minmax_apply(hi, lo, hi)[0] == 1
    with pytest.raises(ValueError):
        minmax_fit(np.zeros((0, 3)))


@given(st.integers(0, 10**6))
def test_minmax_inverse_round_trip(seed):
    x = np.random.default_rng(seed).normal(0, 5, (30, 4))
    lo, hi = minmax_fit(x)
    xn = minmax_apply(x, lo, hi)
    assert np.all((xn >= 0) & (xn <= 1))
    assert np.allclose(minmax_invert(xn, lo, hi), x, atol=1e-12, rtol=0)


def test_action_normalization_round_trip():
    eps = [make_episode(20, s) for s in range(3)]
    stats = fit_stats(eps)
    a = pose_increments(eps[0].planar)
    an = normalize_actions(a, stats)
    assert np.all(np.abs(an) <= 1 + 1e-12)
    assert np.allclose(denormalize_actions(an, stats), a, atol=1e-12)


def test_window_indices_padding():
    obs, act = window_indices(1, 8, 16)
    assert obs.tolist() == [[0] * 8] and act.tolist() == [[0] * 16]
    obs, act = window_indices(40, 8, 16)
    assert obs[20].tolist() == list(range(12, 20)) and act[20].tolist() == list(range(20, 36))
    assert obs[3].tolist() == [0] * 5 + [0, 1, 2]
    assert act[35].tolist() == list(range(35, 40)) + [39] * 11
    with pytest.raises(ValueError):
        window_indices(0, 8, 16)


@given(st.lists(st.integers(1, 60), min_size=1, max_size=12), st.integers(1, 10), st.integers(1, 20))
def test_pair_count_matches_windowize(lengths, t_w, t_h):
    assert pair_count(lengths, t_w, t_h) == sum(len(window_indices(n, t_w, t_h)[0]) for n in lengths)
    assert pair_count(lengths, t_w, t_h) == sum(lengths)


def test_paper_scale_pair_count():
    # one pair per step under repeat padding; the reference count is lower (see notes)
    assert pair_count([32974]) == 32974


def test_windowize_pairs():
    ep = make_episode(12)
    pairs = windowize(ep)
    assert len(pairs) == 12
    win, chunk = pairs[10]
    assert win["images"].shape == (8, 8, 8, 3) and win["force"].shape == (8, 9)
    assert win["pose"].shape == (8, 10) and chunk.shape == (16, 3)
    assert np.array_equal(win["images"], ep.images[2:10])
    assert np.allclose(chunk[0], pose_increments(ep.planar)[10])


def test_training_set_normalized():
    eps = [make_episode(n, s) for s, n in enumerate((5, 17, 9))]
    ts = TrainingSet(eps, fit_stats(eps))
    assert len(ts) == 31
    b = ts.batch(np.arange(len(ts)))
    assert b["force"].shape == (31, 8, 9) and b["actions"].shape == (31, 16, 3)
    for k in ("force", "pose"):
        assert b[k].min() >= 0 and b[k].max() <= 1
    # windows never cross episode boundaries
    assert np.array_equal(b["images"][5], np.repeat(eps[1].images[:1], 8, axis=0))
    with pytest.raises(DataError):
        TrainingSet([], fit_stats(eps))


def test_episode_validation():
    ep = make_episode(4)
    with pytest.raises(DataError):
        Episode(**{**ep.__dict__, "timestamps": np.array([0, 0.1, 0.1, 0.2])})
    with pytest.raises(DataError):
        Episode(**{**ep.__dict__, "wrench": np.zeros((4, 5))})
    with pytest.raises(DataError):
        Episode(**{**ep.__dict__, "images": np.zeros((4, 8, 8))})


def test_archive_round_trip(tmp_path):
    eps = [make_episode(n, s) for s, n in enumerate((3, 11, 1))]
    mf = dataset_write(eps, tmp_path, config_hash="abc")
    back, stats, mf2 = dataset_read(tmp_path)
    assert mf == mf2 and mf["n_steps"] == 15 and mf["config_hash"] == "abc"
    for a, b in zip(eps, back):
        for name in ("images", "timestamps", "wrench", "grip_force", "position", "rotation",
                     "gripper", "planar"):
            x, y = getattr(a, name), getattr(b, name)
            assert x.dtype == y.dtype and x.tobytes() == y.tobytes()
        assert (a.success, a.meta) == (b.success, b.meta)
    ref = fit_stats(eps)
    for k in ref.__dataclass_fields__:
        assert np.array_equal(getattr(stats, k), getattr(ref, k))


def test_archive_hash_stable(tmp_path):
    eps = [make_episode(5, 1)]
    dataset_write(eps, tmp_path / "a")
    dataset_write(eps, tmp_path / "b")
    assert archive_hash(tmp_path / "a") == archive_hash(tmp_path / "b")
    dataset_write([make_episode(5, 2)], tmp_path / "c")
    assert archive_hash(tmp_path / "a") != archive_hash(tmp_path / "c")


def test_archive_corruption_detected(tmp_path):
    dataset_write([make_episode(6)], tmp_path)
    blob = tmp_path / "ep_00000.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(DataError, match="checksum"):
        dataset_read(tmp_path)


def test_archive_version_and_missing(tmp_path):
    with pytest.raises(DataError):
        read_manifest(tmp_path)
    dataset_write([make_episode(2)], tmp_path)
    mf = json.loads((tmp_path / "manifest.json").read_text())
    mf["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(mf))
    with pytest.raises(DataError, match="version"):
        dataset_read(tmp_path)


def test_archive_load_time(tmp_path):
    eps = [make_episode(165, s % 7, size=56) for s in range(200)]
    dataset_write(eps, tmp_path)
    t0 = time.perf_counter()
    back, _, _ = dataset_read(tmp_path)
    assert len(back) == 200 and time.perf_counter() - t0 < 5.0

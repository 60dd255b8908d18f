import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import frechet_by_diagonalization
from semipaired.core import ConfigError, DataError, LabelIndexMap, RgbImage, ValidationError, decode_one_hot, images_to_tensor
from semipaired.metrics import (
    ConfusionMatrix,
    FeatureStats,
    accumulate_confusion,
    evaluate,
    evaluate_images,
    feature_statistics,
    frechet_distance,
    miou,
    per_class_iou,
)
from semipaired.networks import PerceptualExtractor, set_trainable
from semipaired.synthdata import generate_corpus, split_dataset, write_dataset, write_split
from semipaired.trainer import TrainConfig, run_training


def lim(grid, C):
    return LabelIndexMap(np.asarray(grid), C)


def test_accumulate_identity():
    cm = accumulate_confusion(lim([[1, 1], [1, 1]], 3), lim([[1, 1], [1, 1]], 3), ConfusionMatrix.empty(3))
    assert cm.counts[1, 1] == 4 and cm.total == 4
    assert miou(cm) == 1.0


def test_half_half_case():
    gt = lim([[0, 0], [1, 1]], 2)
    pred = lim([[0, 0], [0, 0]], 2)
    cm = accumulate_confusion(pred, gt, ConfusionMatrix.empty(2))
    assert per_class_iou(cm).tolist() == [0.5, 0.0]
    assert miou(cm) == 0.25


def test_absent_class_excluded():
    cm = accumulate_confusion(lim([[0, 1]], 4), lim([[0, 1]], 4), ConfusionMatrix.empty(4))
    iou = per_class_iou(cm)
    assert np.isnan(iou[2]) and np.isnan(iou[3])
    assert miou(cm) == 1.0


def test_predicted_but_absent_class_still_excluded_from_mean():
    # class 2 never in gt but predicted: it lowers class 0's IoU, not the mean's count
    cm = accumulate_confusion(lim([[2, 0]], 3), lim([[0, 0]], 3), ConfusionMatrix.empty(3))
    assert miou(cm) == 0.5


def test_empty_matrix_raises():
    with pytest.raises(ValidationError):
        miou(ConfusionMatrix.empty(3))


def test_shape_mismatch():
    with pytest.raises(ValidationError):
        accumulate_confusion(lim([[0, 1]], 2), lim([[0], [1]], 2), ConfusionMatrix.empty(2))
    with pytest.raises(ValidationError):
        accumulate_confusion(lim([[0, 1]], 3), lim([[0, 1]], 2), ConfusionMatrix.empty(2))


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_accumulation_commutative_and_conserving(seed):
    rng = np.random.default_rng(seed)
    C = 4
    pairs = [(lim(rng.integers(0, C, (3, 5)), C), lim(rng.integers(0, C, (3, 5)), C)) for _ in range(4)]
    fwd, rev = ConfusionMatrix.empty(C), ConfusionMatrix.empty(C)
    for p, g in pairs:
        fwd = accumulate_confusion(p, g, fwd)
    for p, g in reversed(pairs):
        rev = accumulate_confusion(p, g, rev)
    assert np.array_equal(fwd.counts, rev.counts)
    assert fwd.total == 4 * 15


@given(st.integers(0, 10_000), st.permutations(range(4)))
@settings(max_examples=40, deadline=None)
def test_miou_permutation_invariant(seed, perm):
    rng = np.random.default_rng(seed)
    perm = np.array(perm)
    g, p = rng.integers(0, 4, (6, 6)), rng.integers(0, 4, (6, 6))
    a = miou(accumulate_confusion(lim(p, 4), lim(g, 4), ConfusionMatrix.empty(4)))
    b = miou(accumulate_confusion(lim(perm[p], 4), lim(perm[g], 4), ConfusionMatrix.empty(4)))
    assert abs(a - b) < 1e-12
    assert 0.0 <= a <= 1.0


def stats(mean, cov, n=10, eid="x"):
    return FeatureStats(np.asarray(mean, float), np.asarray(cov, float), n, eid)


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


def test_frechet_self_distance(rng):
    s = stats(rng.standard_normal(6), random_spd(rng, 6))
    assert frechet_distance(s, s) < 1e-6


def test_frechet_mean_shift():
    cov = random_spd(np.random.default_rng(0), 2)
    d = frechet_distance(stats([0, 0], cov), stats([3, 4], cov))
    assert abs(d - 25.0) <= 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_frechet_vs_diagonalization_oracle(seed):
    rng = np.random.default_rng(seed)
    m1, m2 = rng.standard_normal(2), rng.standard_normal(2)
    s1, s2 = random_spd(rng, 2), random_spd(rng, 2)
    got = frechet_distance(stats(m1, s1), stats(m2, s2))
    assert abs(got - frechet_by_diagonalization(m1, s1, m2, s2)) <= 1e-8


@given(st.integers(0, 10_000), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_frechet_symmetric_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    a = stats(rng.standard_normal(d), random_spd(rng, d))
    b = stats(rng.standard_normal(d), random_spd(rng, d))
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0 and abs(ab - ba) <= 1e-9 * max(1.0, ab)


def test_frechet_singular_covariances():
    z = np.zeros((3, 3))
    assert frechet_distance(stats([0, 0, 0], z), stats([0, 0, 1], z)) == pytest.approx(1.0, abs=1e-12)


def test_frechet_extractor_mismatch():
    with pytest.raises(ValidationError):
        frechet_distance(stats([0], [[1]], eid="a"), stats([0], [[1]], eid="b"))


def test_feature_stats_validation():
    with pytest.raises(ValidationError):
        stats([0], [[1]], n=1)
    with pytest.raises(ValidationError):
        stats([0, 0], [[1, 0.5], [0, 1]])


def images(rng, n, size=16):
    return [RgbImage(rng.uniform(-1, 1, (size, size, 3)).astype(np.float32)) for _ in range(n)]


def test_feature_statistics_properties(rng):
    F = PerceptualExtractor(0)
    imgs = images(rng, 12)
    s = feature_statistics(imgs, F)
    assert s.mean.shape == (F.feature_dim,) and s.n == 12 and s.extractor_id == F.extractor_id
    assert np.linalg.eigvalsh(s.covariance).min() >= -1e-8
    s2 = feature_statistics(imgs, F)
    assert np.array_equal(s.mean, s2.mean) and np.array_equal(s.covariance, s2.covariance)
    # batching does not change the result beyond float rounding
    s3 = feature_statistics(imgs, F, batch_size=5)
    np.testing.assert_allclose(s3.mean, s.mean, atol=1e-6)


def test_duplicated_images_zero_covariance(rng):
    img = images(rng, 1)[0]
    s = feature_statistics([img] * 5, PerceptualExtractor(0))
    assert np.abs(s.covariance).max() == 0.0


def test_feature_statistics_errors(rng):
    with pytest.raises(ValidationError):
        feature_statistics(images(rng, 1), PerceptualExtractor(0))
    with pytest.raises(ConfigError):
        feature_statistics(images(rng, 3), set_trainable(PerceptualExtractor(0), True))


def test_evaluate_images_self_comparison(small_corpus, small_spec):
    x = images_to_tensor([s.image for s in small_corpus])
    gt = np.stack([decode_one_hot(s.label).grid for s in small_corpus])
    m, per_class, fd = evaluate_images(x, gt, x, PerceptualExtractor(0), small_spec.num_classes)
    assert m == 1.0 and fd < 1e-6
    assert all(v == 1.0 or np.isnan(v) for v in per_class)


def test_evaluate_end_to_end(tmp_path, small_spec):
    train = generate_corpus(12, 0, small_spec)
    write_dataset(train, small_spec, 0, tmp_path / "data")
    write_split(split_dataset(train, 0.34, 0), tmp_path / "data", 0, tmp_path / "split")
    write_dataset(generate_corpus(6, 1, small_spec), small_spec, 1, tmp_path / "val")
    cfg = TrainConfig(total_iterations=2, batch_size=2, noise_dim=8, g_channels=8, d_channels=4, checkpoint_interval=1)
    ckpt = run_training(cfg, tmp_path / "split", tmp_path / "run")
    r1 = evaluate(ckpt, tmp_path / "val", seed=3, out=tmp_path / "eval.json")
    r2 = evaluate(ckpt, tmp_path / "val", seed=3)
    assert r1.to_dict() == r2.to_dict()
    rep = json.loads((tmp_path / "eval.json").read_text())
    for key in ("miou", "per_class_iou", "frechet_distance", "extractor_id", "seeds", "hashes"):
        assert key in rep
    assert rep["hashes"]["val_manifest_sha256"] and rep["extractor_id"].startswith("randconv")
    assert 0 <= rep["miou"] <= 1 and rep["frechet_distance"] >= 0
    with pytest.raises(DataError):
        evaluate(ckpt, tmp_path / "data")

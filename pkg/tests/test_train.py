import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densecat import ops
from densecat.tensor import Tape, Tensor
from densecat.train import (AdamW, DatasetError, DatasetHandle, TrainConfig, TrainConfigError,
                            adamw_step, cosine_lr, cutmix, load_checkpoint, load_dataset, mixup,
                            one_hot, random_erase, read_cifar_records, save_checkpoint, sgd_step,
                            train)
from densecat.train.augment import cutmix_box, erase_box
from densecat.train.data import RECORD_BYTES
from densecat.zoo import ModelConfig, build_model, build_preset


# -- optimizers -------------------------------------------------------------------------


def test_sgd_zero_grad_no_decay_is_identity():
    w = np.array([1.0, -2.0])
    sgd_step([w], [np.zeros(2)], 0.1, 0.9, 0.0, [np.zeros(2)])
    np.testing.assert_array_equal(w, [1.0, -2.0])


def test_sgd_plain_step():
    w, g = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    sgd_step([w], [g], 0.1, 0.0, 0.0, [np.zeros(2)])
    np.testing.assert_array_equal(w, np.array([1.0, -2.0]) - 0.1 * g)


def test_sgd_momentum_recurrence():
    w0, g1, g2 = 1.5, 0.4, -0.3
    lr, mu, wd = 0.1, 0.9, 0.01
    w, v = np.array([w0]), np.array([0.0])
    sgd_step([w], [np.array([g1])], lr, mu, wd, [v])
    sgd_step([w], [np.array([g2])], lr, mu, wd, [v])
    v1 = g1 + wd * w0
    w1 = w0 - lr * v1
    v2 = mu * v1 + g2 + wd * w1
    assert abs(w[0] - (w1 - lr * v2)) < 1e-15


def test_adamw_zero_grad_shrinks_exactly():
    w = np.array([0.7, -1.3, 2.0])
    adamw_step([w], [np.zeros(3)], {}, lr=0.01, weight_decay=0.05)
    np.testing.assert_array_equal(w, np.array([0.7, -1.3, 2.0]) * (1 - 0.01 * 0.05))


def test_adamw_zero_grad_zero_decay_is_identity():
    w = np.array([0.7, -1.3])
    opt = AdamW([w])
    for _ in range(3):
        opt.step([np.zeros(2)], 0.1)
    np.testing.assert_array_equal(w, [0.7, -1.3])


def test_adamw_single_step_hand_oracle():
    w0, g, lr, wd, eps = 0.8, 0.3, 0.01, 0.1, 1e-8
    w = np.array([w0])
    adamw_step([w], [np.array([g])], {}, lr=lr, eps=eps, weight_decay=wd)
    # after bias correction m_hat = g, v_hat = g^2
    expect = w0 * (1 - lr * wd) - lr * g / (abs(g) + eps)
    assert abs(w[0] - expect) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 10), st.floats(1e-5, 0.1), st.integers(1, 5))
def test_adamw_sign_symmetry(g, lr, steps):
    a, b = np.array([0.0]), np.array([0.0])
    opt = AdamW([a, b])
    for _ in range(steps):
        opt.step([np.array([g]), np.array([-g])], lr)
    assert a[0] == -b[0]


def test_optimizer_rejects_non_finite_gradient():
    with pytest.raises(FloatingPointError, match="layer.weight"):
        adamw_step([np.zeros(2)], [np.array([np.nan, 0.0])], {}, 0.1, names=["layer.weight"])


# -- schedule ------------------------------------------------------------------------------


def test_cosine_endpoints_and_midpoint():
    T, W, hi, lo = 1000, 100, 0.1, 1e-4
    assert abs(cosine_lr(W, T, W, hi, lo) - hi) < 1e-12
    assert abs(cosine_lr(T, T, W, hi, lo) - lo) < 1e-12
    assert abs(cosine_lr((W + T) // 2, T, W, hi, lo) - (hi + lo) / 2) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 500), st.data())
def test_cosine_monotone_after_warmup_and_continuous(total, data):
    warmup = data.draw(st.integers(0, total - 1))
    lrs = [cosine_lr(t, total, warmup, 1.0, 0.01) for t in range(total + 1)]
    tail = lrs[warmup:]
    assert all(a >= b for a, b in zip(tail, tail[1:]))
    if warmup:
        assert lrs[warmup - 1] == 1.0 == lrs[warmup]


def test_cosine_rejects_out_of_range():
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1, 1.0)
    with pytest.raises(ValueError):
        cosine_lr(0, 10, 10, 1.0)


# -- augmentation ---------------------------------------------------------------------------


def batch(n=4, k=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 3, 8, 8)).astype(np.float32), one_hot(rng.integers(0, k, n), k)


def test_mixup_lambda_one_is_identity():
    x, y = batch()
    x2, y2 = mixup(x, y, 0.3, np.random.default_rng(0), lam=1.0)
    np.testing.assert_array_equal(x2, x)
    np.testing.assert_array_equal(y2, y)


def test_mixup_half_on_two_classes():
    x, _ = batch(2)
    y = np.eye(2)
    _, y2 = mixup(x, y, 0.3, np.random.default_rng(0), lam=0.5, perm=np.array([1, 0]))
    np.testing.assert_array_equal(y2, [[0.5, 0.5], [0.5, 0.5]])


def test_mixup_lambda_mean_is_one_half():
    lam = np.random.default_rng(0).beta(0.3, 0.3, 100_000)
    assert abs(lam.mean() - 0.5) < 0.01
    # the op draws from the same distribution
    rng = np.random.default_rng(1)
    x, y = batch(2, 2)
    y = np.eye(2)
    draws = [mixup(x, y, 0.3, rng, perm=np.array([1, 0]))[1][0, 0] for _ in range(20_000)]
    assert abs(np.mean(draws) - 0.5) < 0.01


def test_cutmix_lambda_one_no_box():
    x, y = batch()
    x2, y2, lam = cutmix(x, y, 1.0, np.random.default_rng(0), lam=1.0)
    np.testing.assert_array_equal(x2, x)
    np.testing.assert_array_equal(y2, y)
    assert lam == 1.0


def test_cutmix_full_box_swaps_labels():
    x, y = batch()
    perm = np.array([1, 2, 3, 0])
    x2, y2, lam = cutmix(x, y, 1.0, np.random.default_rng(0), box=(0, 8, 0, 8), perm=perm)
    np.testing.assert_array_equal(x2, x[perm])
    np.testing.assert_array_equal(y2, y[perm])
    assert lam == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_cutmix_label_weight_equals_pixel_fraction(seed, alpha):
    rng = np.random.default_rng(seed)
    x = np.zeros((3, 1, 9, 7), np.float32)
    x[1] = 1.0
    y = np.eye(3)
    x2, y2, _ = cutmix(x, y, alpha, rng, perm=np.array([1, 2, 0]))
    pasted = float(x2[0].sum()) / x2[0].size   # image 0 received ones from image 1
    assert y2[0, 1] == pasted
    np.testing.assert_array_equal(y2.sum(axis=1), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0), st.floats(0.05, 2.0))
def test_mixed_label_rows_sum_to_one(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = batch(5, 4, seed)
    _, y1 = mixup(x, y, a, rng)
    _, y2, _ = cutmix(x, y1, b, rng)
    for rows in (y1, y2):
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, rtol=0, atol=1e-15)


def test_random_erase_prob_zero_and_one():
    x, _ = batch(6)
    assert random_erase(x, 0.0, np.random.default_rng(0)) is x
    out, boxes = random_erase(x, 1.0, np.random.default_rng(0), return_boxes=True)
    for i, (y0, y1, x0, x1) in enumerate(boxes):
        changed = np.any(out[i] != x[i], axis=0)
        inside = np.zeros_like(changed)
        inside[y0:y1, x0:x1] = True
        assert not np.any(changed & ~inside)
        assert changed[inside].mean() > 0.99


def test_erased_area_matches_analytic_mean():
    rng = np.random.default_rng(0)
    h = w = 64
    fracs = []
    for _ in range(10_000):
        y0, y1, x0, x1 = erase_box(h, w, rng)
        fracs.append((y1 - y0) * (x1 - x0) / (h * w))
    fracs = np.array(fracs)
    analytic = (0.02 + 0.33) / 2
    se = (0.33 - 0.02) / math.sqrt(12) / math.sqrt(len(fracs))
    assert abs(fracs.mean() - analytic) < 4 * se


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 64), st.integers(4, 64), st.integers(0, 10_000))
def test_boxes_stay_inside(h, w, seed):
    rng = np.random.default_rng(seed)
    y0, y1, x0, x1 = erase_box(h, w, rng)
    assert 0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w
    y0, y1, x0, x1 = cutmix_box(h, w, float(rng.uniform()), rng)
    assert 0 <= y0 <= y1 <= h and 0 <= x0 <= x1 <= w


# -- datasets ------------------------------------------------------------------------------


def write_records(path, labels, images):
    with open(path, "wb") as fh:
        for lab, img in zip(labels, images):
            fh.write(bytes([lab]) + img.astype(np.uint8).tobytes())


def test_cifar_hand_built_fixture(tmp_path):
    imgs = np.zeros((2, 3, 32, 32), np.uint8)
    imgs[0, 0, 0, 0], imgs[0, 2, 31, 31] = 255, 17
    imgs[1, 1, 0, 31], imgs[1, 0, 31, 0] = 128, 3
    f = tmp_path / "test_batch.bin"
    write_records(f, [7, 2], imgs)
    assert f.stat().st_size // RECORD_BYTES == 2
    x, y = read_cifar_records(f)
    assert list(y) == [7, 2]
    assert (x[0, 0, 0, 0], x[0, 2, 31, 31], x[1, 1, 0, 31], x[1, 0, 31, 0]) == (255, 17, 128, 3)
    data = load_dataset(DatasetHandle("cifar10_binary", "test", str(tmp_path)))
    assert len(data) == 2 and data.image_shape == (3, 32, 32)


def test_cifar_truncated_file_reports_offset(tmp_path):
    f = tmp_path / "x.bin"
    write_records(f, [1, 2], np.zeros((2, 3, 32, 32)))
    f.write_bytes(f.read_bytes()[:-10])
    with pytest.raises(DatasetError, match=f"offset {RECORD_BYTES}"):
        read_cifar_records(f)


def test_cifar_missing_directory(tmp_path):
    with pytest.raises(DatasetError, match="does not exist"):
        load_dataset(DatasetHandle("cifar10_binary", path=str(tmp_path / "nope")))


def test_blobs_deterministic_first_batch():
    a = load_dataset(DatasetHandle(n=64, seed=3))
    b = load_dataset(DatasetHandle(n=64, seed=3))
    xa, ya = next(a.batches(16, seed=5))
    xb, yb = next(b.batches(16, seed=5))
    np.testing.assert_array_equal(xa, xb)
    np.testing.assert_array_equal(ya, yb)
    assert set(np.unique(a.labels)) <= set(range(10))


def test_blob_splits_differ_but_share_templates():
    tr = load_dataset(DatasetHandle(n=32, seed=1))
    te = load_dataset(DatasetHandle(n=32, seed=1, split="test"))
    assert not np.array_equal(tr.images, te.images)
    assert tr.mean == te.mean and tr.std == te.std


def test_dataset_handle_round_trip():
    h = DatasetHandle(n=10, noise=0.5)
    assert DatasetHandle.from_json(json.loads(json.dumps(h.to_json()))) == h


# -- training loop ------------------------------------------------------------------------


def tiny_model(classes, seed=0):
    cfg = ModelConfig(stem_channels=8, growth_rates=(8,), blocks=(1,), expansion_ratio=1.0,
                      transition_interval=1, kernel=3, num_classes=classes)
    return build_model(cfg).initialize(seed)


def small_cfg(**kw):
    base = dict(epochs=3, warmup_epochs=0, batch_size=32, base_lr=5e-3)
    base.update(kw)
    return TrainConfig.desk(**base)


def test_train_config_invariants():
    with pytest.raises(TrainConfigError, match="warmup"):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(TrainConfigError, match="random_erase_prob"):
        TrainConfig(random_erase_prob=1.5)
    with pytest.raises(TrainConfigError, match="unknown"):
        TrainConfig.from_json({"learning_rate": 1})
    cfg = TrainConfig.desk()
    assert TrainConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


def test_zero_epochs_reports_initial_accuracy():
    data = load_dataset(DatasetHandle(n=64, classes=4, dim=16))
    s = train(tiny_model(4), data, small_cfg(epochs=0))
    assert s.train_loss == [] and s.eval_acc == []
    assert s.initial_acc == s.final_acc and 0.0 <= s.initial_acc <= 1.0
    assert s.curves_csv() == "epoch,train_loss,eval_acc\n"


def test_first_batch_loss_near_log_k():
    k = 10
    data = load_dataset(DatasetHandle(n=64, classes=k, dim=32))
    g = build_preset("rdnet_mini").initialize(0)
    x, y = next(data.batches(32))
    logits = g.forward(Tensor(x), training=True, rng=np.random.default_rng(0))
    loss = ops.softmax_cross_entropy(logits, one_hot(y, k)).data.item()
    assert abs(loss - math.log(k)) / math.log(k) < 0.10


def test_separable_two_class_blobs_reach_high_accuracy():
    h = DatasetHandle(n=256, classes=2, dim=16, noise=0.1, max_shift=0, seed=4)
    tr, te = load_dataset(h), load_dataset(h.with_split("test"))
    s = train(tiny_model(2), tr, small_cfg(epochs=20, base_lr=1e-2), te)
    assert not s.failed
    assert s.final_acc >= 0.99


def test_training_is_bitwise_deterministic():
    data = load_dataset(DatasetHandle(n=96, classes=3, dim=16))
    cfg = small_cfg(mixup_alpha=0.3, cutmix_alpha=0.3, random_erase_prob=0.25, drop_path_rate=0.1,
                    label_smoothing=0.1)
    a = train(tiny_model(3, 1), data, cfg)
    b = train(tiny_model(3, 1), data, cfg)
    assert a.train_loss == b.train_loss and len(a.train_loss) == 3
    assert a.curves_csv() == b.curves_csv()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_recorded_not_raised():
    data = load_dataset(DatasetHandle(n=64, classes=3, dim=16))
    s = train(tiny_model(3), data, small_cfg(optimizer="sgd", base_lr=1e12, epochs=2))
    assert s.failed and ("non-finite" in s.failure)


def test_class_mismatch_is_rejected():
    data = load_dataset(DatasetHandle(n=32, classes=3, dim=16))
    with pytest.raises(TrainConfigError, match="outputs"):
        train(tiny_model(4), data, small_cfg())


def test_weight_decay_skips_vectors():
    # with zero learning signal only matrices shrink
    w_mat, w_vec = np.ones((2, 2)), np.ones(2)
    opt = AdamW([w_mat, w_vec], weight_decay=0.5, decay_mask=[True, False])
    opt.step([np.zeros((2, 2)), np.zeros(2)], 0.1)
    np.testing.assert_array_equal(w_mat, 0.95)
    np.testing.assert_array_equal(w_vec, 1.0)


def test_checkpoint_round_trip(tmp_path):
    data = load_dataset(DatasetHandle(n=64, classes=3, dim=16))
    g = tiny_model(3)
    train(g, data, small_cfg(epochs=1))
    bin_path, manifest = save_checkpoint(g, tmp_path / "ck.bin")
    doc = json.loads(manifest.read_text())
    assert doc["schema"] == "densecat.checkpoint/1"
    assert set(doc["tensors"]) == set(g.params) | set(g.buffers)
    h = load_checkpoint(bin_path)
    x = Tensor(data.images[:8])
    np.testing.assert_array_equal(g.forward(x).data, h.forward(x).data)

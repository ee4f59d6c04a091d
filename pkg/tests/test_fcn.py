import itertools
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from poredet.datasets import SyntheticParams, synthesize
from poredet.fcn import (CONV_TAG, MAGIC, PATCH_SIZES, CheckpointError, ConfigError, FcnConfig, FcnModel,
                         TrainingDiverged, _prepare, build_model, checkpoint_bytes, detect, infer_map,
                         load_checkpoint, load_checkpoint_bytes, make_label_map, nms, patch_forward,
                         sample_batches, save_checkpoint, train)
from poredet.imagecore import GrayImage, PoreSet
from poredet.nn import grad_check


def nms_oracle(m, thr, radius):
    """Literal greedy NMS: sort by (-prob, row, col), keep if farther than radius from all kept."""
    h, w = m.shape
    cands = [(-m[y, x], y, x) for y in range(h) for x in range(w) if m[y, x] >= thr]
    cands.sort()
    kept = []
    for _, y, x in cands:
        if all(math.hypot(x - kx, y - ky) > radius for kx, ky in kept):
            kept.append((x, y))
    return kept


# ---------------------------------------------------------------- config

def test_config_text_round_trip():
    cfg = FcnConfig(channels=(4, 5, 6, 7, 8, 9, 10), soft_labels=False, lr=3e-4, loss="focal")
    assert FcnConfig.from_text(cfg.to_text()) == cfg
    assert FcnConfig.from_text(FcnConfig().to_text()) == FcnConfig()


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        FcnConfig.from_text("bogus = 1")
    with pytest.raises(ConfigError):
        FcnConfig.from_text("use_pooling = maybe")
    with pytest.raises(ConfigError):
        FcnConfig(patch_size=16)
    with pytest.raises(ConfigError):
        FcnConfig(patch_size=9, pore_radius=5)
    with pytest.raises(ConfigError):
        FcnConfig(batch=0)
    with pytest.raises(ConfigError):
        FcnConfig(channels=(4, 4))


def test_suggested_defaults():
    cfg = FcnConfig()
    assert (cfg.patch_size, cfg.pore_radius, cfg.use_pooling, cfg.use_residual, cfg.soft_labels) == \
        (17, 5, False, False, True)
    assert cfg.lr == 1e-3 and cfg.batch == 128 and cfg.patience == 10
    assert cfg.effective_nms_radius == 5.0


# ---------------------------------------------------------------- architecture

@pytest.mark.parametrize("patch,pool,convs,pools", [(17, False, 8, 0), (13, True, 3, 3), (19, False, 9, 0),
                                                    (15, True, 4, 3), (19, True, 5, 4)])
def test_layer_counts(patch, pool, convs, pools):
    m = build_model(FcnConfig(patch_size=patch, pore_radius=4, use_pooling=pool))
    s = m.layer_summary()
    assert sum(x.startswith("conv") for x in s) == convs
    assert s.count("maxpool3x3") == pools
    out = m.predict(np.zeros((2, 1, patch, patch)))
    assert out.shape == (2, 1, 1, 1)


def test_channel_schedule():
    assert FcnConfig().hidden_channels() == (16, 32, 64, 128, 128, 128, 128)
    m = build_model(FcnConfig())
    assert m.convs[-1].out_channels == 1 and m.convs[0].in_channels == 1


@pytest.mark.parametrize("patch,pool", list(itertools.product(PATCH_SIZES, (False, True))))
def test_residual_plans_valid(patch, pool):
    m = build_model(FcnConfig(patch_size=patch, pore_radius=4, use_pooling=pool, use_residual=True))
    assert "residual" in m.layer_summary()
    assert m.predict(np.zeros((1, 1, patch, patch))).shape == (1, 1, 1, 1)


def test_residual_narrowing_rejected():
    with pytest.raises(ConfigError):
        build_model(FcnConfig(patch_size=13, pore_radius=4, use_residual=True, channels=(8, 8, 4, 4, 4)))


def test_model_rejects_wrong_shapes():
    m = build_model(FcnConfig(patch_size=13, pore_radius=4))
    with pytest.raises(ConfigError):
        FcnModel(FcnConfig(patch_size=15, pore_radius=4), m.convs)
    with pytest.raises(ValueError):
        m.predict(np.zeros((1, 1, 11, 11)))


# ---------------------------------------------------------------- labels

def test_label_values():
    lab = make_label_map(PoreSet.from_points([(10, 10)]), (21, 31), 5, soft=True)
    assert lab[10, 10] == 1.0
    assert lab[10, 15] == 0.0
    # d = 2.5 only at sub-pixel positions; the closed form at d = 2 and d = 3 brackets it
    assert lab[10, 12] == pytest.approx(0.6) and lab[10, 13] == pytest.approx(0.4)
    y, x = np.mgrid[0:21, 0:31]
    d = np.hypot(x - 10, y - 10)
    np.testing.assert_allclose(lab, np.clip((5 - d) / 5, 0, 1), atol=1e-6)
    hard = make_label_map(PoreSet.from_points([(10, 10)]), (21, 31), 5, soft=False)
    np.testing.assert_array_equal(hard, (d < 5).astype(np.float32))
    assert hard[10, 15] == 0.0


def test_soft_label_half_at_half_radius():
    assert (5 - 2.5) / 5 == 0.5
    lab = make_label_map(PoreSet.from_points([(0, 0)]), (1, 1), 5)
    assert lab[0, 0] == 1.0


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 29), st.integers(0, 19)), min_size=1, max_size=8, unique=True),
       st.integers(1, 6))
def test_soft_labels_properties(points, r):
    lab = make_label_map(PoreSet.from_points(points), (20, 30), r)
    assert lab.min() >= 0 and lab.max() <= 1
    ones = set(zip(*np.nonzero(lab == 1.0)))
    assert ones == {(y, x) for x, y in points}
    # Lipschitz with constant 1/r along both axes
    assert np.abs(np.diff(lab, axis=0)).max() <= 1 / r + 1e-6
    assert np.abs(np.diff(lab, axis=1)).max() <= 1 / r + 1e-6


# ---------------------------------------------------------------- sampling

def _small_data(n=2, seed=0):
    return [(s.image, s.pores) for s in (synthesize(SyntheticParams(width=64, height=48, seed=seed + i))
                                         for i in range(n))]


def test_sampling_balance_and_determinism():
    cfg = FcnConfig(patch_size=13, pore_radius=4, batch=64)
    data = _prepare(_small_data(), cfg)
    batches = list(sample_batches(data, cfg, 5))
    again = list(sample_batches(data, cfg, 5))
    ts = np.concatenate([t.ravel() for _, t in batches])
    assert (ts > 0).sum() == (ts == 0).sum() == sum(int((d.labels > 0).sum()) for d in data)
    for (a, b), (c, d) in zip(batches, again):
        np.testing.assert_array_equal(a, c)
        np.testing.assert_array_equal(b, d)
    assert all(len(x) <= 64 for x, _ in batches)
    other = list(sample_batches(data, cfg, 6))
    assert not np.array_equal(batches[0][0], other[0][0])


def test_positive_patch_centres_are_labelled():
    cfg = FcnConfig(patch_size=13, pore_radius=4)
    data = _prepare(_small_data(1), cfg)
    padded = np.pad(data[0].image.pixels, 6, mode="reflect")
    for xs, ts in sample_batches(data, cfg, 1):
        for patch, t in zip(xs[:, 0], ts.ravel()):
            centre = patch[6, 6]
            # the target equals the label at the pixel this patch is centred on
            ys, xs_ = np.nonzero(np.isclose(data[0].image.pixels, centre))
            assert any(data[0].labels[y, x] == t for y, x in zip(ys, xs_))
        break


def test_epoch_positive_cap():
    cfg = FcnConfig(patch_size=13, pore_radius=4, epoch_positives=50)
    ts = np.concatenate([t.ravel() for _, t in sample_batches(_prepare(_small_data(), cfg), cfg, 0)])
    assert (ts > 0).sum() == 50 and (ts == 0).sum() == 50


def test_image_without_pores_gives_negatives():
    cfg = FcnConfig(patch_size=13, pore_radius=4, batch=16)
    data = _prepare([(GrayImage(np.zeros((20, 20))), PoreSet())], cfg)
    ts = np.concatenate([t.ravel() for _, t in sample_batches(data, cfg, 0)])
    assert len(ts) == 16 and np.all(ts == 0)


# ---------------------------------------------------------------- inference

ARCHS = list(itertools.product(PATCH_SIZES, (False, True), (False, True)))


@pytest.mark.parametrize("patch,pool,res", ARCHS)
def test_dense_equals_patchwise(patch, pool, res):
    cfg = FcnConfig(patch_size=patch, pore_radius=4, use_pooling=pool, use_residual=res, seed=patch)
    n = cfg.n_convs - 1
    model = build_model(FcnConfig(**{**cfg.__dict__, "channels": (6,) * n}), dtype=np.float64)
    rng = np.random.default_rng(patch + 2 * pool + res)
    img = GrayImage(rng.random((37, 45)))
    dense = infer_map(model, img, max_bytes=200_000)  # several strips
    pts = np.stack([rng.integers(0, 45, 50), rng.integers(0, 37, 50)], axis=1)
    ref = patch_forward(model, img, pts)
    np.testing.assert_allclose(dense[pts[:, 1], pts[:, 0]], ref, atol=1e-5)


def test_infer_map_constant_and_shape():
    model = build_model(FcnConfig(patch_size=13, pore_radius=4, channels=(4, 4, 4, 4, 4)))
    m = infer_map(model, GrayImage(np.full((20, 30), 0.4)))
    assert m.shape == (20, 30)
    assert np.ptp(m) < 1e-6 and np.all((m > 0) & (m < 1))
    with pytest.raises(ValueError):
        infer_map(model, GrayImage(np.zeros((10, 30))))


def test_nms_basic():
    m = np.zeros((20, 20))
    m[5, 5], m[5, 8] = 0.9, 0.8
    assert nms(m, 0.5, 5).as_tuples() == [(5, 5)]
    m = np.zeros((10, 10))
    m[3, 4] = 0.7
    assert nms(m, 0.5, 5).as_tuples() == [(4, 3)]
    with pytest.raises(ValueError):
        nms(m, 1.0, 5)
    with pytest.raises(ValueError):
        nms(m, 0.5, 0.5)


@settings(max_examples=200)
@given(arrays(np.float64, st.tuples(st.integers(1, 24), st.integers(1, 24)),
              elements=st.sampled_from([0.0, 0.3, 0.5, 0.6, 0.75, 0.9, 1.0]) | st.floats(0, 1)),
       st.sampled_from([0.3, 0.5, 0.7]), st.sampled_from([1.0, 1.5, 2.0, 3.0, 5.0]))
def test_nms_matches_oracle(m, thr, radius):
    out = nms(m, thr, radius)
    assert out.as_tuples() == nms_oracle(m, thr, radius)
    p = out.points.astype(float)
    if len(p) > 1:
        d = np.hypot(p[:, None, 0] - p[None, :, 0], p[:, None, 1] - p[None, :, 1])
        assert d[np.triu_indices(len(p), 1)].min() > radius
    # idempotent on its own impulse map
    imp = np.zeros_like(m)
    imp[out.points[:, 1], out.points[:, 0]] = 1.0
    assert sorted(nms(imp, thr, radius).as_tuples()) == sorted(out.as_tuples())


# ---------------------------------------------------------------- gradient check

@pytest.mark.parametrize("patch,pool,res", [(13, False, False), (13, True, True), (15, False, True),
                                            (15, True, False)])
def test_grad_check_small_configs(patch, pool, res):
    cfg = FcnConfig(patch_size=patch, pore_radius=4, use_pooling=pool, use_residual=res,
                    channels=(6,) * (FcnConfig(patch_size=patch, pore_radius=4, use_pooling=pool).n_convs - 1))
    model = build_model(cfg, dtype=np.float64)
    rng = np.random.default_rng(patch)
    x, t = rng.random((4, 1, patch, patch)), rng.random((4, 1, 1, 1))
    assert grad_check(model, x, t, max_params=None) < 1e-5
    assert grad_check(model, x, t, max_params=None, loss="focal") < 1e-5
    assert grad_check(model, x, t, max_params=30, corrupt=1.1) > 1e-2
    assert grad_check(model, np.zeros_like(x), t, max_params=None) < 1e-5


class _Linear:
    """Smooth one-layer model without kink support: exercises the plain stencil."""

    def __init__(self, rng):
        self.w = rng.standard_normal((3,))

    def params(self):
        return [self.w]

    def forward(self, x):
        z = x @ self.w
        return 1 / (1 + np.exp(-z)), x

    def predict(self, x):
        return self.forward(x)[0]

    def backward(self, x, dz):
        return [dz @ x]


def test_grad_check_plain_model():
    rng = np.random.default_rng(0)
    m = _Linear(rng)
    x, t = rng.standard_normal((5, 3)), rng.random(5)
    assert grad_check(m, x, t) < 1e-7
    assert grad_check(m, x, t, corrupt=1.1) > 1e-2


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    cfg = FcnConfig(patch_size=13, pore_radius=4, channels=(3, 4, 5, 6, 7), seed=9)
    model = build_model(cfg)
    path = tmp_path / "m.pdet"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.config == cfg
    for a, b in zip(model.params(), back.params()):
        np.testing.assert_array_equal(a, b)
    img = GrayImage(np.random.default_rng(0).random((25, 25)))
    np.testing.assert_array_equal(infer_map(model, img), infer_map(back, img))
    data = path.read_bytes()
    assert data[:4] == MAGIC and struct.unpack("<I", data[4:8])[0] == 1 and CONV_TAG in data


def test_checkpoint_errors():
    data = checkpoint_bytes(build_model(FcnConfig(patch_size=13, pore_radius=4, channels=(2, 2, 2, 2, 2))))
    for cut in (2, 6, 10, 40, len(data) - 3):
        with pytest.raises(CheckpointError):
            load_checkpoint_bytes(data[:cut])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint_bytes(b"XXXX" + data[4:])
    # drop the last layer: shapes no longer match the config
    last = data.rfind(CONV_TAG)
    with pytest.raises(CheckpointError):
        load_checkpoint_bytes(data[:last])


# ---------------------------------------------------------------- training

TINY = dict(patch_size=13, pore_radius=4, channels=(8, 8, 8, 8, 8), epoch_positives=600, batch=64)


def test_training_deterministic():
    data = _small_data(3, seed=20)
    cfg = FcnConfig(**TINY, max_epochs=2, seed=4)
    a = train(data[:2], data[2:], cfg)
    b = train(data[:2], data[2:], cfg)
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
    assert [e.loss for e in a.log] == [e.loss for e in b.log]


def test_patience_with_frozen_weights():
    data = _small_data(2, seed=30)
    res = train(data[:1], data[1:], FcnConfig(**TINY, lr=0.0, patience=1, max_epochs=10))
    assert len(res.log) == 2 and res.best_epoch == 1


def test_divergence_raises(monkeypatch):
    import poredet.fcn as fcn
    data = _small_data(2, seed=40)
    monkeypatch.setattr(fcn.nn, "loss_bce", lambda p, t: float("nan"))
    with pytest.raises(TrainingDiverged):
        train(data[:1], data[1:], FcnConfig(**TINY, max_epochs=1))


def test_train_needs_data():
    with pytest.raises(ValueError):
        train([], _small_data(1), FcnConfig(**TINY))


def test_detect_blank_image_nearly_empty():
    data = _small_data(3, seed=50)
    res = train(data[:2], data[2:], FcnConfig(**TINY, max_epochs=3))
    assert len(detect(res.model, GrayImage(np.full((48, 64), 0.8)))) <= 2
    img = data[0][0]
    np.testing.assert_array_equal(detect(res.model, img).points, detect(res.model, img).points)


@pytest.mark.slow
def test_validation_f_improves_early():
    """10 training images: validation F rises strictly over the first 3 epochs in >= 2 of 3 seeds."""
    imgs = [(s.image, s.pores) for s in (synthesize(SyntheticParams(seed=100 + i)) for i in range(12))]
    ok = 0
    for seed in range(3):
        cfg = FcnConfig(channels=(16,) * 7, epoch_positives=8000, max_epochs=3, patience=3, seed=seed)
        fs = [e.val_f for e in train(imgs[:10], imgs[10:], cfg).log]
        ok += fs[0] < fs[1] < fs[2]
    assert ok >= 2

import csv

import numpy as np
import pytest

from voxatlas import losses, nnet, trainer, transform
from voxatlas.atlas import Atlas
from voxatlas.trainer import TrainConfig, make_networks, segment, train_step
from voxatlas.volume import Kind, Volume

DIMS = (16, 16, 16)


@pytest.fixture(scope="module")
def mean_atlas(small_subjects):
    frames = [f for s in small_subjects[:4] for _, f in s.frames()]
    sp = frames[0][0].spacing
    return Atlas(Volume(np.mean([f[0].data for f in frames], axis=0), sp),
                 Volume(np.mean([f[1].data for f in frames], axis=0), sp))


def _case(small_subjects):
    return small_subjects[0].ed


def _weights(net):
    return {k: p.data.copy() for k, p in net.parameters().items()}


def test_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=4).validate()
    with pytest.raises(ValueError, match="optimizer"):
        TrainConfig(optimizer="rmsprop").validate()
    assert TrainConfig(use_consistency=False).weights == (0.0, 0.0)
    assert TrainConfig().weights == (0.6, 0.4)


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_zero_lr_leaves_weights(small_subjects, mean_atlas, optimizer):
    cfg = TrainConfig(lr=0.0, optimizer=optimizer)
    G, D = make_networks(DIMS, cfg)
    before_g, before_d = _weights(G), _weights(D)
    x, y = _case(small_subjects)
    report = train_step(G, D, x, y, mean_atlas, cfg)
    for k, v in _weights(G).items():
        np.testing.assert_array_equal(v, before_g[k])
    for k, v in _weights(D).items():
        np.testing.assert_array_equal(v, before_d[k])
    assert np.isfinite([report.l_cgan, report.l_cgan_d, report.l_label, report.l_intensity]).all()
    assert report.l_label > 0


def test_report_obeys_linear_combination(small_subjects, mean_atlas):
    cfg = TrainConfig()
    G, D = make_networks(DIMS, cfg)
    x, y = _case(small_subjects)
    r = train_step(G, D, x, y, mean_atlas, cfg)
    assert r.total == pytest.approx(r.l_cgan + 0.6 * r.l_label + 0.4 * r.l_intensity, abs=1e-12)
    assert -2.0 <= r.l_intensity <= -1.0
    assert r.l_cgan_d <= 0


def test_no_consistency_never_evaluates_consistency_losses(small_subjects, mean_atlas):
    for variant in ("atlas-gan-wa", "3D-cGAN"):
        cfg = trainer.variant_config(variant, TrainConfig())
        G, D = make_networks(DIMS, cfg)
        before = dict(losses.CALLS)
        x, y = _case(small_subjects)
        r = train_step(G, D, x, y, mean_atlas, cfg)
        assert dict(losses.CALLS) == before
        assert r.l_label == r.l_intensity == 0.0 and r.total == r.l_cgan


class _PerfectD(nnet.Discriminator):
    """Saturates towards 'real' for binary labels and 'fake' otherwise."""

    def forward(self, x, label):
        super().forward(x, label)
        real = np.all((label == 0) | (label == 1))
        self._logits = self._logits + (np.array([60.0, -60.0]) if real else np.array([-60.0, 60.0]))
        return 0.0


def test_perfect_discriminator(small_subjects, mean_atlas):
    cfg = TrainConfig(use_consistency=False, lr=0.0)
    G, _ = make_networks(DIMS, cfg)
    D = _PerfectD(DIMS, np.random.default_rng(0))
    G.head.weight.data = np.random.default_rng(1).normal(0, 1e-3, G.head.weight.data.shape)
    x, y = _case(small_subjects)
    r = train_step(G, D, x, y, mean_atlas, cfg)
    assert r.l_cgan == pytest.approx(-losses.LOG_FLOOR)
    assert r.l_cgan_d == pytest.approx(0.0, abs=1e-12)
    assert np.abs(G.head.weight.grad).max() > 0


def test_nonfinite_loss_names_term(small_subjects, mean_atlas, monkeypatch):
    cfg = TrainConfig()
    G, D = make_networks(DIMS, cfg)
    x, y = _case(small_subjects)
    bad = np.array(y.data)
    bad[0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="l_cgan_d"):
        train_step(G, D, x, bad, mean_atlas, cfg)
    monkeypatch.setattr(losses, "nmi", lambda x, g, bins: (float("inf"), np.zeros_like(g)))
    with pytest.raises(FloatingPointError, match="l_intensity"):
        train_step(G, D, x, y, mean_atlas, cfg)


def test_segment_zero_head_is_resampled_atlas(small_subjects, mean_atlas):
    G, _ = make_networks(DIMS, TrainConfig())
    x = small_subjects[5].ed[0]
    label, params, seconds = segment(G, mean_atlas, x)
    assert label.kind == Kind.LABEL and seconds >= 0
    np.testing.assert_array_equal(label.data, (mean_atlas.label.data >= 0.5).astype(float))
    np.testing.assert_allclose(params.values, transform.ParamVector.identity().values, atol=1e-12)
    again = segment(G, mean_atlas, x)
    assert again[0].data.tobytes() == label.data.tobytes()


def test_segment_shape_mismatch(mean_atlas):
    G, _ = make_networks(DIMS, TrainConfig())
    with pytest.raises(ValueError, match="shape"):
        segment(G, mean_atlas, Volume(np.zeros((8, 8, 8))))


def test_segment_counts_one_forward_and_one_warp(small_subjects, mean_atlas, monkeypatch):
    G, _ = make_networks(DIMS, TrainConfig())
    counts = {"forward": 0, "warp": 0}
    body_forward, warp = G.body.forward, transform.warp_array

    def counted_forward(x):
        counts["forward"] += 1
        return body_forward(x)

    def counted_warp(*a, **k):
        counts["warp"] += 1
        return warp(*a, **k)

    monkeypatch.setattr(G.body, "forward", counted_forward)
    monkeypatch.setattr(transform, "warp_array", counted_warp)
    segment(G, mean_atlas, small_subjects[5].es[0])
    assert counts == {"forward": 1, "warp": 1}


def test_fit_logs_and_restores_best(tmp_path, small_subjects, mean_atlas):
    cfg = TrainConfig(epochs=3, patience=1, lr=1e-3)
    G, D = make_networks(DIMS, cfg)
    log = tmp_path / "train.csv"
    history = trainer.fit(G, D, small_subjects[:2], mean_atlas, cfg, small_subjects[4:], log)
    rows = list(csv.reader(log.open()))
    assert rows[0] == losses.CSV_HEADER
    assert len(rows) == 1 + 4 * len(history)
    best = max(h[2] for h in history)
    assert trainer.mean_dice(G, mean_atlas, trainer._frames(small_subjects[4:])) == pytest.approx(best)


def test_fit_is_deterministic(small_subjects, mean_atlas):
    cfg = TrainConfig(epochs=2, lr=1e-3)
    runs = []
    for _ in range(2):
        G, D = make_networks(DIMS, cfg)
        trainer.fit(G, D, small_subjects[:2], mean_atlas, cfg)
        runs.append(G.head.weight.data.tobytes() + D.head.weight.data.tobytes())
    assert runs[0] == runs[1]


def test_training_reduces_label_loss(small_subjects, mean_atlas):
    # a displaced atlas leaves something to learn
    atlas = Atlas(mean_atlas.intensity.with_data(np.roll(mean_atlas.intensity.data, 2, axis=0)),
                  mean_atlas.label.with_data(np.roll(mean_atlas.label.data, 2, axis=0)))
    cfg = TrainConfig(epochs=15, lr=1e-3, use_consistency=True)
    G, D = make_networks(DIMS, cfg)
    frames = trainer._frames(small_subjects[:2])

    def label_loss():
        return np.mean([losses.l1_label(y, G.forward(x.data, atlas)["g_label"])[0]
                        for x, y in frames])

    start = label_loss()
    trainer.fit(G, D, small_subjects[:2], atlas, cfg)
    assert label_loss() < 0.8 * start


def test_component_rngs_are_independent():
    a = trainer.component_rng(0, "generator").random()
    assert a == trainer.component_rng(0, "generator").random()
    assert a != trainer.component_rng(0, "discriminator").random()
    assert a != trainer.component_rng(1, "generator").random()


def test_variant_configs():
    base = TrainConfig()
    assert trainer.variant_config("atlas-gan-wa", base).weights == (0.0, 0.0)
    assert not trainer.variant_config("3D-cGAN", base).use_atlas_head
    with pytest.raises(ValueError):
        trainer.variant_config("3D-Atlas", base)
    G, _ = make_networks(DIMS, trainer.variant_config("3D-cGAN", base))
    assert isinstance(G, nnet.DecoderGenerator)

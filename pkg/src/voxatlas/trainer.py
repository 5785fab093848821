"""Adversarial training of the atlas generator, inference, and the ablation study."""

from __future__ import annotations

import csv
import logging
import time
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import losses, nnet, transform
from .atlas import Atlas, AtlasConfig, build_atlas, segment_by_registration
from .metrics import EmptyMaskError, MetricReport, dice, ejection_fraction
from .transform import ParamVector
from .volume import Volume

OPTIMIZERS = ("sgd", "adam")

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    momentum: float = 0.5
    batch_size: int = 1
    alpha: float = losses.ALPHA
    beta: float = losses.BETA
    epochs: int = 200
    seed: int = 0
    use_atlas_head: bool = True
    use_consistency: bool = True
    # "adam" reads ``momentum`` as beta1
    optimizer: str = "adam"
    patience: int = 20
    bins: int = losses.DEFAULT_BINS
    # scale of the adversarial term in the generator step; the logged total is unscaled
    adv_weight: float = 0.01

    def validate(self) -> "TrainConfig":
        if self.batch_size != 1:
            raise ValueError("only batch_size = 1 is supported")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0, 1)")
        if self.adv_weight < 0:
            raise ValueError("adv_weight must be >= 0")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")
        return self

    @property
    def weights(self) -> tuple[float, float]:
        """Effective (alpha, beta); both zero when the consistency terms are off."""
        return (self.alpha, self.beta) if self.use_consistency else (0.0, 0.0)


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream for one named component of a seeded run."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def make_networks(dims, cfg: TrainConfig, grid_dims=transform.DEFAULT_GRID):
    if cfg.use_atlas_head:
        g = nnet.Generator(dims, component_rng(cfg.seed, "generator"), grid_dims)
    else:
        g = nnet.DecoderGenerator(dims, component_rng(cfg.seed, "generator"))
    return g, nnet.Discriminator(dims, component_rng(cfg.seed, "discriminator"))


def _step(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        nnet.adam_step(params, cfg.lr, cfg.momentum)
    else:
        nnet.sgd_step(params, cfg.lr, cfg.momentum)


def _finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss term {name}: {value}")
    return float(value)


def _clamped(log_p: float) -> float:
    return max(float(log_p), losses.LOG_FLOOR)


def _data(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def train_step(G, D, x, y, atlas: Atlas | None, cfg: TrainConfig) -> losses.LossReport:
    """One discriminator update followed by one generator update.

    The discriminator ascends ``log D(x, y) + log(1 - D(x, G(x)))``; the
    generator descends ``-log D(x, G(x)) + alpha * L1 + beta * NMI``. Reported
    log terms are clamped at ``log(1e-7)``; gradients come from the log-softmax
    and stay finite.
    """
    x, y = _data(x), _data(y)
    alpha, beta = cfg.weights
    fwd = G.forward(x, atlas)
    g_label = fwd["g_label"]

    # discriminator phase
    D.zero_grad()
    D.forward(x, y)
    log_real = D.log_probs
    D.backward_logits(-(np.array([1.0, 0.0]) - np.exp(log_real)))
    D.forward(x, g_label)
    log_fake = D.log_probs
    D.backward_logits(-(np.array([0.0, 1.0]) - np.exp(log_fake)))
    l_d = _finite("l_cgan_d", _clamped(log_real[0]) + _clamped(log_fake[1]))
    _step(D.parameters(), cfg)

    # generator phase against the updated discriminator
    G.zero_grad()
    D.forward(x, g_label)
    log_p = D.log_probs
    l_adv = _finite("l_cgan_g", -_clamped(log_p[0]))
    d_label = D.backward_logits(cfg.adv_weight * (np.exp(log_p) - np.array([1.0, 0.0])))
    l_label = l_int = 0.0
    d_int = None
    if cfg.use_consistency:
        l_label, dl = losses.l1_label(y, g_label)
        l_label = _finite("l_label", l_label)
        d_label = d_label + alpha * dl
        if fwd["g_intensity"] is not None:
            l_int, dn = losses.nmi(x, fwd["g_intensity"], cfg.bins)
            l_int = _finite("l_intensity", l_int)
            d_int = beta * dn
    G.backward(fwd, atlas, d_label, d_int)
    _step(G.parameters(), cfg)
    return losses.combine(l_adv, l_label, l_int, alpha, beta, l_d)


def segment(G, atlas: Atlas | None, x) -> tuple[Volume, ParamVector | None, float]:
    """One generator pass; the atlas head output warps the atlas label (nearest, >= 0.5)."""
    spacing = x.spacing if isinstance(x, Volume) else (1.0, 1.0, 1.0)
    arr = _data(x)
    if tuple(arr.shape) != tuple(G.dims):
        raise ValueError(f"shape mismatch: input {arr.shape}, generator expects {G.dims}")
    start = time.perf_counter()
    if isinstance(G, nnet.Generator):
        params = G.predict_params(arr)
        soft = transform.warp_array(params, atlas.label.data, G.dims, nearest=True)
    else:
        params = None
        soft = G.segment_soft(arr)
    label = Volume.label(soft >= 0.5, spacing)
    return label, params, time.perf_counter() - start


def mean_dice(G, atlas, cases) -> float:
    return float(np.mean([dice(segment(G, atlas, x)[0], y) for x, y in cases]))


def _frames(subjects):
    return [frame for s in subjects for _, frame in s.frames()]


def fit(G, D, train_subjects, atlas, cfg: TrainConfig, val_subjects=None, log_path=None):
    """Epoch loop with shuffling and early stopping on validation Dice.

    Returns the history list ``[(epoch, mean train total, val dice), ...]``; the
    best-scoring weights are restored before returning.
    """
    cfg.validate()
    train = _frames(train_subjects)
    val = _frames(val_subjects) if val_subjects else []
    rng = component_rng(cfg.seed, "shuffle")
    history = []
    best_score, best_state, stale = -np.inf, None, 0
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(losses.CSV_HEADER)
    try:
        for epoch in range(cfg.epochs):
            totals = []
            for step, i in enumerate(rng.permutation(len(train))):
                report = train_step(G, D, train[i][0], train[i][1], atlas, cfg)
                totals.append(report.total)
                if fh is not None:
                    writer.writerow(report.csv_row(epoch, step))
            score = mean_dice(G, atlas, val) if val else float("nan")
            history.append((epoch, float(np.mean(totals)), score))
            log.info("epoch %d  mean total %.4f  val dice %.4f", epoch, history[-1][1], score)
            if val:
                if score > best_score:
                    best_score, stale = score, 0
                    best_state = (G.state(), D.state())
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
    finally:
        if fh is not None:
            fh.close()
    if best_state is not None:
        G.load_state(best_state[0])
        D.load_state(best_state[1])
    return history


def evaluate(segment_fn, subjects, bootstrap=1000, seed=0) -> MetricReport:
    """``segment_fn(volume) -> (label, seconds)`` applied to both frames of each subject."""
    report = MetricReport(bootstrap=bootstrap, seed=seed)
    for s in subjects:
        preds = {}
        for frame, (img, lab) in s.frames():
            pred, seconds = segment_fn(img)
            report.add_case(f"{s.subject_id}_{frame}", pred, lab, seconds)
            preds[frame] = pred
        try:
            report.add_ef(ejection_fraction(preds["ED"], preds["ES"]), s.ef)
        except EmptyMaskError:
            report.add_ef(float("nan"), s.ef)
    return report


ABLATION_ROWS = ("3D-Atlas", "3D-cGAN", "atlas-gan-wa", "atlas-gan")


@dataclass(frozen=True)
class AblationConfig:
    train: TrainConfig = TrainConfig()
    atlas: AtlasConfig = AtlasConfig()
    atlas_cases: int = 8
    bootstrap: int = 1000


def variant_config(name: str, cfg: TrainConfig) -> TrainConfig:
    if name == "atlas-gan":
        return replace(cfg, use_atlas_head=True, use_consistency=True)
    if name == "atlas-gan-wa":
        return replace(cfg, use_atlas_head=True, use_consistency=False)
    if name == "3D-cGAN":
        return replace(cfg, use_atlas_head=False, use_consistency=False)
    raise ValueError(f"unknown trained variant {name!r}")


def atlas_subset(subjects, n: int):
    """First ``n`` training frames, alternating ED and ES across subjects."""
    cases, ids = [], []
    for i, s in enumerate(subjects):
        frame, pair = list(s.frames())[i % 2]
        cases.append(pair)
        ids.append(f"{s.subject_id}_{frame}")
        if len(cases) == n:
            break
    return cases, ids


def run_ablation(train_subjects, val_subjects, cfg: AblationConfig, out_dir=None,
                 atlas: Atlas | None = None, timings: dict | None = None) -> dict[str, MetricReport]:
    """Registration baseline plus the three trained variants, in ``ABLATION_ROWS`` order.

    If ``timings`` is given it receives wall seconds per phase: ``"atlas"`` and
    one entry per row (training plus evaluation).
    """
    timings = {} if timings is None else timings
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if atlas is None:
        cases, ids = atlas_subset(train_subjects, cfg.atlas_cases)
        log.info("building atlas from %d frames", len(cases))
        atlas = build_atlas(cases, cfg.atlas, ids)
    timings["atlas"] = time.perf_counter() - start
    if out is not None:
        atlas.save(out / "atlas")
    reports = {}

    def by_registration(img):
        start = time.perf_counter()
        pred = segment_by_registration(atlas, img, cfg.atlas.registration)
        return pred, time.perf_counter() - start

    log.info("registration baseline")
    start = time.perf_counter()
    reports["3D-Atlas"] = evaluate(by_registration, val_subjects, cfg.bootstrap, cfg.train.seed)
    timings["3D-Atlas"] = time.perf_counter() - start
    for name in ABLATION_ROWS[1:]:
        start = time.perf_counter()
        vcfg = variant_config(name, cfg.train)
        dims = train_subjects[0].ed[0].dims
        G, D = make_networks(dims, vcfg)
        log_path = out / f"{name}_train.csv" if out is not None else None
        log.info("training %s", name)
        history = fit(G, D, train_subjects, atlas, vcfg, val_subjects, log_path)
        if out is not None:
            nnet.save_checkpoint(out / f"{name}.vnet", {"G": G, "D": D})
            write_history(out / f"{name}_history.csv", history)

        def by_generator(img, G=G):
            label, _, seconds = segment(G, atlas, img)
            return label, seconds

        reports[name] = evaluate(by_generator, val_subjects, cfg.bootstrap, cfg.train.seed)
        timings[name] = time.perf_counter() - start
        log.info("%s done in %.0f s, val dice %.4f", name, timings[name], reports[name].mean_std("dice")[0])
    if out is not None:
        write_table(out / "table.csv", reports)
        for name, rep in reports.items():
            rep.write_csv(out / f"{name}_cases.csv")
    return reports


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch,mean_total,val_dice\n")
        for epoch, total, score in history:
            fh.write(f"{epoch},{total:.6f},{score:.6f}\n")


TABLE_COLUMNS = ["method", "dice", "dice_std", "msd_mm", "msd_mm_std", "hsd_mm", "hsd_mm_std",
                 "corr_ef", "corr_ef_std", "seconds"]


def write_table(path, reports: dict[str, MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for name, rep in reports.items():
            s = rep.summary()
            w.writerow([name] + [f"{s[c]:.6f}" for c in TABLE_COLUMNS[1:]])


def config_dict(cfg) -> dict:
    return asdict(cfg)

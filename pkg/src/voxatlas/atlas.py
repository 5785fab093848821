"""Mean-space atlas construction and the registration-only segmentation baseline."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses, transform
from .transform import ParamVector
from .volume import Kind, Volume, read_vvol, write_vvol


@dataclass(frozen=True)
class RegistrationConfig:
    affine_steps: int = 100
    joint_steps: int = 200
    # Adam first-moment decay, matching the training optimiser
    momentum: float = 0.5
    beta2: float = 0.999
    # per-step sizes: matrix entries are unitless, translation and FFD in voxels
    lr_matrix: float = 0.005
    lr_translation: float = 0.1
    lr_ffd: float = 0.05
    max_step: float = 0.5
    bins: int = losses.DEFAULT_BINS
    grid_dims: tuple[int, int, int] = transform.DEFAULT_GRID


@dataclass(frozen=True)
class AtlasConfig:
    rounds: int = 3
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)

    def digest(self) -> str:
        raw = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:16]


@dataclass
class Atlas:
    intensity: Volume
    label: Volume
    provenance: list[str] = field(default_factory=list)
    config_hash: str = ""

    def __post_init__(self):
        if self.intensity.dims != self.label.dims:
            raise ValueError(f"atlas dims differ: {self.intensity.dims} vs {self.label.dims}")
        if self.intensity.spacing != self.label.spacing:
            raise ValueError("atlas intensity and label spacing differ")
        lab = self.label.data
        if lab.min() < 0 or lab.max() > 1:
            raise ValueError("atlas label values must lie in [0, 1]")

    @property
    def dims(self):
        return self.intensity.dims

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_vvol(d / "intensity.vvol", self.intensity)
        # soft labels are stored as an intensity-kind volume; the manifest records it
        write_vvol(d / "label.vvol", Volume(self.label.data, self.label.spacing, Kind.INTENSITY))
        lines = [f"config_hash={self.config_hash}"] + [f"case={c}" for c in self.provenance]
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "Atlas":
        d = Path(directory)
        intensity = read_vvol(d / "intensity.vvol")
        soft = read_vvol(d / "label.vvol")
        cases, digest = [], ""
        for line in (d / "manifest.txt").read_text().splitlines():
            key, _, value = line.partition("=")
            if key == "case":
                cases.append(value)
            elif key == "config_hash":
                digest = value
        label = Volume(np.asarray(soft.data, np.float64), soft.spacing, Kind.INTENSITY)
        return cls(intensity, label, cases, digest)


def _array(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def _step_sizes(cfg: RegistrationConfig, affine_only: bool) -> np.ndarray:
    n_ffd = transform.param_count(cfg.grid_dims) - transform.N_AFFINE
    ffd = np.zeros(n_ffd) if affine_only else np.full(n_ffd, cfg.lr_ffd)
    return np.concatenate([np.full(9, cfg.lr_matrix), np.full(3, cfg.lr_translation), ffd])


def _centered_grad(g, dims):
    """Re-express the matrix gradient about the volume centre so matrix and
    translation steps decouple."""
    c = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    out = g.copy()
    out[:9] = (g[:9].reshape(3, 3) - np.outer(g[9:12], c)).reshape(-1)
    return out, c


def registration_loss(fixed, moving, params: ParamVector, bins=losses.DEFAULT_BINS) -> float:
    warped = transform.warp_array(params, _array(moving), np.shape(_array(fixed)))
    return losses.nmi(_array(fixed), warped, bins)[0]


def register_pair(fixed, moving, cfg: RegistrationConfig | None = None,
                  init: ParamVector | None = None, affine_only: bool = False) -> ParamVector:
    """Map ``fixed`` voxels into ``moving`` by minimising the NMI loss.

    Adam descent: an affine stage, then a joint affine + FFD stage. The
    matrix is updated about the volume centre so scaling does not drag the
    translation along. Steps are clipped to ``max_step`` and the best
    parameters seen (starting from ``init``/identity) are returned, so the
    result is never worse than the start.
    """
    cfg = cfg or RegistrationConfig()
    fixed_a, moving_a = _array(fixed), _array(moving)
    dims = fixed_a.shape
    params = (init or ParamVector.identity(cfg.grid_dims)).copy()

    def evaluate(p):
        warped = transform.warp_array(p, moving_a, dims)
        loss, dg = losses.nmi(fixed_a, warped, cfg.bins)
        if not np.isfinite(loss):
            raise FloatingPointError("registration: non-finite NMI loss")
        return loss, dg

    best_loss, _ = evaluate(params)
    best = params.copy()
    stages = [(cfg.affine_steps, True)]
    if not affine_only:
        stages.append((cfg.joint_steps, False))
    b1, b2 = cfg.momentum, cfg.beta2
    for steps, affine_stage in stages:
        lr = _step_sizes(cfg, affine_stage)
        first = np.zeros(len(params))
        second = np.zeros(len(params))
        for t in range(1, steps + 1):
            loss, dg = evaluate(params)
            if loss < best_loss:
                best_loss, best = loss, params.copy()
            grad = transform.warp_vjp(params, moving_a, dg)
            grad, c = _centered_grad(grad, dims)
            first = b1 * first + (1 - b1) * grad
            second = b2 * second + (1 - b2) * grad * grad
            step = -lr * (first / (1 - b1**t)) / (np.sqrt(second / (1 - b2**t)) + 1e-12)
            step = np.clip(step, -cfg.max_step, cfg.max_step)
            m = params.theta[:9].reshape(3, 3) + step[:9].reshape(3, 3)
            params.values[9:12] = params.theta[9:12] + step[9:12] - step[:9].reshape(3, 3) @ c
            params.values[:9] = m.reshape(-1)
            params.values[12:] += step[12:]
        loss, _ = evaluate(params)
        if loss < best_loss:
            best_loss, best = loss, params.copy()
        params = best.copy()
    return best


def build_atlas(cases, cfg: AtlasConfig | None = None, case_ids=None) -> Atlas:
    """Iterative mean-space atlas from (intensity, label) pairs.

    Round 1 registers affinely, later rounds add the FFD. Every registration
    starts from the identity so the result does not depend on case order
    beyond floating-point summation.
    """
    cfg = cfg or AtlasConfig()
    cases = list(cases)
    if len(cases) < 2:
        raise ValueError(f"need >= 2 cases to build an atlas, got {len(cases)}")
    dims = cases[0][0].dims
    for img, lab in cases:
        if img.dims != dims or lab.dims != dims:
            raise ValueError(f"inconsistent case dims {img.dims} / {lab.dims}, expected {dims}")
    ids = [str(i) for i in (case_ids if case_ids is not None else range(len(cases)))]
    spacing = cases[0][0].spacing

    reference = _array(cases[0][0])
    mean_int = reference
    mean_lab = _array(cases[0][1])
    for r in range(cfg.rounds):
        ints, labs = [], []
        for img, lab in cases:
            p = register_pair(reference, img, cfg.registration, affine_only=(r == 0))
            warped = transform.warp_array(p, np.stack([_array(img), _array(lab)]), dims)
            ints.append(warped[0])
            labs.append(warped[1])
        mean_int = np.mean(ints, axis=0)
        mean_lab = np.clip(np.mean(labs, axis=0), 0.0, 1.0)
        reference = mean_int
    return Atlas(Volume(mean_int, spacing, Kind.INTENSITY), Volume(mean_lab, spacing, Kind.INTENSITY),
                 ids, cfg.digest())


def segment_by_registration(atlas: Atlas, target, cfg: RegistrationConfig | None = None) -> Volume:
    """Register the atlas intensity onto ``target`` and carry the label across."""
    params = register_pair(target, atlas.intensity, cfg)
    warped = transform.warp_array(params, atlas.label.data, np.shape(_array(target)), nearest=True)
    spacing = target.spacing if isinstance(target, Volume) else atlas.label.spacing
    return Volume.label(warped >= 0.5, spacing)

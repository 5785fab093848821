"""Synthetic left-ventricle phantoms with known cavity volumes and ejection fractions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import Kind, Volume, normalize, read_vvol, write_vvol

# intensity/noise settings per acquisition regime
REGIMES = {
    "A": {"background": 0.35, "blood": 0.08, "wall": 0.85, "noise": 0.35},
    "B": {"background": 0.25, "blood": 0.12, "wall": 0.75, "noise": 0.55},
}


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: float = 2.0
    endo_axes: tuple[float, float, float] = (14.0, 14.0, 18.0)
    epi_axes: tuple[float, float, float] = (20.0, 20.0, 24.0)
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    regime: str = "A"
    noise: float | None = None
    seed: int = 0

    def validate(self):
        if any(n <= 0 for n in self.endo_axes) or any(
            e <= n for n, e in zip(self.endo_axes, self.epi_axes)
        ):
            raise ValueError(
                f"endocardial axes {self.endo_axes} must lie strictly inside epicardial {self.epi_axes}"
            )
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.noise is not None and self.noise < 0:
            raise ValueError("noise strength must be non-negative")


def rotation_matrix(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = (math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay),
                              math.cos(az), math.sin(az))
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def ellipsoid_volume(axes) -> float:
    a, b, c = axes
    return 4.0 * math.pi * a * b * c / 3.0


def _inside(local, axes):
    return ((local / np.asarray(axes)) ** 2).sum(axis=-1) <= 1.0


def generate(spec: PhantomSpec) -> tuple[Volume, Volume, float]:
    """Returns (normalized intensity, cavity label, analytic cavity volume in mm^3)."""
    spec.validate()
    dims = tuple(spec.dims)
    axes = [(np.arange(n) - (n - 1) / 2.0) * spec.spacing for n in dims]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1) - np.asarray(spec.translation)
    local = pts @ rotation_matrix(spec.rotation)  # world -> ellipsoid frame
    cavity = _inside(local, spec.endo_axes)
    shell = _inside(local, spec.epi_axes) & ~cavity

    regime = REGIMES[spec.regime]
    img = np.full(dims, regime["background"])
    img[shell] = regime["wall"]
    img[cavity] = regime["blood"]
    strength = regime["noise"] if spec.noise is None else spec.noise
    if strength > 0:
        rng = np.random.default_rng([spec.seed, ord(spec.regime)])
        shape = 1.0 / strength**2
        img = img * rng.gamma(shape, 1.0 / shape, size=dims)
    img = gaussian_filter(img, sigma=1.0)
    spacing = (spec.spacing,) * 3
    intensity = normalize(Volume(img, spacing, Kind.INTENSITY))
    label = Volume(cavity.astype(np.float64), spacing, Kind.LABEL)
    return intensity, label, ellipsoid_volume(spec.endo_axes)


@dataclass(frozen=True)
class Subject:
    """One subject: (intensity, label) at end-diastole and end-systole plus its true EF."""

    subject_id: int
    ed: tuple[Volume, Volume]
    es: tuple[Volume, Volume]
    ef: float
    regime: str = ""
    ed_spec: PhantomSpec | None = None
    es_spec: PhantomSpec | None = None

    def frames(self):
        yield "ED", self.ed
        yield "ES", self.es


def es_spec_for(ed: PhantomSpec, ef: float, seed: int) -> PhantomSpec:
    """Contract the cavity to the requested EF, keeping myocardial volume fixed."""
    s = (1.0 - ef) ** (1.0 / 3.0)
    endo = tuple(a * s for a in ed.endo_axes)
    v_epi = ellipsoid_volume(ed.epi_axes) - ellipsoid_volume(ed.endo_axes) + ellipsoid_volume(endo)
    k = (v_epi / ellipsoid_volume(ed.epi_axes)) ** (1.0 / 3.0)
    return replace(ed, endo_axes=endo, epi_axes=tuple(a * k for a in ed.epi_axes), seed=seed)


def sample_ed_spec(rng: np.random.Generator, dims=(32, 32, 32), spacing=2.0, regime="A", seed=0):
    a = rng.uniform(13.0, 15.5)
    b = rng.uniform(13.0, 15.5)
    c = rng.uniform(16.0, 19.0)
    wall = rng.uniform(5.0, 6.5)
    return PhantomSpec(
        dims=tuple(dims),
        spacing=spacing,
        endo_axes=(a, b, c),
        epi_axes=(a + wall, b + wall, c + wall),
        rotation=tuple(rng.uniform(-0.15, 0.15, 3)),
        translation=tuple(rng.uniform(-2.0, 2.0, 3)),
        regime=regime,
        seed=seed,
    )


def generate_subject(seed: int, dims=(32, 32, 32), spacing=2.0, regime: str | None = None) -> Subject:
    """ED and ES phantoms of one subject; EF is drawn uniformly from [0.35, 0.70]."""
    rng = np.random.default_rng([seed, 7])
    if regime is None:
        regime = "A" if rng.random() < 0.5 else "B"
    ed_spec = sample_ed_spec(rng, dims, spacing, regime, seed=2 * seed)
    ef = float(rng.uniform(0.35, 0.70))
    es_spec = es_spec_for(ed_spec, ef, seed=2 * seed + 1)
    ed_img, ed_lab, ed_v = generate(ed_spec)
    es_img, es_lab, es_v = generate(es_spec)
    return Subject(seed, (ed_img, ed_lab), (es_img, es_lab), (ed_v - es_v) / ed_v, regime,
                   ed_spec, es_spec)


MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ["subject_id", "frame", "true_ef", "regime", "split", "intensity", "label"]


def generate_dataset(n: int, seed: int = 0, dims=(32, 32, 32), spacing=2.0) -> list[Subject]:
    """``n`` subjects with per-subject seeds derived from the root ``seed``."""
    return [generate_subject(seed * 100_003 + i, dims, spacing) for i in range(n)]


def split(subjects, n_train: int):
    return list(subjects[:n_train]), list(subjects[n_train:])


def write_dataset(directory, subjects, n_train: int) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows, written = [], []
    for i, s in enumerate(subjects):
        for frame, (img, lab) in s.frames():
            stem = f"subject_{s.subject_id:05d}_{frame}"
            write_vvol(d / f"{stem}_img.vvol", img)
            write_vvol(d / f"{stem}_lab.vvol", lab)
            written += [d / f"{stem}_img.vvol", d / f"{stem}_lab.vvol"]
            rows.append([s.subject_id, frame, f"{s.ef:.9f}", s.regime,
                         "train" if i < n_train else "val", f"{stem}_img.vvol", f"{stem}_lab.vvol"])
    with open(d / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    return written + [d / MANIFEST]


def read_dataset(directory) -> tuple[list[Subject], list[Subject]]:
    """(train, validation) subjects listed in ``manifest.csv``."""
    d = Path(directory)
    path = d / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {d}")
    frames: dict[int, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = int(row["subject_id"])
            entry = frames.setdefault(sid, {"ef": float(row["true_ef"]), "regime": row["regime"],
                                            "split": row["split"]})
            pair = (read_vvol(d / row["intensity"]), read_vvol(d / row["label"]))
            entry[row["frame"]] = pair
    train, val = [], []
    for sid, e in frames.items():
        if "ED" not in e or "ES" not in e:
            raise ValueError(f"subject {sid}: manifest needs both ED and ES frames")
        subject = Subject(sid, e["ED"], e["ES"], e["ef"], e["regime"])
        (train if e["split"] == "train" else val).append(subject)
    return train, val

"""Finite-difference verification of every analytic gradient in the package.

Each group compares analytic derivatives with central differences on seeded
random inputs and records the worst relative error
``|a - n| / max(|a|, |n|, floor)``. The floor is ``1e-6`` of the group's
largest analytic entry (never below ``1e-8``), so entries that are zero up to
roundoff, such as control points whose support barely reaches the target
grid, do not dominate the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, nnet, transform
from .transform import ParamVector
from .volume import Kind, Volume

SCOPES = ("transform", "losses", "nnet", "all")
TOL_TRANSFORM = 1e-4
TOL_LOSS = 1e-3
TOL_NNET = 1e-3
FLOOR = 1e-8
FLOOR_SCALE = 1e-6


@dataclass(frozen=True)
class GroupResult:
    group: str
    worst: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.group:<22} worst={self.worst:.3e} tol={self.tol:.0e} n={self.checked}"


def rel_error(analytic, numeric, floor=FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _result(group, analytic, numeric, tol) -> GroupResult:
    a = np.asarray(analytic, dtype=np.float64)
    floor = max(FLOOR, FLOOR_SCALE * float(np.abs(a).max())) if a.size else FLOOR
    err = rel_error(a, numeric, floor)
    return GroupResult(group, float(err.max()) if err.size else 0.0, tol, int(err.size))


def _central(f, x: np.ndarray, idx, h: float) -> float:
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def _central5(f, x: np.ndarray, idx, h: float) -> float:
    """Fourth-order central difference."""
    old = x[idx]
    vals = []
    for k in (2, 1, -1, -2):
        x[idx] = old + k * h
        vals.append(f())
    x[idx] = old
    return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)


# ---------------------------------------------------------------- transform


def multilinear_volume(rng, dims) -> np.ndarray:
    """Random multilinear field; trilinear sampling reproduces it exactly, so the
    warped volume is smooth in the deformation parameters."""
    axes = [np.arange(n) / n for n in dims]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    c = rng.normal(size=8)
    return (c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * y + c[5] * y * z
            + c[6] * x * z + c[7] * x * y * z)


def check_transform(seed: int = 0, h: float = 1e-3) -> list[GroupResult]:
    rng = np.random.default_rng([seed, 1])
    atlas_dims, target = (16, 16, 16), (12, 12, 12)
    atlas = Volume(multilinear_volume(rng, atlas_dims), (1.0, 1.0, 1.0), Kind.INTENSITY)
    params = ParamVector.identity()
    params.values[:9] += rng.normal(0, 0.03, 9)
    params.values[9:12] = 2.0 + rng.normal(0, 0.1, 3)
    params.values[12:] = rng.normal(0, 0.15, params.values.size - 12)
    upstream = rng.normal(size=target)

    def warped(i, delta):
        old = params.values[i]
        params.values[i] = old + delta
        out = transform.warp_array(params, atlas.data, target)
        params.values[i] = old
        return out

    def directional(i):
        # five-point stencil; the affine entries also move where the B-spline
        # field is evaluated, which a two-point difference resolves only to O(h^2).
        # Volumes are differenced before contracting so voxels a control point
        # does not reach cancel exactly.
        diff = 8 * (warped(i, h) - warped(i, -h)) - (warped(i, 2 * h) - warped(i, -2 * h))
        return float((diff * upstream).sum() / (12 * h))

    grad = transform.warp_vjp(params, atlas, upstream)
    numeric = np.array([directional(i) for i in range(len(params))])
    return [
        _result("transform.affine", grad[:12], numeric[:12], TOL_TRANSFORM),
        _result("transform.ffd", grad[12:], numeric[12:], TOL_TRANSFORM),
    ]


# ---------------------------------------------------------------- losses


def check_losses(seed: int = 0, h: float = 1e-4) -> list[GroupResult]:
    rng = np.random.default_rng([seed, 2])
    y = rng.random((8, 8, 8))
    g = rng.random((8, 8, 8))
    _, dl1 = losses.l1_label(y, g)
    keep = np.abs(g - y) > 2 * h  # ties are non-differentiable
    num = np.zeros_like(g)
    for idx in zip(*np.nonzero(keep)):
        num[idx] = _central(lambda: losses.l1_label(y, g)[0], g, idx, h)
    out = [_result("losses.l1", dl1[keep], num[keep], TOL_LOSS)]

    x = rng.random((16, 16, 16))
    g = np.clip(x + rng.normal(0, 0.15, x.shape), 0, 1)
    g = 0.02 + 0.96 * g
    _, dn = losses.nmi(x, g)
    smooth = ~losses.nmi_kinks(x, g, 2 * h)
    idxs = np.argwhere(smooth)
    pick = idxs[rng.choice(len(idxs), size=min(300, len(idxs)), replace=False)]
    ana, num = [], []
    for idx in map(tuple, pick):
        ana.append(dn[idx])
        num.append(_central5(lambda: losses.nmi(x, g)[0], g, idx, h))
    out.append(_result("losses.nmi", ana, num, TOL_LOSS))
    return out


# ---------------------------------------------------------------- nnet


def _layer_check(name, layer, x, rng, h=1e-6, n_weights=20) -> GroupResult:
    up = None

    def objective():
        return float((layer.forward(x) * up).sum())

    y = layer.forward(x)
    up = rng.normal(size=y.shape)
    for p in layer.parameters().values():
        p.grad[...] = 0
    dx = layer.backward(up)
    ana, num = [], []
    for idx in map(tuple, np.argwhere(np.ones(x.shape, bool))[:: max(1, x.size // 40)]):
        ana.append(dx[idx])
        num.append(_central(objective, x, idx, h))
    for p in layer.parameters().values():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1).copy()
        for i in rng.choice(flat.size, size=min(n_weights, flat.size), replace=False):
            ana.append(grad[i])
            num.append(_central(objective, flat, i, h))
    return _result(name, ana, num, TOL_NNET)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _unit_range(v, lo=0.2, hi=0.8):
    return lo + (hi - lo) * (v - v.min()) / np.ptp(v)


class _SoftAtlas:
    def __init__(self, label, intensity):
        self.label = Volume(label, (1.0, 1.0, 1.0), Kind.INTENSITY)
        self.intensity = Volume(intensity, (1.0, 1.0, 1.0), Kind.INTENSITY)


def check_nnet(seed: int = 0) -> list[GroupResult]:
    rng = np.random.default_rng([seed, 3])
    out = [
        _layer_check("nnet.conv3d", nnet.Conv3d(2, 3, rng), rng.normal(size=(1, 2, 6, 6, 6)), rng),
        _layer_check("nnet.conv_transpose3d", nnet.ConvTranspose3d(2, 3, rng, out_size=(6, 6, 6)),
                     rng.normal(size=(1, 2, 3, 3, 3)), rng),
        _layer_check("nnet.linear", nnet.Linear(7, 5, rng), rng.normal(size=(2, 7)), rng),
        _layer_check("nnet.leaky_relu", nnet.LeakyReLU(), _away_from_zero(rng, (2, 9)), rng),
        _layer_check("nnet.sigmoid", nnet.Sigmoid(), rng.normal(size=(2, 9)), rng),
    ]
    out.append(_generator_check(rng))
    out.append(_discriminator_check(rng))
    return out


def _amplify(net, gain=3.0):
    """Scale conv weights so activations stay O(1) through the encoder.

    At the default init they shrink to ~1e-4 by the last layer, which pushes
    derivatives towards the roundoff of an O(1) loss and leaves LeakyReLU
    kinks within a finite-difference step of many pre-activations.
    """
    for p in net.parameters().values():
        if p.data.ndim == 5:
            p.data = p.data * gain


def _generator_check(rng, h=1e-4) -> GroupResult:
    dims = (16, 16, 16)
    G = nnet.Generator(dims, rng)
    _amplify(G)
    G.head.weight.data = rng.normal(0, 0.02, G.head.weight.data.shape)
    # sampling clamps at the atlas border, a kink that identity-aligned border
    # voxels sit exactly on; a fractional shift moves them off it
    G.head.bias.data[9:12] = [0.31, 0.27, 0.43]
    # multilinear atlases keep the warp smooth in the head weights
    atlas = _SoftAtlas(_unit_range(multilinear_volume(rng, dims)),
                       _unit_range(multilinear_volume(rng, dims)))
    x = rng.random(dims)
    y = (rng.random(dims) > 0.5).astype(np.float64)

    def objective():
        fwd = G.forward(x, atlas)
        return (losses.ALPHA * losses.l1_label(y, fwd["g_label"])[0]
                + losses.BETA * losses.nmi(x, fwd["g_intensity"])[0])

    G.zero_grad()
    fwd = G.forward(x, atlas)
    _, dl = losses.l1_label(y, fwd["g_label"])
    _, dn = losses.nmi(x, fwd["g_intensity"])
    G.backward(fwd, atlas, losses.ALPHA * dl, losses.BETA * dn)
    flat = G.head.weight.data.reshape(-1)
    grad = G.head.weight.grad.reshape(-1).copy()
    order = np.argsort(-np.abs(grad))
    # the loss is O(1) while single head weights move it by ~1e-7, so weights
    # with much smaller gradients would only measure roundoff
    live = order[: max(20, int((np.abs(grad) >= 1e-2 * np.abs(grad).max()).sum()))]
    pick = np.concatenate([live[:10], rng.choice(live[10:], 10, replace=False)])
    ana = [grad[i] for i in pick]
    num = [_central(objective, flat, i, h) for i in pick]
    return _result("nnet.generator_head", ana, num, TOL_NNET)


def _discriminator_check(rng, h=1e-5) -> GroupResult:
    dims = (8, 8, 8)
    D = nnet.Discriminator(dims, rng)
    _amplify(D)
    x, y = rng.random(dims), rng.random(dims)

    def objective():
        D.forward(x, y)
        return -float(D.log_probs[0])

    D.zero_grad()
    D.forward(x, y)
    D.backward_logits(np.exp(D.log_probs) - np.array([1.0, 0.0]))
    ana, num = [], []
    for name, p in sorted(D.parameters().items()):
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1).copy()
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            ana.append(grad[i])
            num.append(_central(objective, flat, i, h))
    return _result("nnet.discriminator", ana, num, TOL_NNET)


def run(scope: str = "all", seed: int = 0) -> list[GroupResult]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    results = []
    if scope in ("transform", "all"):
        results += check_transform(seed)
    if scope in ("losses", "all"):
        results += check_losses(seed)
    if scope in ("nnet", "all"):
        results += check_nnet(seed)
    return results

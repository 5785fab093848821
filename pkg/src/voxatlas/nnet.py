"""Small reverse-mode network: strided 3D convolutions, dense layers, and the
generator/discriminator pair built from them.

Tensors are numpy arrays shaped ``(batch, channel, x, y, z)``. Every layer
caches what it needs in ``forward`` and accumulates parameter gradients in
``backward``; a ``Sequential`` replays its layers in reverse, which is the
whole gradient tape.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from . import transform
from .transform import ParamVector
from .volume import Volume

LEAK = 0.2
CHANNELS = (8, 16, 32, 64, 64)
KERNEL = 4
STRIDE = 2
AFFINE_SCALE = 0.1
TRANSLATION_SCALE = 1.0
FFD_SCALE = 1.0
LABEL_BLUR = 1.0
LABEL_SHARPNESS = 12.0

VNET_MAGIC = b"VNET"
VNET_VERSION = 1


class Parameter:
    __slots__ = ("data", "grad", "velocity", "second", "steps")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.reset_state()

    def reset_state(self):
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)
        self.second = np.zeros_like(self.data)
        self.steps = 0


class Layer:
    def parameters(self) -> dict[str, Parameter]:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_out_size(n, kernel, stride, pad):
    return (n + 2 * pad - kernel) // stride + 1


def conv_pad_for(n, kernel=KERNEL, stride=STRIDE):
    """Smallest padding (>= 1) that keeps at least one output voxel."""
    pad = 1
    while conv_out_size(n, kernel, stride, pad) < 1:
        pad += 1
    return pad


def _im2col(xp, k, s):
    # (N, C, X, Y, Z) -> (N, C, oX, oY, oZ, k, k, k) view
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return win[:, :, ::s, ::s, ::s]


def _col2im(cols, padded_shape, k, s):
    """Adjoint of ``_im2col``: scatter-add windows back into a padded array."""
    out = np.zeros(padded_shape)
    ox, oy, oz = cols.shape[2:5]
    for a in range(k):
        for b in range(k):
            for c in range(k):
                out[:, :, a:a + s * ox:s, b:b + s * oy:s, c:c + s * oz:s] += cols[..., a, b, c]
    return out


def conv3d_forward(x, weight, bias, stride, pad):
    """Cross-correlation. ``weight`` is (out, in, k, k, k)."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weights expect {weight.shape[1]}")
    k = weight.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    cols = _im2col(xp, k, stride)
    out = np.tensordot(cols, weight, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        out = out + bias[None, :, None, None, None]
    return out


def conv3d_backward(grad_out, x, weight, stride, pad):
    """Returns (d input, d weight, d bias)."""
    k = weight.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    cols = _im2col(xp, k, stride)
    dw = np.tensordot(grad_out, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    db = grad_out.sum(axis=(0, 2, 3, 4))
    dcols = np.tensordot(grad_out, weight, axes=([1], [0]))  # N, oX, oY, oZ, C, k, k, k
    dcols = np.moveaxis(dcols, 4, 1)
    dxp = _col2im(dcols, xp.shape, k, stride)
    sl = (slice(None), slice(None)) + (slice(pad, pad + x.shape[2]),
                                         slice(pad, pad + x.shape[3]),
                                         slice(pad, pad + x.shape[4]))
    return dxp[sl], dw, db


class Conv3d(Layer):
    def __init__(self, c_in, c_out, rng, kernel=KERNEL, stride=STRIDE, pad=1):
        fan_in = c_in * kernel**3
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(c_out))
        self.stride, self.pad = stride, pad
        self._x = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        self._x = x
        return conv3d_forward(x, self.weight.data, self.bias.data, self.stride, self.pad)

    def backward(self, grad):
        dx, dw, db = conv3d_backward(grad, self._x, self.weight.data, self.stride, self.pad)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class ConvTranspose3d(Layer):
    """Adjoint of a strided convolution; doubles the grid for k=4, s=2, p=1."""

    def __init__(self, c_in, c_out, rng, kernel=KERNEL, stride=STRIDE, pad=1, out_size=None):
        fan_in = c_in * kernel**3 // stride**3
        self.weight = Parameter(_uniform(rng, (c_in, c_out, kernel, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(c_out))
        self.stride, self.pad, self.out_size = stride, pad, out_size
        self._x = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def _full_size(self, n):
        return (n - 1) * self.stride + self.weight.data.shape[2]

    def forward(self, x):
        self._x = x
        k, s, p = self.weight.data.shape[2], self.stride, self.pad
        cols = np.tensordot(x, self.weight.data, axes=([1], [0]))  # N, iX, iY, iZ, Cout, k, k, k
        cols = np.moveaxis(cols, 4, 1)
        full = (x.shape[0], cols.shape[1]) + tuple(self._full_size(n) for n in x.shape[2:])
        out = _col2im(cols, full, k, s)
        size = self.out_size or [self._full_size(n) - 2 * p for n in x.shape[2:]]
        size = [size] * 3 if np.isscalar(size) else size
        out = out[:, :, p:p + size[0], p:p + size[1], p:p + size[2]]
        self._out_shape = out.shape
        return out + self.bias.data[None, :, None, None, None]

    def backward(self, grad):
        k, s, p = self.weight.data.shape[2], self.stride, self.pad
        x = self._x
        full = (grad.shape[0], grad.shape[1]) + tuple(self._full_size(n) for n in x.shape[2:])
        gfull = np.zeros(full)
        gfull[:, :, p:p + grad.shape[2], p:p + grad.shape[3], p:p + grad.shape[4]] = grad
        cols = _im2col(gfull, k, s)  # N, Cout, iX, iY, iZ, k, k, k
        self.weight.grad += np.tensordot(x, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        self.bias.grad += grad.sum(axis=(0, 2, 3, 4))
        return np.tensordot(cols, self.weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4])).transpose(
            0, 4, 1, 2, 3
        )


class Linear(Layer):
    def __init__(self, n_in, n_out, rng, zero=False):
        w = np.zeros((n_out, n_in)) if zero else _uniform(rng, (n_out, n_in), n_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out))
        self._x = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad):
        self.weight.grad += grad.T @ self._x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.data


class LeakyReLU(Layer):
    def __init__(self, slope=LEAK):
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, grad):
        return np.where(self._mask, grad, self.slope * grad)


class Sigmoid(Layer):
    def forward(self, x):
        self._y = 1.0 / (1.0 + np.exp(-x))
        return self._y

    def backward(self, grad):
        return grad * self._y * (1.0 - self._y)


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._in)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        params = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                params[f"{i}.{name}"] = p
        return params

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def encoder(c_in, dims, rng, channels=CHANNELS):
    """Strided conv stack; returns (layers, final spatial shape)."""
    layers = []
    shape = tuple(dims)
    for c_out in channels:
        pads = [conv_pad_for(n) for n in shape]
        pad = max(pads)
        layers += [Conv3d(c_in, c_out, rng, pad=pad), LeakyReLU()]
        shape = tuple(conv_out_size(n, KERNEL, STRIDE, pad) for n in shape)
        c_in = c_out
    return layers, shape


class Network:
    """Common parameter handling for generator and discriminator."""

    body: Sequential

    def parameters(self) -> dict[str, Parameter]:
        return self.body.parameters()

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad[...] = 0.0

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, state):
        params = self.parameters()
        if set(state) != set(params):
            raise ValueError("layer table does not match the configured architecture")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} does not match {p.data.shape}")
            p.data = np.asarray(state[k], dtype=np.float64).copy()
            p.reset_state()


def _stack(atlas) -> np.ndarray:
    """(label, intensity) as one contiguous (2, X, Y, Z) array."""
    return np.ascontiguousarray(np.stack([atlas.label.data, atlas.intensity.data]), dtype=np.float64)


class Generator(Network):
    """Five strided convs, a dense head with one output per deformation parameter,
    and the atlas deformation layer.

    The head output is a residual on the identity deformation: the affine matrix
    moves by ``0.1 * out[:9]``, the translation is taken about the volume centre,
    and FFD displacements are ``out[12:]`` voxels.
    """

    kind = "atlas"

    def __init__(self, dims, rng, grid_dims=transform.DEFAULT_GRID, channels=CHANNELS):
        self.dims = tuple(dims)
        self.grid_dims = tuple(grid_dims)
        layers, shape = encoder(1, self.dims, rng, channels)
        n_feat = channels[-1] * int(np.prod(shape))
        self.head = Linear(n_feat, transform.param_count(grid_dims), rng, zero=True)
        self.body = Sequential(layers + [Flatten(), self.head])
        self.center = (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0

    def params_from_head(self, out) -> ParamVector:
        out = np.asarray(out, dtype=np.float64).reshape(-1)
        m = np.eye(3) + AFFINE_SCALE * out[:9].reshape(3, 3)
        t = self.center - m @ self.center + TRANSLATION_SCALE * out[9:12]
        values = np.concatenate([m.reshape(-1), t, FFD_SCALE * out[12:]])
        return ParamVector(values, self.grid_dims)

    def head_grad(self, dparams) -> np.ndarray:
        """Chain d loss / d params back to d loss / d head output."""
        dparams = np.asarray(dparams, dtype=np.float64)
        dm = dparams[:9].reshape(3, 3) - np.outer(dparams[9:12], self.center)
        return np.concatenate(
            [AFFINE_SCALE * dm.reshape(-1), TRANSLATION_SCALE * dparams[9:12], FFD_SCALE * dparams[12:]]
        )

    def predict_params(self, x: np.ndarray) -> ParamVector:
        out = self.body.forward(np.asarray(x, dtype=np.float64).reshape((1, 1) + self.dims))
        return self.params_from_head(out[0])

    def forward(self, x: np.ndarray, atlas) -> dict:
        """Returns params and warped soft label / intensity (arrays on the input grid)."""
        params = self.predict_params(x)
        g_label, g_int = transform.warp_array(params, _stack(atlas), self.dims)
        return {"params": params, "g_label": g_label, "g_intensity": g_int}

    def backward(self, fwd, atlas, d_label=None, d_intensity=None):
        params = fwd["params"]
        up = np.zeros((2,) + self.dims)
        if d_label is not None:
            up[0] = d_label
        if d_intensity is not None:
            up[1] = d_intensity
        dparams = transform.warp_vjp(params, _stack(atlas), up)
        self.body.backward(self.head_grad(dparams)[None, :])
        return dparams

    def segment_soft(self, x, atlas) -> np.ndarray:
        return self.forward(x, atlas)["g_label"]


class DecoderGenerator(Network):
    """Atlas-free generator: the same encoder followed by a mirrored transposed-conv
    decoder emitting a voxelwise foreground probability."""

    kind = "decoder"

    def __init__(self, dims, rng, channels=CHANNELS):
        self.dims = tuple(dims)
        enc, shape = encoder(1, self.dims, rng, channels)
        sizes = [self.dims]
        for _ in channels[:-1]:
            sizes.append(tuple(conv_out_size(n, KERNEL, STRIDE, conv_pad_for(n)) for n in sizes[-1]))
        dec = []
        rev = list(channels[::-1][1:]) + [1]
        c_in = channels[-1]
        for c_out, size in zip(rev, sizes[::-1]):
            dec.append(ConvTranspose3d(c_in, c_out, rng, out_size=size))
            dec.append(LeakyReLU() if c_out != 1 else Sigmoid())
            c_in = c_out
        self.body = Sequential(enc + dec)

    def forward(self, x, atlas=None) -> dict:
        out = self.body.forward(np.asarray(x, dtype=np.float64).reshape((1, 1) + self.dims))
        return {"params": None, "g_label": out[0, 0], "g_intensity": None}

    def backward(self, fwd, atlas=None, d_label=None, d_intensity=None):
        if d_label is not None:
            self.body.backward(np.asarray(d_label)[None, None])
        return None

    def segment_soft(self, x, atlas=None) -> np.ndarray:
        return self.forward(x)["g_label"]


class Discriminator(Network):
    """Conditional critic over the channel stack (volume, label); two-way softmax.

    The label channel is first squashed with ``sigmoid(k * (label - 0.5))`` and
    then blurred (Gaussian, ``label_blur`` voxels, zero padded). Interpolated
    generator labels are soft where ground truth is binary; the squashing
    shows the critic the mask that thresholding at 0.5 would produce, and the
    blur hides what edge sharpness is left, so neither can decide the contest.
    """

    def __init__(self, dims, rng, channels=CHANNELS, label_blur=LABEL_BLUR,
                 label_sharpness=LABEL_SHARPNESS):
        self.dims = tuple(dims)
        self.label_blur = float(label_blur)
        self.label_sharpness = float(label_sharpness)
        layers, shape = encoder(2, self.dims, rng, channels)
        self.head = Linear(channels[-1] * int(np.prod(shape)), 2, rng)
        self.body = Sequential(layers + [Flatten(), self.head])

    def forward(self, x, label) -> float:
        """Probability that (x, label) is a ground-truth pair."""
        inp = np.stack([np.asarray(x, np.float64), self._blur(self._squash(label))])[None]
        logits = self.body.forward(inp)[0]
        self._logits = logits
        z = logits - logits.max()
        e = np.exp(z)
        self._prob = e / e.sum()
        return float(self._prob[0])

    @property
    def log_probs(self) -> np.ndarray:
        """Log-softmax of the last ``forward`` (finite even when a probability underflows)."""
        z = self._logits - self._logits.max()
        return z - np.log(np.exp(z).sum())

    def backward(self, d_prob_real: float) -> np.ndarray:
        """Backprop d loss / d p_real from the last ``forward``; returns d loss / d label."""
        p = self._prob
        # d p0 / d logits for a softmax
        return self.backward_logits(d_prob_real * p[0] * (np.array([1.0, 0.0]) - p))

    def backward_logits(self, dlogits) -> np.ndarray:
        dinp = self.body.backward(np.asarray(dlogits, dtype=np.float64)[None, :])
        # a symmetric kernel with zero padding is its own adjoint
        d = self._blur(dinp[0, 1])
        if self.label_sharpness > 0:
            s = self._squashed
            d = d * self.label_sharpness * s * (1.0 - s)
        return d

    def _squash(self, label):
        label = np.asarray(label, np.float64)
        if self.label_sharpness <= 0:
            return label
        self._squashed = 1.0 / (1.0 + np.exp(-self.label_sharpness * (label - 0.5)))
        return self._squashed

    def _blur(self, v):
        if self.label_blur <= 0:
            return v
        return gaussian_filter(v, self.label_blur, mode="constant")


def sgd_step(params, lr=2e-4, momentum=0.5):
    """Heavy-ball SGD: ``v <- momentum * v + grad``; ``w <- w - lr * v``."""
    items = params.values() if isinstance(params, dict) else params
    for p in items:
        p.velocity = momentum * p.velocity + p.grad
        p.data = p.data - lr * p.velocity


def adam_step(params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
    """Adam with bias correction; ``velocity`` holds the first moment."""
    items = params.values() if isinstance(params, dict) else params
    for p in items:
        p.steps += 1
        p.velocity = beta1 * p.velocity + (1 - beta1) * p.grad
        p.second = beta2 * p.second + (1 - beta2) * p.grad * p.grad
        m_hat = p.velocity / (1 - beta1**p.steps)
        v_hat = p.second / (1 - beta2**p.steps)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def save_checkpoint(path, nets: dict[str, Network]) -> None:
    """``VNET`` | version | tensor count | per tensor: name, shape | f32 payload."""
    table = []
    payload = []
    for prefix, net in nets.items():
        for name, p in sorted(net.parameters().items()):
            table.append((f"{prefix}/{name}", p.data.shape))
            payload.append(p.data.astype("<f4").ravel().tobytes())
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", VNET_MAGIC, VNET_VERSION, len(table)))
        for name, shape in table:
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), len(shape)) + raw)
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path, nets: dict[str, Network]) -> None:
    raw = Path(path).read_bytes()
    magic, version, count = struct.unpack_from("<4sII", raw)
    if magic != VNET_MAGIC:
        raise ValueError(f"magic: expected {VNET_MAGIC!r}, found {magic!r}")
    if version != VNET_VERSION:
        raise ValueError(f"version: unsupported {version}")
    off = 12
    table = []
    for _ in range(count):
        n, ndim = struct.unpack_from("<HB", raw, off)
        off += 3
        name = raw[off:off + n].decode()
        off += n
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        table.append((name, tuple(shape)))
    states: dict[str, dict] = {k: {} for k in nets}
    for name, shape in table:
        size = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        prefix, _, pname = name.partition("/")
        if prefix not in states:
            raise ValueError(f"layer table: unexpected network {prefix!r}")
        states[prefix][pname] = arr.astype(np.float64)
    for prefix, net in nets.items():
        net.load_state(states[prefix])


def as_input(vol: Volume | np.ndarray) -> np.ndarray:
    return np.asarray(vol.data if isinstance(vol, Volume) else vol, dtype=np.float64)

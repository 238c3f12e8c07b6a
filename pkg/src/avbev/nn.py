"""Learnable building blocks, the Adam optimizer and checkpoint I/O.

Blocks are thin parameter bundles over :mod:`avbev.autodiff` ops.  Every
block exposes ``parameters()`` returning ``{name: Tensor}`` so a model can
assemble one flat registry for the optimizer and for checkpoints.

Initialization is uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from a
caller-supplied seeded generator; blocks that must start as the identity
(FiLM output, refiner output) zero-init their final layer instead.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"AVBW"
CHECKPOINT_VERSION = 1


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, rng, n_in: int, n_out: int, name: str, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
        else:
            w = init_uniform(rng, n_in, (n_in, n_out))
            b = init_uniform(rng, n_in, (n_out,))
        self.w = Tensor(w, name=f"{name}.w")
        self.b = Tensor(b, name=f"{name}.b")
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def parameters(self):
        return {self.w.name: self.w, self.b.name: self.b}


class Conv2d:
    def __init__(self, rng, c_in: int, c_out: int, k, name: str,
                 stride: int = 1, padding=0, zero_init: bool = False):
        kh, kw = (k, k) if isinstance(k, int) else k
        fan_in = c_in * kh * kw
        if zero_init:
            w = np.zeros((c_out, c_in, kh, kw))
            b = np.zeros(c_out)
        else:
            w = init_uniform(rng, fan_in, (c_out, c_in, kh, kw))
            b = init_uniform(rng, fan_in, (c_out,))
        self.w = Tensor(w, name=f"{name}.w")
        self.b = Tensor(b, name=f"{name}.b")
        self.stride = stride
        self.padding = padding
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def parameters(self):
        return {self.w.name: self.w, self.b.name: self.b}


class Mlp:
    """Two-layer perceptron with relu hidden layer."""

    def __init__(self, rng, n_in: int, n_hidden: int, n_out: int, name: str,
                 zero_init_out: bool = False):
        self.fc1 = Linear(rng, n_in, n_hidden, f"{name}.fc1")
        self.fc2 = Linear(rng, n_hidden, n_out, f"{name}.fc2", zero_init=zero_init_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))

    def parameters(self):
        return {**self.fc1.parameters(), **self.fc2.parameters()}


class GruCell:
    """Standard gated recurrent unit cell on (1, n) row vectors."""

    def __init__(self, rng, n_in: int, n_hidden: int, name: str):
        self.n_hidden = n_hidden
        self.ih = Linear(rng, n_in, 3 * n_hidden, f"{name}.ih")
        self.hh = Linear(rng, n_hidden, 3 * n_hidden, f"{name}.hh")

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        gi = self.ih(x)
        gh = self.hh(h)
        n = self.n_hidden
        r = ad.sigmoid(ad.add(ad.narrow(gi, 1, 0, n), ad.narrow(gh, 1, 0, n)))
        z = ad.sigmoid(ad.add(ad.narrow(gi, 1, n, n), ad.narrow(gh, 1, n, n)))
        c = ad.tanh(ad.add(ad.narrow(gi, 1, 2 * n, n),
                           ad.mul(r, ad.narrow(gh, 1, 2 * n, n))))
        one_minus_z = ad.add(ad.mul(z, -1.0), 1.0)
        return ad.add(ad.mul(one_minus_z, c), ad.mul(z, h))

    def parameters(self):
        return {**self.ih.parameters(), **self.hh.parameters()}


class ChannelGate:
    """Squeeze-excite style gate: global average pool -> MLP -> sigmoid scale."""

    def __init__(self, rng, channels: int, name: str):
        self.mlp = Mlp(rng, channels, max(channels // 2, 4), channels, f"{name}.mlp")
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        # x: (N, C, H, W); per-sample channel statistics
        pooled = ad.mean_(x, axis=(2, 3))          # (N, C)
        scale = ad.sigmoid(self.mlp(pooled))        # (N, C)
        n, c = scale.shape
        return ad.mul(x, ad.reshape(scale, (n, c, 1, 1)))

    def parameters(self):
        return self.mlp.parameters()


class Adam:
    """Adam with bias correction; state kept per parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 2.0e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad_or_zeros()
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# checkpoint format: "AVBW", version u32, count u32, then per record
#   u16 name length, name utf-8, u8 ndim, ndim * u32 shape, float64 LE data
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor | np.ndarray]):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            arr = params[name]
            data = np.ascontiguousarray(
                arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic in {path}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.copy()
    return out


def restore_parameters(params: dict[str, Tensor], state: dict[str, np.ndarray]):
    """Load checkpoint arrays into an existing parameter registry, in place."""
    missing = set(params) - set(state)
    extra = set(state) - set(params)
    if missing or extra:
        raise ValueError(
            f"checkpoint/model mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for k, p in params.items():
        if state[k].shape != p.data.shape:
            raise ValueError(
                f"checkpoint shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
        p.data[...] = state[k]

"""Dense layers, parameter registry with per-stage freezing, and Adam.

Parameters are tape Tensors; freezing toggles `requires_grad`, so frozen
handles simply never receive a gradient.  Checkpoints are a versioned
binary with a named float32 tensor table plus optimizer state.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor

CKPT_MAGIC = b"SCMP"
CKPT_VERSION = 1


class GradientError(RuntimeError):
    """Non-finite gradient, reported with the offending handle name."""


class CheckpointError(ValueError):
    """Bad checkpoint file."""


class DenseLayer:
    """Single fully connected layer, y = x @ W + b."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, trainable: bool = True):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[1],):
            raise ValueError("weights must be (d_in, d_out), bias (d_out,)")
        self.weights = Tensor(weights, requires_grad=trainable)
        self.bias = Tensor(bias, requires_grad=trainable)

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int) -> "DenseLayer":
        # uniform fan-based init, zero bias
        bound = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_in, d_out))
        return cls(w, np.zeros(d_out))


def dense_apply(layer: DenseLayer, x: Tensor) -> Tensor:
    """Apply the layer to a batch (B, d_in) or single vector (d_in,)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    if x.shape[1] != layer.d_in:
        raise ValueError(f"input dim {x.shape[1]} != layer d_in {layer.d_in}")
    out = x @ layer.weights + layer.bias
    return out.reshape(-1) if squeeze else out


class ParamRegistry:
    """Named handles to every trainable tensor plus non-trainable buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def register_layer(self, name: str, layer: DenseLayer) -> None:
        self._params[f"{name}.weight"] = layer.weights
        self._params[f"{name}.bias"] = layer.bias

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def has_buffer(self, name: str) -> bool:
        return name in self._buffers

    @property
    def names(self) -> list[str]:
        return list(self._params)

    def tensor(self, name: str) -> Tensor:
        return self._params[name]

    def set_trainable(self, prefixes) -> None:
        """Unfreeze handles whose name starts with any prefix; freeze the rest."""
        for name, t in self._params.items():
            t.requires_grad = any(name.startswith(p) for p in prefixes)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._params.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {n: t.data.copy() for n, t in self._params.items()}
        out.update({n: v.copy() for n, v in self._buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name in self._params:
                t = self._params[name]
                if t.data.shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}")
                t.data = np.asarray(value, dtype=np.float64).copy()
            elif name in self._buffers:
                self._buffers[name] = np.asarray(value, dtype=np.float64).copy()
            else:
                raise KeyError(f"unknown tensor {name!r} in state")


def backprop(loss: Tensor, registry: ParamRegistry) -> dict[str, np.ndarray]:
    """Run reverse mode from a scalar loss; return grads for unfrozen handles."""
    registry.zero_grad()
    loss.backward()
    grads = {}
    for name in registry.names:
        t = registry.tensor(name)
        if not t.requires_grad or t.grad is None:
            continue
        if not np.isfinite(t.grad).all():
            raise GradientError(f"non-finite gradient for {name!r}")
        grads[name] = t.grad
    return grads


class Adam:
    """Adaptive-moment optimizer over registry handles.

    `plain_sgd=True` degrades to vanilla gradient descent; the EM sanity
    checks use that mode because its single-step monotonicity is exact.
    """

    def __init__(self, registry: ParamRegistry, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 plain_sgd: bool = False):
        self.registry = registry
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.plain_sgd = plain_sgd
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        for name, g in grads.items():
            t = self.registry.tensor(name)
            if not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            if self.plain_sgd:
                t.data = t.data - self.lr * g
                continue
            m = self.m.setdefault(name, np.zeros_like(t.data))
            v = self.v.setdefault(name, np.zeros_like(t.data))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.step_count)
            vhat = v / (1 - self.beta2 ** self.step_count)
            t.data = t.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }


# -- checkpoint binary ---------------------------------------------------------
#
# layout: magic "SCMP", u32 version, u32 n_tensors, then per tensor:
#   u16 name length, utf-8 name, u8 ndim, u32 dims..., float32 payload.
# Optimizer moments are stored as tensors with an "optim/" name prefix,
# plus a 0-d "optim/step_count" entry.

def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    arr = np.asarray(arr)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    n = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
    return name, arr.astype(np.float64)


def save_checkpoint(path, registry: ParamRegistry, optimizer: Adam | None = None,
                    meta: dict[str, float] | None = None) -> None:
    """Serialize all registered tensors (and optimizer state) as float32.

    The live registry is rounded to float32 precision as part of saving,
    so a reload reproduces the post-save model bit for bit.  `meta` holds
    scalar bookkeeping (stage index, best F1, epoch) as 0-d entries.
    """
    entries: list[tuple[str, np.ndarray]] = []
    for name, value in (meta or {}).items():
        entries.append((f"meta/{name}", np.float64(value)))
    for name in registry.names:
        t = registry.tensor(name)
        t.data = t.data.astype(np.float32).astype(np.float64)
        entries.append((name, t.data))
    for name, buf in registry._buffers.items():
        rounded = buf.astype(np.float32).astype(np.float64)
        registry._buffers[name] = rounded
        entries.append((f"buffer/{name}", rounded))
    if optimizer is not None:
        for k, v in optimizer.m.items():
            entries.append((f"optim/m/{k}", v))
        for k, v in optimizer.v.items():
            entries.append((f"optim/v/{k}", v))
        entries.append(("optim/step_count", np.float64(optimizer.step_count)))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(entries)))
        for name, arr in entries:
            _write_tensor(fh, name, arr)


def load_checkpoint(path, registry: ParamRegistry,
                    optimizer: Adam | None = None) -> dict[str, float]:
    """Restore tensors (and optimizer state) in place; returns the meta dict."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        meta: dict[str, float] = {}
        for _ in range(count):
            name, arr = _read_tensor(fh)
            if name.startswith("meta/"):
                meta[name[len("meta/"):]] = float(arr)
            elif name.startswith("optim/"):
                if optimizer is None:
                    continue
                if name == "optim/step_count":
                    optimizer.step_count = int(arr)
                elif name.startswith("optim/m/"):
                    optimizer.m[name[len("optim/m/"):]] = arr
                elif name.startswith("optim/v/"):
                    optimizer.v[name[len("optim/v/"):]] = arr
            elif name.startswith("buffer/"):
                registry._buffers[name[len("buffer/"):]] = arr
            else:
                registry.load_state({name: arr})
        return meta

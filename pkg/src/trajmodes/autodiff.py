"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and remembers the tensors it was
computed from, so a call to ``backward()`` on a scalar loss walks the
graph in reverse topological order and accumulates gradients into every
reachable tensor created with ``requires_grad=True``.  The op set is
exactly what the prediction network and its losses need; there is no
fusion, no GPU, no mixed precision.

The same module houses the Adam optimizer (with the step-decay learning
rate schedule used for training) and the binary checkpoint format.
"""

from __future__ import annotations

import binascii
import struct

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class CorruptCheckpoint(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backprop = None

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise NonScalarLoss(f"backward needs a scalar, got shape {self.shape}")
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            topo.append(node)

        visit(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backprop is not None:
                node._backprop(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ----------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, _parents=(self, other))

        def backprop(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))
        out._backprop = backprop
        return out

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, _parents=(self, other))

        def backprop(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))
        out._backprop = backprop
        return out

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __truediv__(self, other):
        return self * as_tensor(other) ** -1.0

    def __rtruediv__(self, other):
        return as_tensor(other) * self ** -1.0

    __radd__ = __add__
    __rmul__ = __mul__

    def __pow__(self, exponent: float):
        out = Tensor(self.data ** exponent, _parents=(self,))

        def backprop(g):
            if self.requires_grad:
                self._accumulate(g * exponent * self.data ** (exponent - 1.0))
        out._backprop = backprop
        return out

    # -- unary math ----------------------------------------------------
    def exp(self):
        out = Tensor(np.exp(self.data), _parents=(self,))

        def backprop(g):
            if self.requires_grad:
                self._accumulate(g * out.data)
        out._backprop = backprop
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,))

        def backprop(g):
            if self.requires_grad:
                self._accumulate(g / self.data)
        out._backprop = backprop
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), _parents=(self,))

        def backprop(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / out.data)
        out._backprop = backprop
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), _parents=(self,))

        def backprop(g):
            if self.requires_grad:
                self._accumulate(g * (self.data > 0.0))
        out._backprop = backprop
        return out

    def softplus(self):
        out = Tensor(np.logaddexp(0.0, self.data), _parents=(self,))

        def backprop(g):
            if self.requires_grad:
                # derivative is the logistic sigmoid, computed stably
                self._accumulate(g * 0.5 * (1.0 + np.tanh(0.5 * self.data)))
        out._backprop = backprop
        return out

    # -- reductions and reshaping --------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))

        def backprop(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.shape).copy())
        out._backprop = backprop
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _parents=(self,))

        def backprop(g):
            if self.requires_grad:
                self._accumulate(g.reshape(self.shape))
        out._backprop = backprop
        return out

    def flatten_rows(self):
        """Collapse everything but the leading (batch) axis."""
        return self.reshape(self.shape[0], -1)

    def __getitem__(self, key):
        out = Tensor(self.data[key], _parents=(self,))

        def backprop(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[key] += g
                self._accumulate(full)
        out._backprop = backprop
        return out

    # -- linear algebra --------------------------------------------------
    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.shape[-1] != other.data.shape[0]:
            raise ShapeMismatch(
                f"matmul: {self.shape} @ {other.shape} is not defined")
        out = Tensor(self.data @ other.data, _parents=(self, other))

        def backprop(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)
        out._backprop = backprop
        return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])
    out._backprop = backprop
    return out


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, _parents=(t,))

    def backprop(g):
        if t.requires_grad:
            inner = (g * p).sum(axis=axis, keepdims=True)
            t._accumulate(p * (g - inner))
    out._backprop = backprop
    return out


def logsumexp(t: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = t.data.max(axis=axis, keepdims=True)
    e = np.exp(t.data - m)
    s = e.sum(axis=axis, keepdims=True)
    val = np.log(s) + m
    out = Tensor(val if keepdims else np.squeeze(val, axis=axis), _parents=(t,))

    def backprop(g):
        if t.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            t._accumulate(gg * (e / s))
    out._backprop = backprop
    return out


def gather_rows(t: Tensor, indices) -> Tensor:
    """Pick ``t[b, indices[b], ...]`` for every row b of the leading axis."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (t.shape[0],):
        raise ShapeMismatch("need one index per row")
    if idx.min() < 0 or idx.max() >= t.shape[1]:
        raise ShapeMismatch("gather index out of range")
    rows = np.arange(t.shape[0])
    out = Tensor(t.data[rows, idx], _parents=(t,))

    def backprop(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            full[rows, idx] = g
            t._accumulate(full)
    out._backprop = backprop
    return out


def _conv_windows(x: np.ndarray, kernel: int, stride: int):
    b, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    sb, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, ho, wo, kernel, kernel),
        (sb, sc, stride * sh, stride * sw, sh, sw)), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1) -> Tensor:
    """2-D convolution, valid padding, square kernel.

    ``x`` is (B, C, H, W), ``weight`` is (O, C, K, K), ``bias`` is (O,).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(
            f"conv2d channels: input {x.shape[1]} vs weight {weight.shape[1]}")
    k = weight.shape[2]
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeMismatch("conv2d input smaller than kernel")
    windows, ho, wo = _conv_windows(x.data, k, stride)
    val = np.einsum("bcijkl,ockl->boij", windows, weight.data, optimize=True)
    parents = (x, weight)
    if bias is not None:
        val = val + bias.data[None, :, None, None]
        parents = (x, weight, bias)
    out = Tensor(val, _parents=parents)

    def backprop(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            weight._accumulate(
                np.einsum("bcijkl,boij->ockl", windows, g, optimize=True))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for kh in range(k):
                for kw in range(k):
                    dx[:, :, kh:kh + stride * ho:stride,
                       kw:kw + stride * wo:stride] += np.einsum(
                           "boij,oc->bcij", g, weight.data[:, :, kh, kw],
                           optimize=True)
            x._accumulate(dx)
    out._backprop = backprop
    return out


def max_pool2d(x: Tensor, size: int) -> Tensor:
    b, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeMismatch(f"pool size {size} does not divide {h}x{w}")
    ho, wo = h // size, w // size
    windows = x.data.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(b, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0],
                 _parents=(x,))

    def backprop(g):
        if x.requires_grad:
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
            dx = dflat.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
            x._accumulate(dx.reshape(b, c, h, w))
    out._backprop = backprop
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction and a stepwise-decaying learning rate.

    The effective rate at step t (1-based) is
    ``lr * decay_factor ** ((t - 1) // decay_interval)``, i.e. the rate
    is multiplied by ``decay_factor`` once every ``decay_interval`` steps.
    """

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 decay_factor: float = 0.9, decay_interval: int = 20_000):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.decay_factor = decay_factor
        self.decay_interval = int(decay_interval)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def effective_lr(self, step: int | None = None) -> float:
        t = self.step_count + 1 if step is None else step
        return self.lr * self.decay_factor ** ((t - 1) // self.decay_interval)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        lr_t = self.effective_lr(self.step_count)
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient shape mismatch for {name}")
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / (1.0 - b1 ** self.step_count)
            v_hat = self.v[name] / (1.0 - b2 ** self.step_count)
            p.data -= lr_t * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict:
        """Moment tensors and step counter, keyed for checkpointing."""
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.step"] = np.array([float(self.step_count)])
        return out

    def load_state_arrays(self, arrays: dict):
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=np.float64)
        self.step_count = int(arrays["adam.step"][0])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "trajmodes-checkpoint v1"


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write named f64 arrays: text header, little-endian payload, CRC-32."""
    names = list(arrays)
    header = [_CKPT_MAGIC]
    for key, value in (meta or {}).items():
        header.append(f"meta {key}={value}")
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        header.append(f"tensor {name} {dims}")
        payload += arr.astype("<f8").tobytes()
    header.append("data")
    blob = ("\n".join(header) + "\n").encode("utf-8") + bytes(payload)
    blob += struct.pack("<I", binascii.crc32(bytes(payload)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays, meta). Raises CorruptCheckpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        header_end = blob.index(b"data\n") + len(b"data\n")
    except ValueError:
        raise CorruptCheckpoint("missing header terminator")
    lines = blob[:header_end].decode("utf-8").splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise CorruptCheckpoint("bad magic line")
    meta, specs = {}, []
    for line in lines[1:-1]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition("=")
            meta[key] = value
        elif kind == "tensor":
            name, _, dims = rest.rpartition(" ")
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            specs.append((name, shape))
        else:
            raise CorruptCheckpoint(f"unknown header line: {line!r}")
    payload, crc_bytes = blob[header_end:-4], blob[-4:]
    if len(crc_bytes) != 4 or struct.unpack("<I", crc_bytes)[0] != (
            binascii.crc32(payload) & 0xFFFFFFFF):
        raise CorruptCheckpoint("checksum mismatch")
    arrays, offset = {}, 0
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(payload):
            raise CorruptCheckpoint("payload truncated")
        arrays[name] = np.frombuffer(
            payload[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(payload):
        raise CorruptCheckpoint("trailing bytes in payload")
    return arrays, meta

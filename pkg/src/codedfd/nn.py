"""Small numpy neural-network engine with explicit forward/backward passes.

Images are NCHW. Dense weights are stored (in_units, out_units), conv kernels
(filters, in_channels, k, k) with 'same' padding for odd k, max pooling uses
'valid' padding. Parameters are a flat list ``[W0, b0, W1, b1, ...]`` in layer
order, which is what every other module passes around as "weights".
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, ShapeMismatch

DENSE, CONV2D, MAXPOOL2D, FLATTEN = "dense", "conv2d", "maxpool2d", "flatten"
TRAINABLE = (DENSE, CONV2D)

Params = list  # list[np.ndarray], alternating weight / bias


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0  # dense units or conv filters
    kernel: int = 0  # conv kernel side or pool side
    activation: str | None = None

    def __post_init__(self):
        if self.kind not in (DENSE, CONV2D, MAXPOOL2D, FLATTEN):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in TRAINABLE and self.units < 1:
            raise ValueError(f"{self.kind} layer needs a positive unit count")
        if self.kind in (CONV2D, MAXPOOL2D) and self.kernel < 1:
            raise ValueError(f"{self.kind} layer needs a positive kernel size")
        if self.kind == CONV2D and self.kernel % 2 == 0:
            raise ValueError("'same' padding is only implemented for odd kernels")
        if self.activation not in (None, "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE

    def to_text(self) -> str:
        if self.kind == FLATTEN:
            return FLATTEN
        if self.kind == MAXPOOL2D:
            return f"{MAXPOOL2D}:{self.kernel}"
        parts = [self.kind, str(self.units)]
        if self.kind == CONV2D:
            parts.append(str(self.kernel))
        if self.activation:
            parts.append(self.activation)
        return ":".join(parts)

    @classmethod
    def from_text(cls, text: str) -> "LayerSpec":
        parts = text.strip().split(":")
        kind = parts[0].lower()
        act = parts[-1] if parts[-1] == "relu" else None
        nums = [int(p) for p in parts[1:] if p != "relu"]
        if kind == DENSE:
            return cls(DENSE, units=nums[0], activation=act)
        if kind == CONV2D:
            return cls(CONV2D, units=nums[0], kernel=nums[1], activation=act)
        if kind == MAXPOOL2D:
            return cls(MAXPOOL2D, kernel=nums[0] if nums else 2)
        if kind == FLATTEN:
            return cls(FLATTEN)
        raise ValueError(f"cannot parse layer {text!r}")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shapes()  # validates the chain

    @property
    def classes(self) -> int:
        return self.output_shapes()[-1][0]

    def output_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            if layer.kind == DENSE:
                if len(shape) != 1:
                    raise ShapeMismatch(f"dense layer fed a {shape} tensor; add a flatten layer")
                shape = (layer.units,)
            elif layer.kind == CONV2D:
                if len(shape) != 3:
                    raise ShapeMismatch(f"conv2d layer fed a {shape} tensor")
                shape = (layer.units, shape[1], shape[2])
            elif layer.kind == MAXPOOL2D:
                if len(shape) != 3 or shape[1] < layer.kernel or shape[2] < layer.kernel:
                    raise ShapeMismatch(f"cannot pool {shape} with size {layer.kernel}")
                shape = (shape[0], shape[1] // layer.kernel, shape[2] // layer.kernel)
            else:
                shape = (int(np.prod(shape)),)
            shapes.append(shape)
        if not shapes or len(shapes[-1]) != 1:
            raise ShapeMismatch("model must end with a dense layer producing logits")
        return shapes

    def input_shapes(self) -> list[tuple[int, ...]]:
        return [self.input_shape] + self.output_shapes()[:-1]

    def trainable_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.trainable]

    def param_shapes(self) -> list[tuple[int, ...]]:
        out = []
        for layer, in_shape in zip(self.layers, self.input_shapes()):
            if layer.kind == DENSE:
                out += [(in_shape[0], layer.units), (layer.units,)]
            elif layer.kind == CONV2D:
                out += [(layer.units, in_shape[0], layer.kernel, layer.kernel), (layer.units,)]
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes())

    def init(self, seed: int = 0, dtype=np.float64) -> Params:
        """Glorot-uniform weights and zero biases."""
        rng = np.random.default_rng(seed)
        params = []
        for shape in self.param_shapes():
            if len(shape) == 1:
                params.append(np.zeros(shape, dtype=dtype))
                continue
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:
                field = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * field, shape[0] * field
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
        return params

    def with_units(self, units: dict[int, int]) -> "ModelSpec":
        """Copy with the unit counts of some trainable layers replaced (by layer index)."""
        layers = [replace(layer, units=units[i]) if i in units else layer for i, layer in enumerate(self.layers)]
        return ModelSpec(self.input_shape, tuple(layers))

    def to_text(self) -> str:
        return "input:" + "x".join(map(str, self.input_shape)) + "," + ",".join(l.to_text() for l in self.layers)

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if not parts or not parts[0].startswith("input:"):
            raise ValueError("model text must start with 'input:CxHxW' or 'input:D'")
        shape = tuple(int(s) for s in parts[0][len("input:"):].split("x"))
        return cls(shape, tuple(LayerSpec.from_text(p) for p in parts[1:]))


def emnist62_model() -> ModelSpec:
    """The full-size EMNIST62 convolutional model (6,603,710 parameters)."""
    return ModelSpec((1, 28, 28), (
        LayerSpec(CONV2D, 32, 5, "relu"),
        LayerSpec(MAXPOOL2D, kernel=2),
        LayerSpec(CONV2D, 64, 5, "relu"),
        LayerSpec(MAXPOOL2D, kernel=2),
        LayerSpec(FLATTEN),
        LayerSpec(DENSE, 2048, activation="relu"),
        LayerSpec(DENSE, 62),
    ))


def desk_model(image_size: int = 8, classes: int = 10, filters: tuple[int, int] = (4, 32),
               hidden: int = 128) -> ModelSpec:
    """Reduced replica of the EMNIST62 layout for desk-scale runs."""
    return ModelSpec((1, image_size, image_size), (
        LayerSpec(CONV2D, filters[0], 3, "relu"),
        LayerSpec(MAXPOOL2D, kernel=2),
        LayerSpec(CONV2D, filters[1], 3, "relu"),
        LayerSpec(MAXPOOL2D, kernel=2),
        LayerSpec(FLATTEN),
        LayerSpec(DENSE, hidden, activation="relu"),
        LayerSpec(DENSE, classes),
    ))


def dense_chain_model(input_dim: int, widths: tuple[int, ...], classes: int) -> ModelSpec:
    layers = [LayerSpec(DENSE, w, activation="relu") for w in widths] + [LayerSpec(DENSE, classes)]
    return ModelSpec((input_dim,), tuple(layers))


PRESETS = {"emnist62": emnist62_model, "desk": desk_model}


def check_params(spec: ModelSpec, params: Params) -> None:
    expected = spec.param_shapes()
    got = [tuple(p.shape) for p in params]
    if got != expected:
        raise ShapeMismatch(f"parameter shapes {got} do not match model {expected}")


# ---- layer kernels -------------------------------------------------------

@lru_cache(maxsize=64)
def _im2col_index(c: int, h: int, w: int, k: int) -> np.ndarray:
    """Flat gather index (H*W, C*k*k) into a (C, H+k-1, W+k-1) padded image."""
    hp, wp = h + k - 1, w + k - 1
    ci, di, dj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    patch = (ci * hp * wp + di * wp + dj).ravel()
    oi, oj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    origin = (oi * wp + oj).ravel()
    return origin[:, None] + patch[None, :]


def _im2col(x, k):
    n, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((n, c, h + k - 1, w + k - 1), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x
    return xp.reshape(n, -1)[:, _im2col_index(c, h, w, k)]  # N, H*W, C*k*k


def _conv_forward(x, w, b):
    n, _, h, wd = x.shape
    f, k = w.shape[0], w.shape[2]
    cols = _im2col(x, k)
    out = cols @ w.reshape(f, -1).T + b  # N, H*W, F
    return out.transpose(0, 2, 1).reshape(n, f, h, wd), cols


def _conv_backward(dout, w, cols, need_dx=True):
    n, f, h, wd = dout.shape
    c, k = w.shape[1], w.shape[2]
    g = dout.reshape(n, f, h * wd)
    dw = np.einsum("nfp,npq->fq", g, cols).reshape(w.shape)
    db = g.sum(axis=(0, 2))
    if not need_dx:
        return None, dw, db
    # full correlation with the flipped kernel, padded so the output stays H x W
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)  # C, F*k*k
    dx = _im2col(dout, k) @ wf.T  # N, H*W, C
    return dx.transpose(0, 2, 1).reshape(n, c, h, wd), dw, db


def _pool_forward(x, size):
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    xr = x[:, :, : ho * size, : wo * size].reshape(n, c, ho, size, wo, size)
    xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = xr.argmax(axis=-1)
    out = xr.max(axis=-1)
    return out, idx


def _pool_backward(dout, idx, size, in_shape):
    n, c, h, w = in_shape
    ho, wo = dout.shape[2], dout.shape[3]
    g = np.zeros((n, c, ho, wo, size * size), dtype=dout.dtype)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    g = g.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, :, : ho * size, : wo * size] = g
    return dx


def forward(spec: ModelSpec, params: Params, x: np.ndarray):
    """Logits of shape (batch, classes) and the cache needed by ``backward``."""
    check_params(spec, params)
    x = np.asarray(x, dtype=params[0].dtype)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatch(f"input shape {x.shape[1:]} != model input {spec.input_shape}")
    cache = []
    h = x
    pi = 0
    for layer in spec.layers:
        if layer.kind == DENSE:
            w, b = params[pi], params[pi + 1]
            pi += 2
            z = h @ w + b
            cache.append((h, z))
            h = np.maximum(z, 0) if layer.activation else z
        elif layer.kind == CONV2D:
            w, b = params[pi], params[pi + 1]
            pi += 2
            z, cols = _conv_forward(h, w, b)
            cache.append((cols, z))
            h = np.maximum(z, 0) if layer.activation else z
        elif layer.kind == MAXPOOL2D:
            out, idx = _pool_forward(h, layer.kernel)
            cache.append((idx, h.shape))
            h = out
        else:
            cache.append(h.shape)
            h = h.reshape(h.shape[0], -1)
    return h, cache


def backward(spec: ModelSpec, params: Params, cache, dlogits: np.ndarray) -> Params:
    grads: list = [None] * len(params)
    pi = len(params)
    g = dlogits
    for layer, c in zip(reversed(spec.layers), reversed(cache)):
        if layer.kind in TRAINABLE:
            pi -= 2
            inp, z = c
            if layer.activation:
                g = g * (z > 0)
            w = params[pi]
            if layer.kind == DENSE:
                grads[pi] = inp.T @ g
                grads[pi + 1] = g.sum(axis=0)
                g = g @ w.T if pi else None
            else:
                g, grads[pi], grads[pi + 1] = _conv_backward(g, w, inp, need_dx=pi > 0)
            if pi == 0:
                break  # nothing upstream needs the input gradient
        elif layer.kind == MAXPOOL2D:
            idx, in_shape = c
            g = _pool_backward(g, idx, layer.kernel, in_shape)
        else:
            g = g.reshape(c)
    return grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsum - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - logsum[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def loss_and_grad(spec: ModelSpec, params: Params, x: np.ndarray, y: np.ndarray):
    logits, cache = forward(spec, params, x)
    loss, dlogits = softmax_cross_entropy(logits, y)
    return loss, backward(spec, params, cache, dlogits)


def sgd_local_train(spec: ModelSpec, params: Params, x: np.ndarray, y: np.ndarray, lr: float = 0.035,
                    epochs: int = 1, batch_size: int = 10, rng: np.random.Generator | None = None) -> Params:
    """Plain minibatch SGD; returns new arrays and leaves ``params`` untouched.

    Batch order is reshuffled every epoch from ``rng``; without an rng the
    data is visited in storage order.
    """
    if len(y) == 0:
        raise EmptyDataset("client dataset is empty")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    params = [p.copy() for p in params]
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grads = loss_and_grad(spec, params, x[idx], y[idx])
            for p, g in zip(params, grads):
                p -= lr * g
    return params


def predict(spec: ModelSpec, params: Params, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = [forward(spec, params, x[i : i + batch_size])[0].argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def training_accuracy(spec: ModelSpec, params: Params, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise EmptyDataset("cannot score an empty dataset")
    return float(np.mean(predict(spec, params, x) == np.asarray(y)))


# ---- serialization -------------------------------------------------------

_MAGIC = b"CFDW1\n"


def dumps_weights(spec: ModelSpec, params: Params) -> bytes:
    """Text header (model spec, dtype) followed by little-endian arrays in layer order."""
    check_params(spec, params)
    dtype = np.dtype(params[0].dtype).newbyteorder("<")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(f"model={spec.to_text()}\ndtype={dtype.str}\nEND\n".encode())
    for p in params:
        buf.write(np.ascontiguousarray(p, dtype=dtype).tobytes())
    return buf.getvalue()


def loads_weights(blob: bytes) -> tuple[ModelSpec, Params]:
    if not blob.startswith(_MAGIC):
        raise ValueError("not a weights blob")
    end = blob.index(b"END\n") + 4
    header = dict(line.split("=", 1) for line in blob[len(_MAGIC) : end - 4].decode().splitlines())
    spec = ModelSpec.from_text(header["model"])
    dtype = np.dtype(header["dtype"])
    params, offset = [], end
    for shape in spec.param_shapes():
        count = int(np.prod(shape))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise ValueError("weights payload truncated")
        params.append(np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).astype(dtype.newbyteorder("=")))
        offset += nbytes
    return spec, params


def save_weights(path, spec: ModelSpec, params: Params) -> None:
    Path(path).write_bytes(dumps_weights(spec, params))


def load_weights(path) -> tuple[ModelSpec, Params]:
    return loads_weights(Path(path).read_bytes())

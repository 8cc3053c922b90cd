"""Sub-model extraction from a global model and merging of sub-model updates.

Units (dense) or filters (conv) are dropped on every trainable layer except
the first and the last. Channel masks pass unchanged through pooling, and a
flatten layer expands a channel mask to all spatial positions of the channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MaskShapeMismatch
from .nn import CONV2D, DENSE, FLATTEN, ModelSpec, Params


def maskable_layers(spec: ModelSpec) -> list[int]:
    """Indices (into ``spec.layers``) of the trainable layers that may drop units."""
    return spec.trainable_layers()[1:-1]


@dataclass
class MaskAssignment:
    """Keep-masks of one client, keyed by layer index. Missing layers keep everything."""

    masks: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, spec: ModelSpec, rows) -> "MaskAssignment":
        """One codeword per maskable layer, in layer order."""
        layers = maskable_layers(spec)
        rows = list(rows)
        if len(rows) != len(layers):
            raise MaskShapeMismatch(f"{len(rows)} masks for {len(layers)} maskable layers")
        return cls({i: np.asarray(r).astype(bool) for i, r in zip(layers, rows)})

    def full(self, spec: ModelSpec) -> dict[int, np.ndarray]:
        """Masks for every trainable layer, validated against the model."""
        allowed = set(maskable_layers(spec))
        out = {}
        for i in spec.trainable_layers():
            units = spec.layers[i].units
            if i in self.masks:
                m = np.asarray(self.masks[i], dtype=bool)
                if m.shape != (units,):
                    raise MaskShapeMismatch(f"layer {i}: mask of shape {m.shape} for {units} units")
                if i not in allowed and not m.all():
                    raise MaskShapeMismatch(f"layer {i} is the first or last trainable layer and cannot drop units")
                if not m.any():
                    raise MaskShapeMismatch(f"layer {i}: mask drops every unit")
                out[i] = m
            else:
                out[i] = np.ones(units, dtype=bool)
        extra = set(self.masks) - set(out)
        if extra:
            raise MaskShapeMismatch(f"masks given for non-trainable layers {sorted(extra)}")
        return out


def param_index(spec: ModelSpec, assignment: MaskAssignment) -> list[tuple[np.ndarray, ...]]:
    """Per parameter array, the ``np.ix_`` index selecting the kept entries."""
    masks = assignment.full(spec)
    shapes = spec.input_shapes()
    cur = np.ones(spec.input_shape[0], dtype=bool)
    out = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == DENSE:
            keep = np.flatnonzero(masks[i])
            out += [np.ix_(np.flatnonzero(cur), keep), (keep,)]
            cur = masks[i]
        elif layer.kind == CONV2D:
            keep = np.flatnonzero(masks[i])
            k = np.arange(layer.kernel)
            out += [np.ix_(keep, np.flatnonzero(cur), k, k), (keep,)]
            cur = masks[i]
        elif layer.kind == FLATTEN:
            c, h, w = shapes[i]
            cur = np.repeat(cur, h * w)
    return out


@dataclass
class SubModel:
    spec: ModelSpec
    params: Params
    assignment: MaskAssignment
    index: list
    origin_round: int = 0

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params)


def extract_submodel(spec: ModelSpec, params: Params, assignment: MaskAssignment,
                     origin_round: int = 0) -> SubModel:
    index = param_index(spec, assignment)
    masks = assignment.full(spec)
    sub_spec = spec.with_units({i: int(m.sum()) for i, m in masks.items()})
    sub_params = [p[ix].copy() for p, ix in zip(params, index)]
    return SubModel(sub_spec, sub_params, assignment, index, origin_round)


def embed_update(spec: ModelSpec, delta_sub: Params, sub: SubModel):
    """Scatter a reduced delta into full-size arrays; also return the holder bitmaps."""
    full_shapes = spec.param_shapes()
    if [tuple(d.shape) for d in delta_sub] != [tuple(p.shape) for p in sub.params]:
        raise MaskShapeMismatch("delta does not match the sub-model shapes")
    deltas, bitmaps = [], []
    for d, ix, shape in zip(delta_sub, sub.index, full_shapes):
        full = np.zeros(shape, dtype=d.dtype)
        bit = np.zeros(shape, dtype=bool)
        full[ix] = d
        bit[ix] = True
        deltas.append(full)
        bitmaps.append(bit)
    return deltas, bitmaps


def merge_updates(shapes, updates) -> Params:
    """Per coordinate, the p-weighted mean of the deltas of the clients holding it.

    ``updates`` is a sequence of ``(deltas, bitmaps, p)``. The weights are
    renormalized over the holders of each coordinate; coordinates that no
    client held get 0. Clients are summed in the given order.
    """
    shapes = [tuple(s.shape) if hasattr(s, "shape") else tuple(s) for s in shapes]
    updates = list(updates)
    dtype = updates[0][0][0].dtype if updates else np.float64
    num = [np.zeros(s, dtype=dtype) for s in shapes]
    den = [np.zeros(s, dtype=dtype) for s in shapes]
    for deltas, bitmaps, p in updates:
        for j, (d, b) in enumerate(zip(deltas, bitmaps)):
            if d.shape != shapes[j] or b.shape != shapes[j]:
                raise MaskShapeMismatch(f"update array {j} has shape {d.shape}, expected {shapes[j]}")
            num[j] += p * np.where(b, d, 0)
            den[j] += p * b
    out = []
    for n_, d_ in zip(num, den):
        held = d_ > 0
        out.append(np.divide(n_, d_, out=np.zeros_like(n_), where=held))
    return out

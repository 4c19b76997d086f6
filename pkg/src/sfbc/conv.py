"""Continuous-convolution layer over particle graphs.

The forward pass contracts per-edge separable basis tensors with a weight
tensor, the neighbor features and a radial window, accumulates messages on the
receiving particle and adds a dense self-interaction term. The backward pass
is analytic; basis tensors are recomputed per edge batch instead of being
stored, so memory scales with the batch size rather than the edge count.

No normalization of the neighbor sum is applied (the SPH-interpolation
convention): fewer neighbors mean smaller outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from sfbc.bases import (
    BasisSpec,
    MappingSpec,
    WindowSpec,
    basis_tensor,
    eval_window,
    map_coords,
)
from sfbc.errors import ConfigurationError


@dataclass
class ParticleGraph:
    """Directed neighbor edges (i <- j) with normalized displacements.

    ``receivers`` must be sorted ascending; ``disp`` holds (x_i - x_j)/h and
    ``rad`` its Euclidean norm. Self edges are excluded.
    """

    node_count: int
    receivers: np.ndarray
    senders: np.ndarray
    disp: np.ndarray
    rad: np.ndarray
    _row_offsets: np.ndarray | None = field(default=None, repr=False)

    @property
    def edge_count(self) -> int:
        return len(self.receivers)

    @property
    def dim(self) -> int:
        return self.disp.shape[1]

    def row_offsets(self) -> np.ndarray:
        """CSR-style row pointer over the receiver-sorted edges."""
        if self._row_offsets is None:
            counts = np.bincount(self.receivers, minlength=self.node_count)
            self._row_offsets = np.concatenate([[0], np.cumsum(counts)])
        return self._row_offsets

    def validate(self, tol: float = 1e-9):
        if np.any(self.receivers == self.senders):
            raise ConfigurationError("graph contains self edges")
        if np.any(np.diff(self.receivers) < 0):
            raise ConfigurationError("edges must be sorted by receiver")
        if np.any(self.rad > 1.0 + 1e-6):
            raise ConfigurationError("edge radius exceeds the support radius")
        if not np.allclose(np.linalg.norm(self.disp, axis=1), self.rad, atol=tol):
            raise ConfigurationError("edge radii inconsistent with displacements")
        return self


@dataclass(frozen=True)
class ConvConfig:
    """Interpolation scheme of one convolution layer.

    ``basis`` is a single BasisSpec applied to every axis or one spec per
    axis. ``batch_size`` only bounds the per-chunk basis tensor; results are
    independent of it up to floating-point summation order.
    """

    basis: BasisSpec | tuple
    window: WindowSpec = WindowSpec("none")
    mapping: MappingSpec = MappingSpec("identity")
    symmetry: str = "standard"
    batch_size: int = 16384

    def axis_specs(self, d: int) -> tuple:
        if isinstance(self.basis, BasisSpec):
            return (self.basis,) * d
        if len(self.basis) != d:
            raise ConfigurationError(
                f"{len(self.basis)} axis specs for a {d}-dimensional graph"
            )
        return tuple(self.basis)

    def term_shape(self, d: int) -> tuple:
        return tuple(s.n for s in self.axis_specs(d))


@dataclass
class ConvLayerParams:
    """weights: [n1(,n2,n3), in, out]; self_weights: [in, out]; bias: [out]."""

    weights: np.ndarray
    self_weights: np.ndarray
    bias: np.ndarray | None = None

    @property
    def in_features(self) -> int:
        return self.weights.shape[-2]

    @property
    def out_features(self) -> int:
        return self.weights.shape[-1]

    def arrays(self) -> list:
        out = [self.weights, self.self_weights]
        if self.bias is not None:
            out.append(self.bias)
        return out

    def copy(self) -> "ConvLayerParams":
        return ConvLayerParams(
            self.weights.copy(),
            self.self_weights.copy(),
            None if self.bias is None else self.bias.copy(),
        )


@dataclass
class ConvLayerGrads:
    weights: np.ndarray
    self_weights: np.ndarray
    bias: np.ndarray | None
    features: np.ndarray

    def arrays(self) -> list:
        out = [self.weights, self.self_weights]
        if self.bias is not None:
            out.append(self.bias)
        return out


def _check_shapes(graph, features, params, config):
    if features.ndim != 2 or features.shape[0] != graph.node_count:
        raise ConfigurationError("features must be [node_count x in_features]")
    d = graph.dim
    expected = config.term_shape(d) + (features.shape[1], params.out_features)
    if params.weights.shape != expected:
        raise ConfigurationError(
            f"weight tensor shape {params.weights.shape}, expected {expected}"
        )
    if params.self_weights.shape != (features.shape[1], params.out_features):
        raise ConfigurationError("self-interaction weight shape mismatch")


def _edge_chunks(graph: ParticleGraph, batch_size: int):
    """Edge ranges aligned to receiver boundaries so per-node sums never split
    (except for single nodes with more than batch_size edges)."""
    offsets = graph.row_offsets()
    e = graph.edge_count
    a = 0
    while a < e:
        target = min(a + batch_size, e)
        k = np.searchsorted(offsets, target, side="left")
        b = int(offsets[k]) if k < len(offsets) else e
        if b <= a:
            b = min(a + batch_size, e)
        yield a, b
        a = b


def _edge_basis(graph, config, a, b):
    mapped = map_coords(config.mapping, graph.disp[a:b], graph.dim)
    return basis_tensor(config.axis_specs(graph.dim), mapped, config.symmetry)


def _scatter_rows(out, receivers, values):
    """Deterministic segment sum of receiver-sorted rows into out."""
    if len(receivers) == 0:
        return
    cuts = np.flatnonzero(np.diff(receivers)) + 1
    starts = np.concatenate([[0], cuts])
    # receivers[starts] are unique within one chunk
    out[receivers[starts]] += np.add.reduceat(values, starts, axis=0)


def conv_forward(graph, features, params, config) -> np.ndarray:
    """One continuous convolution: neighbor contraction + self term + bias."""
    features = np.asarray(features, dtype=float)
    _check_shapes(graph, features, params, config)
    t_total = params.weights[..., 0, 0].size
    w_flat = params.weights.reshape(t_total * params.in_features, params.out_features)

    out = features @ params.self_weights
    if params.bias is not None:
        out = out + params.bias
    for a, b in _edge_chunks(graph, config.batch_size):
        basis = _edge_basis(graph, config, a, b)
        win = eval_window(config.window, graph.rad[a:b])
        fj = features[graph.senders[a:b]] * win[:, None]
        edge_in = (basis[:, :, None] * fj[:, None, :]).reshape(b - a, -1)
        msgs = edge_in @ w_flat
        _scatter_rows(out, graph.receivers[a:b], msgs)
    return out


def conv_backward(graph, features, params, config, upstream):
    """Analytic gradients of conv_forward w.r.t. weights, self, bias, features."""
    features = np.asarray(features, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    _check_shapes(graph, features, params, config)
    if upstream.shape != (graph.node_count, params.out_features):
        raise ConfigurationError("upstream shape mismatch")

    c_in, c_out = params.in_features, params.out_features
    t_total = params.weights[..., 0, 0].size
    w_flat = params.weights.reshape(t_total, c_in * c_out)

    grad_w = np.zeros((t_total * c_in, c_out))
    grad_features = upstream @ params.self_weights.T
    for a, b in _edge_chunks(graph, config.batch_size):
        basis = _edge_basis(graph, config, a, b)
        win = eval_window(config.window, graph.rad[a:b])
        senders = graph.senders[a:b]
        fj = features[senders] * win[:, None]
        g = upstream[graph.receivers[a:b]]

        edge_in = (basis[:, :, None] * fj[:, None, :]).reshape(b - a, -1)
        grad_w += edge_in.T @ g

        tmp = (basis @ w_flat).reshape(b - a, c_in, c_out)
        grad_fj = (tmp * g[:, None, :]).sum(axis=2) * win[:, None]
        for c in range(c_in):
            grad_features[:, c] += np.bincount(
                senders, weights=grad_fj[:, c], minlength=graph.node_count
            )

    grad_bias = upstream.sum(axis=0) if params.bias is not None else None
    return ConvLayerGrads(
        weights=grad_w.reshape(params.weights.shape),
        self_weights=features.T @ upstream,
        bias=grad_bias,
        features=grad_features,
    )


def relu(x):
    return np.maximum(x, 0.0)


def stack_forward(graph, features, layers):
    """Apply a sequence of (params, config, activate) layers.

    Returns (output, cache); the cache holds per-layer inputs and
    pre-activation outputs for stack_backward.
    """
    x = np.asarray(features, dtype=float)
    cache = []
    for params, config, activate in layers:
        pre = conv_forward(graph, x, params, config)
        cache.append((x, pre))
        x = relu(pre) if activate else pre
    return x, cache


def apply_layer_stack(graph, features, layers):
    out, _ = stack_forward(graph, features, layers)
    return out


def stack_backward(graph, layers, cache, upstream):
    """Gradients for every layer of a stack plus the input features."""
    grads = [None] * len(layers)
    g = np.asarray(upstream, dtype=float)
    for idx in range(len(layers) - 1, -1, -1):
        params, config, activate = layers[idx]
        x, pre = cache[idx]
        if activate:
            g = g * (pre > 0.0)
        layer_grads = conv_backward(graph, x, params, config, g)
        grads[idx] = layer_grads
        g = layer_grads.features
    return grads, g

"""Chebyshev graph encoders and token-embedding fusion."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

READOUTS = ("flatten", "mean")


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape if shape is not None else (fan_in, fan_out))


def scaled_laplacian(A: Tensor) -> Tensor:
    """``2L/lambda_max - I`` for symmetric nonnegative ``A`` with zero diagonal."""
    if np.any(A.data < 0) or np.any(np.diag(A.data) != 0):
        raise T.ContractError("scaled_laplacian: adjacency must be nonnegative with zero diagonal")
    return T.scaled_laplacian(A)


def symmetric_adjacency(G: Tensor, mask: np.ndarray) -> Tensor:
    """``((G + G^T) / 2) * mask`` for one stacked copy ``G`` (c x c)."""
    sym = T.mul(T.add(G, T.transpose(G, (1, 0))), 0.5)
    return T.mul(sym, Tensor(mask.astype(np.float64)))


@dataclass
class ChebLayer:
    theta: Tensor  # order x f_in x f_out
    bias: Tensor  # f_out

    @property
    def order(self) -> int:
        return self.theta.shape[0]


@dataclass
class ChebEncoder:
    """``depth`` stacked Chebyshev layers plus a readout to ``h`` per token."""

    layers: list[ChebLayer]
    readout: str = "flatten"
    readout_W: Tensor | None = None
    readout_b: Tensor | None = None

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def order(self) -> int:
        return self.layers[0].order

    @classmethod
    def init(cls, f_in: int, hidden: int, n_channels: int, order: int, depth: int, rng: np.random.Generator,
             readout: str = "flatten", name: str = "enc") -> "ChebEncoder":
        if order < 1 or depth < 1:
            raise ValueError("Chebyshev order and depth must be >= 1")
        if readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}, got {readout!r}")
        layers = []
        dims = [f_in] + [hidden] * depth
        for i in range(depth):
            theta = xavier(rng, dims[i], dims[i + 1], (order, dims[i], dims[i + 1]))
            layers.append(ChebLayer(
                Tensor(theta, requires_grad=True, name=f"{name}.layer{i}.theta"),
                Tensor(np.zeros(dims[i + 1]), requires_grad=True, name=f"{name}.layer{i}.bias"),
            ))
        enc = cls(layers, readout)
        if readout == "flatten":
            enc.readout_W = Tensor(xavier(rng, n_channels * hidden, hidden), requires_grad=True,
                                   name=f"{name}.readout.W")
            enc.readout_b = Tensor(np.zeros(hidden), requires_grad=True, name=f"{name}.readout.b")
        return enc

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.theta, layer.bias]
        if self.readout_W is not None:
            out += [self.readout_W, self.readout_b]
        return out


def cheb_layer(F: Tensor, layer: ChebLayer, Lt: Tensor) -> Tensor:
    """``ReLU(sum_i T_i(Lt) F theta_i + bias)`` with the three-term recurrence."""
    if F.ndim != 3 or Lt.shape != (F.shape[1], F.shape[1]) or layer.theta.shape[1] != F.shape[2]:
        raise ShapeError(f"cheb_layer: F{F.shape}, L{Lt.shape}, theta{layer.theta.shape}")
    terms = [F]
    if layer.order > 1:
        terms.append(T.einsum("ij,bjf->bif", Lt, F))
    for _ in range(2, layer.order):
        nxt = T.mul(T.einsum("ij,bjf->bif", Lt, terms[-1]), 2.0)
        terms.append(T.sub(nxt, terms[-2]))
    mixed = T.einsum("ibcf,ifo->bco", T.stack(terms, axis=0), layer.theta)
    return T.relu(T.add(mixed, layer.bias))


def cheb_forward(F: Tensor, enc: ChebEncoder, Lt: Tensor) -> Tensor:
    """Node-level output ``(B, c, h)`` after all layers."""
    if enc.order > F.shape[1]:
        warnings.warn(f"Chebyshev order {enc.order} exceeds {F.shape[1]} nodes", stacklevel=2)
    x = F
    for layer in enc.layers:
        x = cheb_layer(x, layer, Lt)
    return x


def encode(F: Tensor, enc: ChebEncoder, Lt: Tensor) -> Tensor:
    """Token embedding ``(B, h)`` from node features ``(B, c, f)``."""
    x = cheb_forward(F, enc, Lt)
    if enc.readout == "mean":
        return T.mean(x, axis=1)
    B, c, h = x.shape
    return T.linear(T.reshape(x, (B, c * h)), enc.readout_W, enc.readout_b)


@dataclass
class BaseEmbedding:
    W: Tensor  # (c * f) x h
    b: Tensor

    @classmethod
    def init(cls, n_in: int, hidden: int, rng: np.random.Generator) -> "BaseEmbedding":
        return cls(Tensor(xavier(rng, n_in, hidden), requires_grad=True, name="base.W"),
                   Tensor(np.zeros(hidden), requires_grad=True, name="base.b"))


def base_embed(F: Tensor, lp: BaseEmbedding) -> Tensor:
    """Flatten ``(B, c, f)`` tokens and apply the affine map to ``h``."""
    B = F.shape[0]
    return T.linear(T.reshape(F, (B, -1)), lp.W, lp.b)


def fuse_tokens(*streams: Tensor) -> Tensor:
    """Elementwise mean of equally shaped token embeddings."""
    shapes = {s.shape for s in streams}
    if len(shapes) != 1:
        raise ShapeError(f"fuse_tokens: mismatched shapes {sorted(shapes)}")
    total = streams[0]
    for s in streams[1:]:
        total = T.add(total, s)
    return T.mul(total, 1.0 / len(streams))

"""RMSNorm, Mamba block with selective scan, and the residual MSST stack."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import xavier
from .tensor import Tensor

RMS_EPS = 1e-5
CONV_WIDTH = 4
CONV_PAD = 3


@dataclass
class RmsNormLayer:
    w: Tensor
    eps: float = RMS_EPS

    @classmethod
    def init(cls, h: int, name: str = "norm") -> "RmsNormLayer":
        return cls(Tensor(np.ones(h), requires_grad=True, name=f"{name}.w"))


def rmsnorm(z: Tensor, layer: RmsNormLayer) -> Tensor:
    return T.rmsnorm(z, layer.w, layer.eps)


@dataclass
class MambaParams:
    in_W: Tensor
    in_b: Tensor
    conv: Tensor
    x_W: Tensor
    x_b: Tensor
    dt_W: Tensor
    dt_b: Tensor
    A_log: Tensor
    D: Tensor
    out_W: Tensor
    out_b: Tensor
    d_state: int = 16
    dt_rank: int = 2

    @property
    def d_inner(self) -> int:
        return self.D.shape[0]

    @classmethod
    def init(cls, h: int, rng: np.random.Generator, d_state: int = 16, expand: int = 2,
             name: str = "mamba") -> "MambaParams":
        d_inner = expand * h
        dt_rank = math.ceil(h / 16)

        def p(arr, tag):
            return Tensor(arr, requires_grad=True, name=f"{name}.{tag}")

        # dt bias so that softplus(bias) is log-uniform in [1e-3, 1e-1]
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), d_inner))
        dt_bias = dt + np.log(-np.expm1(-dt))
        return cls(
            in_W=p(xavier(rng, h, 2 * d_inner), "in_proj.W"),
            in_b=p(np.zeros(2 * d_inner), "in_proj.b"),
            conv=p(rng.uniform(-0.5, 0.5, (d_inner, CONV_WIDTH)), "conv.kernel"),
            x_W=p(xavier(rng, d_inner, dt_rank + 2 * d_state), "x_proj.W"),
            x_b=p(np.zeros(dt_rank + 2 * d_state), "x_proj.b"),
            dt_W=p(rng.uniform(-dt_rank**-0.5, dt_rank**-0.5, (dt_rank, d_inner)), "dt_proj.W"),
            dt_b=p(dt_bias, "dt_proj.b"),
            A_log=p(np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1)), "A_log"),
            D=p(np.ones(d_inner), "D"),
            out_W=p(xavier(rng, d_inner, h), "out_proj.W"),
            out_b=p(np.zeros(h), "out_proj.b"),
            d_state=d_state,
            dt_rank=dt_rank,
        )

    def parameters(self) -> list[Tensor]:
        return [self.in_W, self.in_b, self.conv, self.x_W, self.x_b, self.dt_W, self.dt_b,
                self.A_log, self.D, self.out_W, self.out_b]


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    return T.selective_scan(u, delta, A, B, C, D)


def selective_scan_naive(u, delta, A, B, C, D) -> np.ndarray:
    """Per-batch, per-step, per-channel loop; the reference for the fused scan."""
    u, delta, A, B, C, D = (np.asarray(a, dtype=np.float64) for a in (u, delta, A, B, C, D))
    b, n, d = u.shape
    y = np.zeros((b, n, d))
    for i in range(b):
        x = np.zeros((d, A.shape[1]))
        for t in range(n):
            for ch in range(d):
                x[ch] = np.exp(delta[i, t, ch] * A[ch]) * x[ch] + delta[i, t, ch] * B[i, t] * u[i, t, ch]
                y[i, t, ch] = x[ch] @ C[i, t] + D[ch] * u[i, t, ch]
    return y


def ssm_params(u_act: Tensor, p: MambaParams) -> tuple[Tensor, Tensor, Tensor]:
    """Project to ``(delta, B, C)``; ``delta = softplus(dt_proj(.))`` is ``(b, n, d_inner)``."""
    dbl = T.linear(u_act, p.x_W, p.x_b)
    r, s = p.dt_rank, p.d_state
    dlow = T.index(dbl, (..., slice(0, r)))
    B = T.index(dbl, (..., slice(r, r + s)))
    C = T.index(dbl, (..., slice(r + s, r + 2 * s)))
    delta = T.softplus(T.linear(dlow, p.dt_W, p.dt_b))
    return delta, B, C


def mamba_block(z: Tensor, p: MambaParams) -> Tensor:
    d = p.d_inner
    proj = T.linear(z, p.in_W, p.in_b)
    u = T.index(proj, (..., slice(0, d)))
    res = T.index(proj, (..., slice(d, 2 * d)))
    conv = T.depthwise_conv1d(T.transpose(u, (0, 2, 1)), p.conv, CONV_PAD)
    u_act = T.silu(T.transpose(conv, (0, 2, 1)))
    delta, B, C = ssm_params(u_act, p)
    A = T.neg(T.exp(p.A_log))
    y = T.selective_scan(u_act, delta, A, B, C, p.D)
    return T.linear(T.mul(y, T.silu(res)), p.out_W, p.out_b)


@dataclass
class MsstBlock:
    outer_norm: RmsNormLayer  # pre-norm wrapping the block
    inner_norm: RmsNormLayer  # pre-norm inside the block
    mamba: MambaParams


@dataclass
class MsstStack:
    blocks: list[MsstBlock]
    final_norm: RmsNormLayer

    @classmethod
    def init(cls, h: int, n_layers: int, rng: np.random.Generator, d_state: int = 16, expand: int = 2,
             name: str = "msst") -> "MsstStack":
        if n_layers < 1:
            raise ValueError("MSST stack needs at least one block")
        blocks = [
            MsstBlock(
                RmsNormLayer.init(h, f"{name}.block{m}.outer_norm"),
                RmsNormLayer.init(h, f"{name}.block{m}.inner_norm"),
                MambaParams.init(h, rng, d_state, expand, f"{name}.block{m}.mamba"),
            )
            for m in range(n_layers)
        ]
        return cls(blocks, RmsNormLayer.init(h, f"{name}.final_norm"))

    def parameters(self) -> list[Tensor]:
        out = []
        for blk in self.blocks:
            out += [blk.outer_norm.w, blk.inner_norm.w] + blk.mamba.parameters()
        return out + [self.final_norm.w]


def msst_block(z: Tensor, blk: MsstBlock) -> Tensor:
    return T.add(mamba_block(rmsnorm(z, blk.inner_norm), blk.mamba), z)


def msst_forward(x: Tensor, stack: MsstStack) -> Tensor:
    for blk in stack.blocks:
        x = T.add(msst_block(rmsnorm(x, blk.outer_norm), blk), x)
    return rmsnorm(x, stack.final_norm)

"""Global/local adjacency priors built from batch-mean rPSD features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor

PEARSON_EPS = 1e-6
KAPPA_PERCENTILE = 75.0
DIST_PERCENTILE = 25.0

SHIPPED_REGION_MAPS = ("seed62_7", "seed62_10", "seed62_17", "std32_7")


class GraphConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegionMap:
    channel_names: tuple[str, ...]
    region_ids: tuple[int, ...]
    region_names: tuple[str, ...] = ()

    @property
    def n_regions(self) -> int:
        return len(set(self.region_ids))

    def mask(self) -> np.ndarray:
        ids = np.asarray(self.region_ids)
        return ids[:, None] == ids[None, :]

    def to_json(self) -> dict:
        return {"channel_names": list(self.channel_names), "region_ids": list(self.region_ids),
                "region_names": list(self.region_names)}

    @classmethod
    def from_json(cls, doc: dict) -> "RegionMap":
        return cls(tuple(doc["channel_names"]), tuple(int(i) for i in doc["region_ids"]),
                   tuple(doc.get("region_names", ())))


def load_region_table(name_or_path: str) -> dict[str, list[str]]:
    """Region name -> channel labels, from a shipped map id or a JSON file path."""
    if name_or_path in SHIPPED_REGION_MAPS:
        text = resources.files("msgm.regions").joinpath(f"{name_or_path}.json").read_text()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise GraphConfigError(f"unknown region map {name_or_path!r}; shipped maps: {SHIPPED_REGION_MAPS}")
        text = path.read_text()
    doc = json.loads(text)
    return {str(k): [str(c) for c in v] for k, v in doc["regions"].items()}


def region_map_for(channel_names: Sequence[str], table: dict[str, list[str]] | str) -> RegionMap:
    """Assign each channel (case-insensitive label match) its region id."""
    if isinstance(table, str):
        table = load_region_table(table)
    lookup: dict[str, int] = {}
    names = list(table)
    for rid, region in enumerate(names):
        for ch in table[region]:
            lookup[ch.upper()] = rid
    missing = [ch for ch in channel_names if ch.upper() not in lookup]
    if missing:
        raise GraphConfigError(f"channels not covered by the region map: {', '.join(missing)}")
    return RegionMap(tuple(channel_names), tuple(lookup[ch.upper()] for ch in channel_names), tuple(names))


# ---------------------------------------------------------------------------
# Mixing and prior construction
# ---------------------------------------------------------------------------

@dataclass
class MixParams:
    W: Tensor  # (f * n_k) x n_k
    V: Tensor  # c x n_k

    @classmethod
    def init(cls, n_channels: int, n_seg: int, n_feat: int, rng: np.random.Generator, prefix: str = "") -> "MixParams":
        fan_in, fan_out = n_feat * n_seg, n_seg
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True, name=prefix + "mix.W")
        V = Tensor(np.zeros((n_channels, n_seg)), requires_grad=True, name=prefix + "mix.V")
        return cls(W, V)


def flatten_segments(mean_features: np.ndarray) -> np.ndarray:
    """``(n_k, c, f)`` -> ``(c, n_k * f)``, segment-major: column ``t * f + j``."""
    n, c, f = mean_features.shape
    return np.transpose(mean_features, (1, 0, 2)).reshape(c, n * f)


def batch_mean_mix(features: np.ndarray, mix: MixParams) -> np.ndarray:
    """Batch mean of ``(b, n_k, c, f)`` features, flattened and mixed: ``Z W + V``."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 4 or features.shape[0] == 0:
        raise GraphConfigError(f"expected nonempty (b, n_k, c, f) features, got {features.shape}")
    _, n, c, f = features.shape
    if mix.W.shape != (f * n, n) or mix.V.shape != (c, n):
        raise GraphConfigError(
            f"mix shapes W{mix.W.shape} V{mix.V.shape} do not fit n_k={n}, c={c}, f={f}"
        )
    Z = flatten_segments(features.mean(axis=0))
    return Z @ mix.W.data + mix.V.data


@dataclass
class GraphStats:
    sigma: float
    kappa_threshold: float
    dist_threshold: float

    def to_json(self) -> dict:
        return {"sigma": self.sigma, "kappa_threshold": self.kappa_threshold,
                "dist_threshold": self.dist_threshold}


def pearson_matrix(u: np.ndarray, eps: float = PEARSON_EPS) -> np.ndarray:
    z = (u - u.mean(axis=1, keepdims=True)) / (u.std(axis=1, keepdims=True) + eps)
    return z @ z.T / u.shape[1]


def build_global_adjacency(u: np.ndarray) -> tuple[np.ndarray, GraphStats]:
    """Gaussian-weighted adjacency gated by correlation and Manhattan distance.

    Percentiles use linear interpolation over the ``c(c-1)/2`` distinct pairs.
    """
    u = np.asarray(u, dtype=np.float64)
    c = u.shape[0]
    if u.ndim != 2 or c < 2:
        raise GraphConfigError(f"need at least two node feature rows, got shape {u.shape}")
    kappa = pearson_matrix(u)
    diff = u[:, None, :] - u[None, :, :]
    manhattan = np.abs(diff).sum(axis=-1)
    sq_euclid = (diff * diff).sum(axis=-1)
    iu = np.triu_indices(c, k=1)
    kappa_t = float(np.percentile(kappa[iu], KAPPA_PERCENTILE))
    dist_t = float(np.percentile(manhattan[iu], DIST_PERCENTILE))
    euclid = np.sqrt(sq_euclid[iu])
    sigma = float((euclid.mean() + euclid.std()) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        gauss = np.where(sq_euclid == 0, 1.0, np.exp(-sq_euclid / (2.0 * sigma**2)))
    keep = (kappa >= kappa_t) & (manhattan <= dist_t)
    w = np.where(keep, gauss, 0.0)
    np.fill_diagonal(w, 0.0)
    w = np.maximum(w, w.T)  # pair gates are symmetric; guards against rounding asymmetry in kappa
    return w, GraphStats(sigma, kappa_t, dist_t)


def build_local_adjacency(w_global: np.ndarray, regions: RegionMap) -> np.ndarray:
    c = w_global.shape[0]
    if len(regions.region_ids) != c:
        raise GraphConfigError(
            f"region map covers {len(regions.region_ids)} channels but the graph has {c}"
        )
    return np.where(regions.mask(), w_global, 0.0)


@dataclass
class SpatialPrior:
    """Trainable stacked priors for one scale: ``G_global``/``G_local`` are ``(2, c, c)``."""

    k: int
    G_global: Tensor
    G_local: Tensor
    local_mask: np.ndarray
    stats: GraphStats
    init_global: np.ndarray = field(repr=False, default=None)
    init_local: np.ndarray = field(repr=False, default=None)

    def project(self) -> None:
        """Restore the structural constraints after an optimizer step."""
        offdiag = ~np.eye(self.local_mask.shape[0], dtype=bool)
        self.G_global.assign(np.maximum(self.G_global.data, 0.0) * offdiag)
        self.G_local.assign(np.maximum(self.G_local.data, 0.0) * (self.local_mask & offdiag))


def stack_priors(w_global: np.ndarray, w_local: np.ndarray, local_mask: np.ndarray, stats: GraphStats,
                 k: int = 0) -> SpatialPrior:
    if w_global.shape != w_local.shape or w_global.ndim != 2 or w_global.shape[0] != w_global.shape[1]:
        raise GraphConfigError(f"priors must be matching c x c matrices, got {w_global.shape} and {w_local.shape}")
    gg = np.stack([w_global, w_global])
    gl = np.stack([w_local, w_local])
    return SpatialPrior(
        k=k,
        G_global=Tensor(gg, requires_grad=True, name=f"scale{k}.prior.global"),
        G_local=Tensor(gl, requires_grad=True, name=f"scale{k}.prior.local"),
        local_mask=np.asarray(local_mask, dtype=bool),
        stats=stats,
        init_global=gg.copy(),
        init_local=gl.copy(),
    )


def init_prior(features: np.ndarray, mix: MixParams, regions: RegionMap, k: int = 0) -> SpatialPrior:
    u = batch_mean_mix(features, mix)
    wg, stats = build_global_adjacency(u)
    wl = build_local_adjacency(wg, regions)
    return stack_priors(wg, wl, regions.mask(), stats, k)

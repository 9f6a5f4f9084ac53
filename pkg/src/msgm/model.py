"""End-to-end MSGM model: features -> dual graphs -> tokens -> MSST -> logits."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import BaseEmbedding, ChebEncoder, base_embed, encode, fuse_tokens, scaled_laplacian, \
    symmetric_adjacency, xavier
from .features import N_BANDS, ScaleSpec
from .graph import GraphStats, MixParams, RegionMap, SpatialPrior, init_prior, stack_priors
from .mamba import MsstStack, msst_forward
from .tensor import Tensor

ABLATIONS = ("no_temporal_multiscale", "no_spatial_multiscale", "single_gcn", "no_fusion", "no_msst")
CHECKPOINT_MAGIC = b"MSGMCKPT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MsgmConfig:
    n_channels: int
    n_classes: int = 2
    hidden: int = 32
    n_layers: int = 1
    cheb_order: int = 3
    d_state: int = 16
    expand: int = 2
    dropout: float = 0.25
    first_len: float = 20.0
    first_hop: float = 4.0
    windows: tuple[tuple[float, float], ...] = ((4.0, 2.0), (8.0, 4.0), (12.0, 6.0))
    region_map: str = "std32_7"
    encoder_readout: str = "flatten"
    share_msst_across_scales: bool = True
    ablations: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple((float(a), float(b)) for a, b in self.windows))
        object.__setattr__(self, "ablations", tuple(self.ablations))
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        unknown = [a for a in self.ablations if a not in ABLATIONS]
        if unknown:
            raise ConfigError(f"unknown ablation flag(s) {unknown}; known: {ABLATIONS}")

    @property
    def scale_spec(self) -> ScaleSpec:
        windows = self.windows[:1] if "no_temporal_multiscale" in self.ablations else self.windows
        return ScaleSpec(self.first_len, self.first_hop, windows)

    def has(self, flag: str) -> bool:
        return flag in self.ablations

    def to_json(self) -> dict:
        d = asdict(self)
        d["windows"] = [list(w) for w in self.windows]
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "MsgmConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        doc = dict(doc)
        if "windows" in doc:
            doc["windows"] = tuple(tuple(w) for w in doc["windows"])
        if "ablations" in doc:
            doc["ablations"] = tuple(doc["ablations"])
        return cls(**doc)


def apply_ablation(cfg: MsgmConfig, *flags: str) -> MsgmConfig:
    """Return ``cfg`` with the given ablation flags switched on."""
    unknown = [f for f in flags if f not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation flag(s) {unknown}; known: {ABLATIONS}")
    merged = tuple(dict.fromkeys(cfg.ablations + tuple(flags)))
    return replace(cfg, ablations=merged)


def pool_and_fuse(x_global: Sequence[Tensor], x_local: Sequence[Tensor] | None = None) -> Tensor:
    """Mean-pool each ``(b, n_k, h)`` stream, L2-normalise, average streams, then scales."""
    if not x_global:
        raise ConfigError("pool_and_fuse needs at least one scale")
    per_scale = []
    for k, xg in enumerate(x_global):
        streams = [T.l2_normalize(T.mean(xg, axis=1))]
        if x_local is not None:
            streams.append(T.l2_normalize(T.mean(x_local[k], axis=1)))
        per_scale.append(fuse_tokens(*streams))
    return fuse_tokens(*per_scale)


def loss(logits: Tensor, labels, smoothing: float = 0.1) -> Tensor:
    return T.smoothed_cross_entropy(logits, labels, smoothing)


def param_count(params) -> int:
    if isinstance(params, dict):
        params = params.values()
    return int(sum(p.size for p in params))


class MsgmModel:
    """Parameter container and forward pass.

    Graph priors are created by :meth:`init_graphs` from training features only;
    until then the model cannot run forward.
    """

    def __init__(self, cfg: MsgmConfig, regions: RegionMap, seed: int = 0):
        if len(regions.region_ids) != cfg.n_channels:
            raise ConfigError(f"region map has {len(regions.region_ids)} channels, config says {cfg.n_channels}")
        self.cfg = cfg
        self.regions = regions
        self.spec = cfg.scale_spec
        self.rng = np.random.default_rng(seed)
        rng = self.rng
        c, h, f = cfg.n_channels, cfg.hidden, N_BANDS
        self.n_segments = [self.spec.n_segments(k) for k in range(self.spec.n_scales)]
        self.mix = [MixParams.init(c, n, f, rng, prefix=f"scale{k}.") for k, n in enumerate(self.n_segments)]
        self.priors: list[SpatialPrior] | None = None
        self.base = BaseEmbedding.init(c * f, h, rng)

        self.encoders: dict[str, ChebEncoder] = {}
        if not cfg.has("no_fusion"):
            streams = ["global"] if cfg.has("no_spatial_multiscale") else ["global", "local"]
            depths = {"shallow": 1} if cfg.has("single_gcn") else {"shallow": 1, "deep": 2}
            for stream in streams:
                for kind, depth in depths.items():
                    name = f"enc.{kind}_{stream}"
                    self.encoders[f"{kind}_{stream}"] = ChebEncoder.init(
                        f, h, c, cfg.cheb_order, depth, rng, cfg.encoder_readout, name)

        self.msst: list[MsstStack] = []
        if not cfg.has("no_msst"):
            n_stacks = 1 if cfg.share_msst_across_scales else self.spec.n_scales
            for i in range(n_stacks):
                name = "msst" if n_stacks == 1 else f"msst{i}"
                self.msst.append(MsstStack.init(h, cfg.n_layers, rng, cfg.d_state, cfg.expand, name))

        self.cls_W = Tensor(xavier(rng, h, cfg.n_classes), requires_grad=True, name="classifier.W")
        self.cls_b = Tensor(np.zeros(cfg.n_classes), requires_grad=True, name="classifier.b")

    @property
    def streams(self) -> list[str]:
        return ["global"] if self.cfg.has("no_spatial_multiscale") else ["global", "local"]

    # -- graphs -------------------------------------------------------------

    def init_graphs(self, features: Sequence[np.ndarray]) -> None:
        """Build the stacked priors from training features, one ``(b, n_k, c, f)`` array per scale."""
        if len(features) != self.spec.n_scales:
            raise ConfigError(f"expected {self.spec.n_scales} feature scales, got {len(features)}")
        self.priors = [init_prior(F, self.mix[k], self.regions, k) for k, F in enumerate(features)]

    def project(self) -> None:
        for prior in self.priors or []:
            prior.project()

    def adjacency(self, k: int, stream: str, copy: int) -> Tensor:
        prior = self.priors[k]
        c = self.cfg.n_channels
        offdiag = ~np.eye(c, dtype=bool)
        if stream == "global":
            return symmetric_adjacency(T.index(prior.G_global, copy), offdiag)
        return symmetric_adjacency(T.index(prior.G_local, copy), prior.local_mask & offdiag)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: list[Tensor] = []
        for mix in self.mix:
            out += [mix.W, mix.V]
        if self.priors is not None:
            for prior in self.priors:
                if self.encoders:
                    out.append(prior.G_global)
                    if "local" in self.streams:
                        out.append(prior.G_local)
        for enc in self.encoders.values():
            out += enc.parameters()
        out += [self.base.W, self.base.b]
        for stack in self.msst:
            out += stack.parameters()
        out += [self.cls_W, self.cls_b]
        named = {p.name: p for p in out}
        if len(named) != len(out):
            raise RuntimeError("duplicate parameter names")
        return named

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state lacks {sorted(missing)}")
        for k, p in params.items():
            p.assign(state[k])

    # -- forward ------------------------------------------------------------

    def _tokens(self, F: Tensor, base: Tensor, k: int, stream: str) -> Tensor:
        if not self.encoders:
            return base
        parts = [base]
        for kind, copy in (("shallow", 0), ("deep", 1)):
            enc = self.encoders.get(f"{kind}_{stream}")
            if enc is None:
                continue
            Lt = scaled_laplacian(self.adjacency(k, stream, copy))
            parts.append(encode(F, enc, Lt))
        return fuse_tokens(*parts)

    def embed(self, features: Sequence[np.ndarray], training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
        """``x_final`` of shape ``(b, h)``."""
        if self.priors is None and self.encoders:
            raise RuntimeError("graph priors not initialised; call init_graphs first")
        if len(features) != self.spec.n_scales:
            raise ConfigError(f"expected {self.spec.n_scales} feature scales, got {len(features)}")
        h = self.cfg.hidden
        p_drop = self.cfg.dropout if training else 0.0
        if p_drop > 0 and rng is None:
            raise ValueError("training-mode dropout needs an rng")
        pooled: dict[str, list[Tensor]] = {s: [] for s in self.streams}
        for k, Fk in enumerate(features):
            b, n, c, f = Fk.shape
            if n != self.n_segments[k] or c != self.cfg.n_channels:
                raise ConfigError(f"scale {k}: got {Fk.shape}, expected (b, {self.n_segments[k]}, "
                                  f"{self.cfg.n_channels}, {N_BANDS})")
            F = Tensor(np.asarray(Fk).reshape(b * n, c, f))
            base = base_embed(F, self.base)
            for stream in self.streams:
                tokens = self._tokens(F, base, k, stream)
                if p_drop > 0:
                    keep = (rng.random(tokens.shape) >= p_drop) / (1.0 - p_drop)
                    tokens = T.mul(tokens, Tensor(keep))
                x = T.reshape(tokens, (b, n, h))
                if self.msst:
                    x = msst_forward(x, self.msst[0 if len(self.msst) == 1 else k])
                pooled[stream].append(x)
        return pool_and_fuse(pooled["global"], pooled.get("local"))

    def forward(self, features: Sequence[np.ndarray], training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        return T.linear(self.embed(features, training, rng), self.cls_W, self.cls_b)

    def predict(self, features: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
        """Logits as a plain array, evaluated in chunks without a tape."""
        b = features[0].shape[0]
        out = []
        for i in range(0, b, batch_size):
            out.append(self.forward([F[i:i + batch_size] for F in features]).data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.n_classes))


# ---------------------------------------------------------------------------
# Checkpoints: MAGIC | u64 header length | JSON header | float64 LE payload
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: MsgmModel, meta: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = list(model.state().items())
    for prior in model.priors or []:
        arrays.append((f"init.scale{prior.k}.global", prior.init_global))
        arrays.append((f"init.scale{prior.k}.local", prior.init_local))
        if prior.G_global.name not in model.parameters():
            arrays.append((prior.G_global.name, prior.G_global.data))
        if prior.G_local.name not in model.parameters():
            arrays.append((prior.G_local.name, prior.G_local.data))
    directory, offset = [], 0
    for name, arr in arrays:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format": "msgm-checkpoint",
        "version": 1,
        "config": model.cfg.to_json(),
        "regions": model.regions.to_json(),
        "graph_stats": [p.stats.to_json() for p in model.priors or []],
        "meta": meta or {},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an MSGM checkpoint (bad magic at offset 0)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        if start + 8 * n > len(raw):
            raise ValueError(f"{path}: tensor {entry['name']} truncated at offset {start}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(entry["shape"]).copy()
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[MsgmModel, dict]:
    header, tensors = read_checkpoint(path)
    cfg = MsgmConfig.from_json(header["config"])
    regions = RegionMap.from_json(header["regions"])
    model = MsgmModel(cfg, regions)
    if header["graph_stats"]:
        model.priors = []
        for k, stats in enumerate(header["graph_stats"]):
            g0 = tensors[f"init.scale{k}.global"][0]
            l0 = tensors[f"init.scale{k}.local"][0]
            prior = stack_priors(g0, l0, regions.mask(), GraphStats(**stats), k)
            prior.init_global = tensors[f"init.scale{k}.global"]
            prior.init_local = tensors[f"init.scale{k}.local"]
            prior.G_global.assign(tensors[prior.G_global.name])
            prior.G_local.assign(tensors[prior.G_local.name])
            model.priors.append(prior)
    model.load_state({k: v for k, v in tensors.items() if not k.startswith("init.")})
    return model, header

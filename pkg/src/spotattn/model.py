"""The hierarchical attention network over tissue spots.

Each of the L layers runs two stages. The local stage updates every spot
(original and pseudo) from its k nearest neighbors, letting originals absorb
context from the pseudo-spots between them. The global stage then runs dense
all-pairs attention over the original spots only, and its updates are written
back into the all-spot stream so the next layer's local stage sees refreshed
originals. An MLP head maps the final original-spot features to gene
expression. Both stages use negative-aware attention with the distance bias.

Blocks are pre-norm residual: x + Attn(LN(x)) then x + FFN(LN(x)), with the
feed-forward expanding d -> 4d -> d. All linear maps are bias-free; the
residual path carries each spot's own contribution, which is why the local
stage can exclude self from the neighbor set while the dense stage keeps it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .attention import AttentionMaps, HeadProjections, NegAttnParams, multi_head_attention
from .data import SlideRecord
from .errors import ConfigError, ShapeError, ValidationError
from .geometry import KnnGraph, grid_distances, knn_indices
from .numerics import Rng, Tape, Tensor

Array = np.ndarray


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Field defaults are the full-scale
    profile; ``desk_profile`` is the small configuration the tests train."""

    d: int = 1536
    n_heads: int = 8
    n_layers: int = 3
    knn_k: int = 32
    tau_neg: float = 0.6
    beta: float = 1.5
    n_genes: int = 250
    mlp_hidden: int | None = None  # None means 2 * d
    seed: int = 3927

    @classmethod
    def desk_profile(cls, **overrides) -> "ModelConfig":
        base = dict(d=32, n_heads=4, n_layers=2, knn_k=8, n_genes=8, mlp_hidden=64)
        base.update(overrides)
        return cls(**base)

    @property
    def hidden(self) -> int:
        return 2 * self.d if self.mlp_hidden is None else self.mlp_hidden

    def validate(self) -> None:
        if self.n_heads < 1 or self.d % self.n_heads != 0:
            raise ConfigError(f"n_heads={self.n_heads} must divide d={self.d}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.knn_k < 1:
            raise ConfigError(f"knn_k must be >= 1, got {self.knn_k}")
        if self.n_genes < 1:
            raise ConfigError(f"n_genes must be >= 1, got {self.n_genes}")
        if self.hidden < 1:
            raise ConfigError(f"mlp_hidden must be >= 1, got {self.hidden}")
        if self.tau_neg <= 0:
            raise ConfigError(f"tau_neg must be positive, got {self.tau_neg}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")

    def attn_params(self) -> NegAttnParams:
        return NegAttnParams.default(self.d, self.n_heads, self.tau_neg, self.beta)


@dataclass
class StageParams:
    """One attention stage: projections, its two layer norms, and the FFN."""

    heads: HeadProjections
    ln_attn_gain: Tensor
    ln_attn_shift: Tensor
    w_ff1: Tensor  # (d, 4d)
    w_ff2: Tensor  # (4d, d)
    ln_ff_gain: Tensor
    ln_ff_shift: Tensor


@dataclass
class LayerParams:
    local: StageParams
    global_: StageParams


@dataclass
class ModelParams:
    layers: list[LayerParams]
    head_w1: Tensor  # (d, hidden)
    head_w2: Tensor  # (hidden, G)

    def named(self) -> dict[str, Tensor]:
        """Flat registry in the canonical (initialization) order."""
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            for stage_name, stage in (("local", layer.local), ("global", layer.global_)):
                prefix = f"layers.{i}.{stage_name}"
                for h, t in enumerate(stage.heads.wq):
                    out[f"{prefix}.attn.wq.{h}"] = t
                for h, t in enumerate(stage.heads.wk):
                    out[f"{prefix}.attn.wk.{h}"] = t
                for h, t in enumerate(stage.heads.wv):
                    out[f"{prefix}.attn.wv.{h}"] = t
                out[f"{prefix}.attn.wo"] = stage.heads.wo
                out[f"{prefix}.ln_attn.gain"] = stage.ln_attn_gain
                out[f"{prefix}.ln_attn.shift"] = stage.ln_attn_shift
                out[f"{prefix}.ffn.w1"] = stage.w_ff1
                out[f"{prefix}.ffn.w2"] = stage.w_ff2
                out[f"{prefix}.ln_ff.gain"] = stage.ln_ff_gain
                out[f"{prefix}.ln_ff.shift"] = stage.ln_ff_shift
        out["head.w1"] = self.head_w1
        out["head.w2"] = self.head_w2
        return out

    def named_arrays(self) -> dict[str, Array]:
        return {name: t.data for name, t in self.named().items()}

    def load_arrays(self, arrays: dict[str, Array]) -> None:
        registry = self.named()
        if set(arrays) != set(registry):
            missing = sorted(set(registry) - set(arrays))
            extra = sorted(set(arrays) - set(registry))
            raise ValidationError(f"parameter name mismatch: missing={missing} extra={extra}")
        for name, t in registry.items():
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape}, expected {t.data.shape}")
            t.data = arr

    def count(self) -> int:
        return sum(t.data.size for t in self.named().values())


def init_params(cfg: ModelConfig) -> ModelParams:
    """Seeded Xavier-normal weights; layer norms start at identity.

    Weight matrices consume the random stream in registry order; layer-norm
    gains/shifts are constant and draw nothing, so the stream layout is a
    pure function of the architecture shape.
    """
    cfg.validate()
    rng = Rng(cfg.seed)
    d, d_k, hidden = cfg.d, cfg.d // cfg.n_heads, cfg.hidden

    def draw(rows: int, cols: int) -> Tensor:
        std = np.sqrt(2.0 / (rows + cols))
        return Tensor(nm.seeded_normal(rng, rows, cols, std))

    def make_stage() -> StageParams:
        heads = HeadProjections(
            wq=[draw(d, d_k) for _ in range(cfg.n_heads)],
            wk=[draw(d, d_k) for _ in range(cfg.n_heads)],
            wv=[draw(d, d_k) for _ in range(cfg.n_heads)],
            wo=draw(d, d),
        )
        return StageParams(
            heads=heads,
            ln_attn_gain=Tensor(np.ones(d)),
            ln_attn_shift=Tensor(np.zeros(d)),
            w_ff1=draw(d, 4 * d),
            w_ff2=draw(4 * d, d),
            ln_ff_gain=Tensor(np.ones(d)),
            ln_ff_shift=Tensor(np.zeros(d)),
        )

    layers = [
        LayerParams(local=make_stage(), global_=make_stage()) for _ in range(cfg.n_layers)
    ]
    return ModelParams(layers=layers, head_w1=draw(d, hidden), head_w2=draw(hidden, cfg.n_genes))


@dataclass
class SlideGeometry:
    """Per-slide constants reused across training steps."""

    knn: KnnGraph  # over all spots, self excluded
    global_dist: Array  # (n_orig, n_orig) grid distances


def prepare_geometry(slide: SlideRecord, cfg: ModelConfig) -> SlideGeometry:
    grid = slide.coords.grid
    return SlideGeometry(
        knn=knn_indices(grid, grid, cfg.knn_k),
        global_dist=grid_distances(grid[: slide.n_orig], grid[: slide.n_orig]),
    )


def _stage(x, stage: StageParams, attn_kwargs: dict, params: NegAttnParams, tape, want_maps):
    """Pre-norm residual attention + feed-forward update."""
    normed = nm.layer_norm(x, stage.ln_attn_gain, stage.ln_attn_shift, tape=tape)
    attn_out, maps = multi_head_attention(
        normed, normed, proj=stage.heads, params=params, tape=tape, want_maps=want_maps,
        **attn_kwargs,
    )
    x = nm.add(x, attn_out, tape)
    normed = nm.layer_norm(x, stage.ln_ff_gain, stage.ln_ff_shift, tape=tape)
    ff = nm.matmul(nm.gelu(nm.matmul(normed, stage.w_ff1, tape), tape), stage.w_ff2, tape)
    return nm.add(x, ff, tape), maps


def local_stage(
    x,
    coords: Array,
    knn: KnnGraph,
    stage: StageParams,
    params: NegAttnParams,
    tape: Tape | None = None,
    want_maps: bool = False,
):
    """Neighbor-restricted update of every spot, originals and pseudo alike."""
    kwargs = dict(coords_q=coords, coords_kv=coords, knn=knn, dist=knn.distances)
    return _stage(x, stage, kwargs, params, tape, want_maps)


def global_stage(
    x,
    coords: Array,
    stage: StageParams,
    params: NegAttnParams,
    tape: Tape | None = None,
    want_maps: bool = False,
    dist: Array | None = None,
):
    """Dense all-pairs update over original spots, self included."""
    kwargs = dict(coords_q=coords, coords_kv=coords, knn=None, dist=dist)
    return _stage(x, stage, kwargs, params, tape, want_maps)


@dataclass
class LayerMaps:
    local: list[AttentionMaps]
    global_: list[AttentionMaps]


@dataclass
class ForwardCache:
    """Attention maps per layer; local maps stay in gathered (n_total, k)
    form so the cache never holds an (n_total)^2 matrix."""

    layers: list[LayerMaps] = field(default_factory=list)


def forward(
    slide: SlideRecord,
    params: ModelParams,
    cfg: ModelConfig,
    geometry: SlideGeometry | None = None,
    tape: Tape | None = None,
    want_maps: bool = False,
) -> tuple[Tensor, ForwardCache | None]:
    """Predictions (n_orig, G) for one slide, optionally with attention maps."""
    if slide.d != cfg.d:
        raise ShapeError(f"slide feature dim {slide.d} does not match model d={cfg.d}")
    if geometry is None:
        geometry = prepare_geometry(slide, cfg)
    attn = cfg.attn_params()
    n_orig = slide.n_orig
    grid = slide.coords.grid
    cache = ForwardCache() if want_maps else None

    x = Tensor(slide.features.copy())
    for layer in params.layers:
        x, local_maps = local_stage(
            x, grid, geometry.knn, layer.local, attn, tape, want_maps
        )
        x_orig = nm.slice_rows(x, 0, n_orig, tape)
        x_orig, global_maps = global_stage(
            x_orig, grid[:n_orig], layer.global_, attn, tape, want_maps,
            dist=geometry.global_dist,
        )
        if n_orig < slide.n_total:
            x = nm.concat_rows(x_orig, nm.slice_rows(x, n_orig, slide.n_total, tape), tape)
        else:
            x = x_orig
        if want_maps:
            cache.layers.append(LayerMaps(local=local_maps, global_=global_maps))

    final = nm.slice_rows(x, 0, n_orig, tape)
    hidden = nm.gelu(nm.matmul(final, params.head_w1, tape), tape)
    preds = nm.matmul(hidden, params.head_w2, tape)
    return preds, cache

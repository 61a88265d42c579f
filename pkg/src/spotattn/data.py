"""Slide containers, binary serialization, and synthetic dataset generation.

Slides are stored in the "FST1" container: 4 magic bytes, a little-endian
uint32 version, a uint32-length-prefixed UTF-8 JSON header
{slide_id, n_orig, n_pseudo, d, G, gene_names}, then four raw sections of
row-major little-endian float64 values in fixed order: grid coordinates
(n_total x 2), physical coordinates (n_total x 2), features (n_total x d),
targets (n_orig x G). Rows are ordered originals first, then pseudo-spots,
so the is_pseudo flags are implied by the header counts.

Model checkpoints reuse the same layout under the magic "FSTW" with the
model configuration and a parameter manifest in the header.

The synthetic generator stands in for real tissue data at desk scale. Each
slide is a grid with a dropout fraction of spots removed (leaving off-grid
gaps) and two spatially interleaved latent clusters. A spot's features sit
near its cluster prototype, displaced by that cluster's slide-specific
smooth random field plus measurement noise; targets mix excitatory
same-cluster context with an inhibitory opposite-cluster term, so a spot's
expression carries a trace of the other cluster's field that only
neighborhood aggregation can recover.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ValidationError
from .geometry import (
    SpotCoords,
    avg_nn_distance,
    fit_affine,
    filter_pseudo,
    gen_pseudo_candidates,
)
from .numerics import Rng

Array = np.ndarray

SLIDE_MAGIC = b"FST1"
CKPT_MAGIC = b"FSTW"
FORMAT_VERSION = 1


@dataclass
class SlideRecord:
    """One tissue slide: coordinates, per-spot features, per-original targets."""

    slide_id: str
    coords: SpotCoords
    features: Array  # (n_total, d)
    targets: Array  # (n_orig, G)
    gene_names: list[str]

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64)

    @property
    def n_total(self) -> int:
        return self.coords.n

    @property
    def n_orig(self) -> int:
        return self.coords.n_orig

    @property
    def n_genes(self) -> int:
        return self.targets.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def validate_slide(slide: SlideRecord) -> list[str]:
    """Every invariant violation in the record; empty list means valid."""
    out = slide.coords.violations()
    n = slide.coords.n
    n_orig = slide.coords.n_orig
    if slide.coords.is_pseudo[:n_orig].any():
        out.append("spot rows must be ordered originals first, then pseudo-spots")
    if slide.features.shape[0] != n:
        out.append(f"features rows {slide.features.shape[0]} != n_total {n}")
    if slide.targets.shape[0] != n_orig:
        out.append(f"targets rows {slide.targets.shape[0]} != n_orig {n_orig}")
    if len(slide.gene_names) != slide.targets.shape[1]:
        out.append(
            f"{len(slide.gene_names)} gene names for {slide.targets.shape[1]} target columns"
        )
    for name, arr in (("features", slide.features), ("targets", slide.targets)):
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            r, c = bad[0]
            out.append(f"{name} has non-finite value at ({r}, {c})")
    return out


# ---------------------------------------------------------------------------
# FST1 container i/o.
# ---------------------------------------------------------------------------


def _write_container(fh, magic: bytes, header: dict, sections: list[Array]) -> None:
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(magic)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)
    for arr in sections:
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    offset = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(
            f"truncated file: expected {n} bytes of {what} at offset {offset}, got {len(buf)}"
        )
    return buf


def _read_container(fh, magic: bytes) -> dict:
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r} at offset 0, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
    try:
        header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header at offset 12: {exc}") from exc
    return header


def _read_section(fh, rows: int, cols: int, what: str) -> Array:
    buf = _read_exact(fh, rows * cols * 8, what)
    return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(rows, cols)


def write_slide(slide: SlideRecord, path) -> None:
    problems = validate_slide(slide)
    if problems:
        raise ValidationError("; ".join(problems))
    header = {
        "slide_id": slide.slide_id,
        "n_orig": slide.n_orig,
        "n_pseudo": slide.n_total - slide.n_orig,
        "d": slide.d,
        "G": slide.n_genes,
        "gene_names": slide.gene_names,
    }
    sections = [slide.coords.grid, slide.coords.phys, slide.features, slide.targets]
    with open(path, "wb") as fh:
        _write_container(fh, SLIDE_MAGIC, header, sections)


def read_slide(path) -> SlideRecord:
    with open(path, "rb") as fh:
        header = _read_container(fh, SLIDE_MAGIC)
        try:
            n_orig = int(header["n_orig"])
            n_pseudo = int(header["n_pseudo"])
            d = int(header["d"])
            n_genes = int(header["G"])
            slide_id = str(header["slide_id"])
            gene_names = [str(g) for g in header["gene_names"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"header missing or malformed field: {exc}") from exc
        n = n_orig + n_pseudo
        grid = _read_section(fh, n, 2, "grid coords")
        phys = _read_section(fh, n, 2, "phys coords")
        features = _read_section(fh, n, d, "features")
        targets = _read_section(fh, n_orig, n_genes, "targets")
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"unexpected trailing bytes at offset {fh.tell() - 1}")
    is_pseudo = np.zeros(n, dtype=bool)
    is_pseudo[n_orig:] = True
    slide = SlideRecord(
        slide_id=slide_id,
        coords=SpotCoords(grid=grid, phys=phys, is_pseudo=is_pseudo),
        features=features,
        targets=targets,
        gene_names=gene_names,
    )
    problems = validate_slide(slide)
    if problems:
        raise ValidationError("; ".join(problems))
    return slide


def write_manifest(path, train_paths: list[str], test_paths: list[str], d: int, n_genes: int):
    doc = {"train": list(train_paths), "test": list(test_paths), "d": d, "G": n_genes}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("train", "test", "d", "G"):
        if key not in doc:
            raise FormatError(f"manifest missing key {key!r}")
    return doc


# ---------------------------------------------------------------------------
# Checkpoints: model config + named parameter arrays in one container.
# ---------------------------------------------------------------------------


def write_checkpoint(path, config_dict: dict, named_params: dict[str, Array]) -> None:
    manifest = [{"name": name, "shape": list(arr.shape)} for name, arr in named_params.items()]
    header = {"config": config_dict, "params": manifest}
    for name, arr in named_params.items():
        if not np.isfinite(arr).all():
            raise ValidationError(f"parameter {name} contains non-finite values")
    with open(path, "wb") as fh:
        _write_container(fh, CKPT_MAGIC, header, [a.reshape(a.shape[0], -1) for a in named_params.values()])


def read_checkpoint(path) -> tuple[dict, dict[str, Array]]:
    with open(path, "rb") as fh:
        header = _read_container(fh, CKPT_MAGIC)
        try:
            config = dict(header["config"])
            manifest = list(header["params"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"checkpoint header malformed: {exc}") from exc
        params: dict[str, Array] = {}
        for entry in manifest:
            name, shape = str(entry["name"]), [int(s) for s in entry["shape"]]
            rows = shape[0]
            cols = 1
            for s in shape[1:]:
                cols *= s
            params[name] = _read_section(fh, rows, cols, f"parameter {name}").reshape(shape)
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"unexpected trailing bytes at offset {fh.tell() - 1}")
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise ValidationError(f"parameter {name} contains non-finite values")
    return config, params


# ---------------------------------------------------------------------------
# Synthetic data.
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Generator settings for the synthetic regression task."""

    n_train: int = 4
    n_test: int = 2
    grid_rows: int = 12
    grid_cols: int = 12
    dropout_rate: float = 0.2
    d: int = 32
    n_genes: int = 8
    noise_std: float = 0.6
    inhibition_strength: float = 0.5
    neighbor_k: int = 4
    seed: int = 3927

    def validate(self) -> None:
        if not (0.0 <= self.dropout_rate < 0.5):
            raise ConfigError(f"dropout_rate must be in [0, 0.5), got {self.dropout_rate}")
        kept = self.grid_rows * self.grid_cols * (1.0 - self.dropout_rate)
        if kept < self.neighbor_k + 2:
            raise ConfigError(
                f"grid keeps ~{kept:.0f} spots, need at least neighbor_k+2={self.neighbor_k + 2}"
            )
        for name in ("n_train", "n_test", "grid_rows", "grid_cols", "d", "n_genes", "neighbor_k"):
            if getattr(self, name) < (0 if name == "n_test" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be non-negative, got {self.noise_std}")


@dataclass
class SynthDescription:
    """Everything needed to regenerate targets from the stated formula."""

    w_same: Array  # (d, G): weight of same-cluster neighborhood mean
    w_opp: Array  # (d, G): weight of opposite-cluster neighborhood mean
    prototypes: Array  # (2, d) cluster feature prototypes
    neighbor_k: int
    inhibition_strength: float
    clusters: dict[str, Array] = field(default_factory=dict)  # slide_id -> (n_orig,) int


# relative scales of the generator; cluster separation is kept mild so the
# neighborhood terms, not cluster identity alone, carry the target variance
_PROTO_STD = 0.3
_TARGET_NOISE_FRAC = 0.1
_IID_NOISE_FRAC = 0.3
_FIELD_MODES = 4
_FIELD_WAVELENGTHS = (4.0, 8.0)  # grid units
_PHYS_SCALE = 100.0


def synth_dataset(cfg: SynthConfig) -> tuple[list[SlideRecord], list[SlideRecord], SynthDescription]:
    """Generate train/test slides plus the ground-truth generator description."""
    cfg.validate()
    rng = Rng(cfg.seed)
    prototypes = rng.normal(2 * cfg.d, _PROTO_STD).reshape(2, cfg.d)
    w_scale = 1.0 / np.sqrt(cfg.d)
    w_same = rng.normal(cfg.d * cfg.n_genes, w_scale).reshape(cfg.d, cfg.n_genes)
    w_opp = rng.normal(cfg.d * cfg.n_genes, w_scale).reshape(cfg.d, cfg.n_genes)
    desc = SynthDescription(
        w_same=w_same,
        w_opp=w_opp,
        prototypes=prototypes,
        neighbor_k=cfg.neighbor_k,
        inhibition_strength=cfg.inhibition_strength,
    )
    gene_names = [f"gene_{i}" for i in range(cfg.n_genes)]
    slides = []
    for s in range(cfg.n_train + cfg.n_test):
        split = "train" if s < cfg.n_train else "test"
        slide_id = f"synth_{split}_{s if s < cfg.n_train else s - cfg.n_train}"
        slide = _make_slide(slide_id, cfg, rng, desc, gene_names)
        slides.append(slide)
    return slides[: cfg.n_train], slides[cfg.n_train :], desc


def _make_slide(slide_id, cfg: SynthConfig, rng: Rng, desc: SynthDescription, gene_names):
    rr, cc = np.meshgrid(np.arange(cfg.grid_rows), np.arange(cfg.grid_cols), indexing="ij")
    grid = np.column_stack([rr.ravel(), cc.ravel()]).astype(np.float64)
    n_full = grid.shape[0]
    n_keep = n_full - int(round(cfg.dropout_rate * n_full))
    keep = np.sort(rng.permutation(n_full)[:n_keep])
    grid = grid[keep]

    # organic interleaved domains: threshold of a smooth scalar field, so a
    # spot's distance to the opposite cluster varies across the slide and
    # position alone does not reveal cluster membership
    clusters = _cluster_domains(grid, rng)
    counts = np.bincount(clusters, minlength=2)
    if counts.min() < cfg.neighbor_k:
        raise ConfigError(
            f"cluster sizes {counts.tolist()} smaller than neighbor_k={cfg.neighbor_k}"
        )
    desc.clusters[slide_id] = clusters

    phys = grid * _PHYS_SCALE
    n_orig = grid.shape[0]
    # per-cluster smooth random fields: each cluster's deviation from its
    # prototype varies slowly across the slide, so a spot's target carries a
    # trace of the OTHER cluster's field that only neighbors can reveal
    fields = _smooth_fields(grid, cfg, rng)
    features = (
        desc.prototypes[clusters]
        + fields[clusters, np.arange(n_orig)]
        + rng.normal(n_orig * cfg.d, _IID_NOISE_FRAC * cfg.noise_std).reshape(n_orig, cfg.d)
    )
    targets = synth_targets(grid, clusters, features, desc) + rng.normal(
        n_orig * cfg.n_genes, _TARGET_NOISE_FRAC * cfg.noise_std
    ).reshape(n_orig, cfg.n_genes)

    originals = SpotCoords(grid=grid, phys=phys, is_pseudo=np.zeros(n_orig, dtype=bool))
    transform, _ = fit_affine(grid, phys)
    candidates = gen_pseudo_candidates(originals)
    threshold = avg_nn_distance(originals)
    pseudo = filter_pseudo(candidates, originals, threshold, transform)
    pseudo_features = idw_features(pseudo.grid, grid, features)

    coords = SpotCoords(
        grid=np.concatenate([grid, pseudo.grid]),
        phys=np.concatenate([phys, pseudo.phys]),
        is_pseudo=np.concatenate([originals.is_pseudo, pseudo.is_pseudo]),
    )
    return SlideRecord(
        slide_id=slide_id,
        coords=coords,
        features=np.concatenate([features, pseudo_features]),
        targets=targets,
        gene_names=list(gene_names),
    )


def _cluster_domains(grid: Array, rng: Rng) -> Array:
    """Two interleaved cluster domains from the sign of a smooth field.

    Retries with fresh modes if the draw leaves one cluster nearly empty."""
    n = grid.shape[0]
    for _ in range(16):
        vals = np.zeros(n)
        for _ in range(_FIELD_MODES):
            wavelength = 5.0 + 4.0 * rng.uniform(1)[0]
            angle = 2.0 * math.pi * rng.uniform(1)[0]
            phase = 2.0 * math.pi * rng.uniform(1)[0]
            w = (2.0 * math.pi / wavelength) * np.array([math.cos(angle), math.sin(angle)])
            vals += rng.normal(1)[0] * np.cos(grid @ w + phase)
        clusters = (vals > np.median(vals)).astype(np.int64)
        if 0 < clusters.sum() < n:
            return clusters
    raise ConfigError("could not draw balanced cluster domains")


def _smooth_fields(grid: Array, cfg: SynthConfig, rng: Rng) -> Array:
    """Two (n, d) low-frequency random fields with per-entry std noise_std.

    Each field is a sum of cosine modes with wavelengths of a few grid
    units, one independent field per cluster.
    """
    n = grid.shape[0]
    m = _FIELD_MODES
    lo, hi = _FIELD_WAVELENGTHS
    out = np.zeros((2, n, cfg.d))
    amp_std = cfg.noise_std * math.sqrt(2.0 / m)
    for c in range(2):
        wavelengths = lo + (hi - lo) * rng.uniform(m)
        angles = 2.0 * math.pi * rng.uniform(m)
        freqs = (2.0 * math.pi / wavelengths)[:, None] * np.column_stack(
            [np.cos(angles), np.sin(angles)]
        )  # (m, 2)
        phases = 2.0 * math.pi * rng.uniform(m * cfg.d).reshape(m, cfg.d)
        amps = rng.normal(m * cfg.d, amp_std).reshape(m, cfg.d)
        phase_arg = grid @ freqs.T  # (n, m)
        # field[n, j] = sum_m a[m, j] * cos(pos_n . w_m + phi[m, j])
        out[c] = np.einsum("nmd,md->nd", np.cos(phase_arg[:, :, None] + phases[None, :, :]), amps)
    return out


def synth_targets(grid: Array, clusters: Array, features: Array, desc: SynthDescription) -> Array:
    """Noise-free targets from the generator formula.

    Each original spot mixes the mean feature of its neighbor_k nearest
    same-cluster spots (itself included) with the mean feature of its
    neighbor_k nearest opposite-cluster spots, the latter weighted by
    -inhibition_strength.
    """
    n = grid.shape[0]
    diff = grid[:, None, :] - grid[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    same = clusters[:, None] == clusters[None, :]
    mean_same = np.empty_like(features)
    mean_opp = np.empty_like(features)
    for i in range(n):
        order = np.argsort(np.where(same[i], d2[i], np.inf), kind="stable")
        mean_same[i] = features[order[: desc.neighbor_k]].mean(axis=0)
        order = np.argsort(np.where(same[i], np.inf, d2[i]), kind="stable")
        mean_opp[i] = features[order[: desc.neighbor_k]].mean(axis=0)
    return mean_same @ desc.w_same - desc.inhibition_strength * (mean_opp @ desc.w_opp)


def idw_features(pseudo_grid: Array, orig_grid: Array, orig_features: Array, n_nearest: int = 4) -> Array:
    """Inverse-distance-weighted mean of the nearest original features.

    The stand-in for image-derived pseudo-spot features when no image
    exists: each pseudo-spot blends its <= n_nearest closest originals with
    1/distance weights.
    """
    if pseudo_grid.shape[0] == 0:
        return np.empty((0, orig_features.shape[1]))
    diff = pseudo_grid[:, None, :] - orig_grid[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    m = min(n_nearest, orig_grid.shape[0])
    out = np.empty((pseudo_grid.shape[0], orig_features.shape[1]))
    for i in range(pseudo_grid.shape[0]):
        order = np.argsort(dist[i], kind="stable")[:m]
        w = 1.0 / dist[i][order]
        out[i] = (w[:, None] * orig_features[order]).sum(axis=0) / w.sum()
    return out


def strip_pseudo(slide: SlideRecord) -> SlideRecord:
    """The slide restricted to original spots (the no-pseudo-spot ablation)."""
    n_orig = slide.n_orig
    return SlideRecord(
        slide_id=slide.slide_id,
        coords=SpotCoords(
            grid=slide.coords.grid[:n_orig].copy(),
            phys=slide.coords.phys[:n_orig].copy(),
            is_pseudo=np.zeros(n_orig, dtype=bool),
        ),
        features=slide.features[:n_orig].copy(),
        targets=slide.targets.copy(),
        gene_names=list(slide.gene_names),
    )


def toy_slide(d: int, n_genes: int, seed: int, n_orig: int = 8, n_pseudo: int = 4) -> SlideRecord:
    """A tiny deterministic slide for gradient checks and smoke tests."""
    rng = Rng(seed)
    side = 1
    while side * side < n_orig:
        side += 1
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    grid = np.column_stack([rr.ravel(), cc.ravel()]).astype(np.float64)[:n_orig]
    phys = grid * _PHYS_SCALE
    originals = SpotCoords(grid=grid, phys=phys, is_pseudo=np.zeros(n_orig, dtype=bool))
    transform, _ = fit_affine(grid, phys)
    candidates = gen_pseudo_candidates(originals)
    pseudo_all = filter_pseudo(candidates, originals, avg_nn_distance(originals), transform)
    if pseudo_all.n < n_pseudo:
        raise ConfigError(f"toy grid yields only {pseudo_all.n} pseudo-spots, need {n_pseudo}")
    pseudo_grid = pseudo_all.grid[:n_pseudo]
    coords = SpotCoords(
        grid=np.concatenate([grid, pseudo_grid]),
        phys=np.concatenate([phys, transform.apply(pseudo_grid)]),
        is_pseudo=np.concatenate([np.zeros(n_orig, dtype=bool), np.ones(n_pseudo, dtype=bool)]),
    )
    features = rng.normal((n_orig + n_pseudo) * d).reshape(n_orig + n_pseudo, d)
    targets = rng.normal(n_orig * n_genes).reshape(n_orig, n_genes)
    return SlideRecord(
        slide_id=f"toy_{seed}",
        coords=coords,
        features=features,
        targets=targets,
        gene_names=[f"gene_{i}" for i in range(n_genes)],
    )

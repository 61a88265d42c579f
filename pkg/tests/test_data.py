"""Container round-trips, corruption handling, and the synthetic generator."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from spotattn import data as dt
from spotattn.errors import ConfigError, FormatError, ValidationError
from spotattn.geometry import SpotCoords, avg_nn_distance, gen_pseudo_candidates
from spotattn.numerics import Rng


def random_slide(seed, n_orig=None, n_pseudo=None, d=None, n_genes=None):
    rng = np.random.default_rng(seed)
    n_orig = n_orig or int(rng.integers(4, 30))
    n_pseudo = n_pseudo if n_pseudo is not None else int(rng.integers(0, 20))
    d = d or int(rng.integers(1, 12))
    n_genes = n_genes or int(rng.integers(1, 6))
    # distinct integer grid points for originals, distinct half-offset points for pseudo
    cells = rng.choice(40 * 40, size=n_orig + n_pseudo, replace=False)
    grid = np.column_stack([cells // 40, cells % 40]).astype(float)
    grid[n_orig:] += 0.5
    phys = grid * 93.7 + rng.normal(0, 0.01, size=grid.shape)
    is_pseudo = np.zeros(n_orig + n_pseudo, dtype=bool)
    is_pseudo[n_orig:] = True
    return dt.SlideRecord(
        slide_id=f"slide_{seed}",
        coords=SpotCoords(grid=grid, phys=phys, is_pseudo=is_pseudo),
        features=rng.standard_normal((n_orig + n_pseudo, d)),
        targets=rng.standard_normal((n_orig, n_genes)),
        gene_names=[f"g{i}" for i in range(n_genes)],
    )


# ---------------------------------------------------------------------------
# round-trip
# ---------------------------------------------------------------------------


def test_roundtrip_50_random_slides_bit_exact(tmp_path):
    for seed in range(50):
        slide = random_slide(seed)
        path = tmp_path / f"{seed}.fst"
        dt.write_slide(slide, path)
        back = dt.read_slide(path)
        assert back.slide_id == slide.slide_id
        assert back.gene_names == slide.gene_names
        npt.assert_array_equal(back.coords.grid, slide.coords.grid)
        npt.assert_array_equal(back.coords.phys, slide.coords.phys)
        npt.assert_array_equal(back.coords.is_pseudo, slide.coords.is_pseudo)
        npt.assert_array_equal(back.features, slide.features)
        npt.assert_array_equal(back.targets, slide.targets)


def test_write_is_deterministic(tmp_path):
    slide = random_slide(99)
    a, b = tmp_path / "a.fst", tmp_path / "b.fst"
    dt.write_slide(slide, a)
    dt.write_slide(slide, b)
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------


def test_truncated_file_raises_format_error(tmp_path):
    slide = random_slide(1)
    path = tmp_path / "s.fst"
    dt.write_slide(slide, path)
    blob = path.read_bytes()
    for cut in (2, 6, 11, len(blob) // 2, len(blob) - 3):
        path.write_bytes(blob[:cut])
        with pytest.raises(FormatError, match="offset"):
            dt.read_slide(path)


def test_bad_magic_raises(tmp_path):
    slide = random_slide(2)
    path = tmp_path / "s.fst"
    dt.write_slide(slide, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        dt.read_slide(path)


def test_bad_version_raises(tmp_path):
    slide = random_slide(3)
    path = tmp_path / "s.fst"
    dt.write_slide(slide, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        dt.read_slide(path)


def test_nan_injection_raises_validation_error(tmp_path):
    slide = random_slide(4, n_pseudo=0)
    path = tmp_path / "s.fst"
    dt.write_slide(slide, path)
    blob = bytearray(path.read_bytes())
    nan = struct.pack("<d", float("nan"))
    blob[-8:] = nan  # last target entry
    path.write_bytes(bytes(blob))
    with pytest.raises(ValidationError, match="non-finite"):
        dt.read_slide(path)


def test_trailing_garbage_raises(tmp_path):
    slide = random_slide(5)
    path = tmp_path / "s.fst"
    dt.write_slide(slide, path)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(FormatError, match="trailing"):
        dt.read_slide(path)


def test_writing_invalid_slide_refuses(tmp_path):
    slide = random_slide(6)
    slide.features[0, 0] = float("inf")
    with pytest.raises(ValidationError):
        dt.write_slide(slide, tmp_path / "bad.fst")


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def test_validate_clean_slide():
    assert dt.validate_slide(random_slide(7)) == []


def test_validate_reports_all_violations():
    slide = random_slide(8, n_orig=5, n_pseudo=2)
    slide.features[1, 2] = float("nan")
    slide.coords.grid[1] = slide.coords.grid[0]
    problems = dt.validate_slide(slide)
    assert any("0 and 1" in p for p in problems)
    assert any("(1, 2)" in p for p in problems)
    assert len(problems) >= 2


def test_validate_target_row_mismatch():
    slide = random_slide(9, n_orig=6)
    slide.targets = slide.targets[:-1]
    assert any("targets rows" in p for p in dt.validate_slide(slide))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    params = {
        "layer.w": rng.standard_normal((4, 6)),
        "norm.gain": rng.standard_normal(6),
    }
    config = {"d": 6, "n_heads": 2}
    path = tmp_path / "model.ckpt"
    dt.write_checkpoint(path, config, params)
    config2, params2 = dt.read_checkpoint(path)
    assert config2 == config
    assert set(params2) == set(params)
    for name in params:
        npt.assert_array_equal(params2[name], params[name])
        assert params2[name].shape == params[name].shape


def test_checkpoint_magic_differs_from_slide(tmp_path):
    slide = random_slide(11)
    path = tmp_path / "s.fst"
    dt.write_slide(slide, path)
    with pytest.raises(FormatError, match="magic"):
        dt.read_checkpoint(path)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_synth():
    cfg = dt.SynthConfig(n_train=2, n_test=1, grid_rows=8, grid_cols=8, seed=77)
    return cfg, dt.synth_dataset(cfg)


def test_synth_slides_validate(small_synth):
    cfg, (train, test, _) = small_synth
    assert len(train) == 2 and len(test) == 1
    for slide in train + test:
        assert dt.validate_slide(slide) == []
        assert slide.d == cfg.d
        assert slide.n_genes == cfg.n_genes


def test_synth_same_seed_identical_bytes(tmp_path, small_synth):
    cfg, (train, _, _) = small_synth
    train2, _, _ = dt.synth_dataset(dt.SynthConfig(n_train=2, n_test=1, grid_rows=8, grid_cols=8, seed=77))
    a, b = tmp_path / "a.fst", tmp_path / "b.fst"
    dt.write_slide(train[0], a)
    dt.write_slide(train2[0], b)
    assert a.read_bytes() == b.read_bytes()


def test_synth_pseudo_spots_satisfy_distance_threshold(small_synth):
    _, (train, test, _) = small_synth
    for slide in train + test:
        n_orig = slide.n_orig
        originals = SpotCoords(
            grid=slide.coords.grid[:n_orig],
            phys=slide.coords.phys[:n_orig],
            is_pseudo=np.zeros(n_orig, dtype=bool),
        )
        threshold = avg_nn_distance(originals)
        cand_set = {tuple(p) for p in gen_pseudo_candidates(originals)}
        pseudo = slide.coords.grid[n_orig:]
        assert len(pseudo) > 0
        for p in pseudo:
            assert tuple(p) in cand_set
            nearest = np.sqrt(((originals.grid - p) ** 2).sum(axis=1)).min()
            assert nearest <= threshold + 1e-12


def test_synth_targets_reproducible_from_formula():
    cfg = dt.SynthConfig(n_train=1, n_test=0, grid_rows=7, grid_cols=7, noise_std=0.0, seed=13)
    train, _, desc = dt.synth_dataset(cfg)
    slide = train[0]
    n_orig = slide.n_orig
    grid = slide.coords.grid[:n_orig]
    feats = slide.features[:n_orig]
    clusters = desc.clusters[slide.slide_id]
    # independent regeneration: per spot, average the neighbor_k nearest
    # same-cluster features (self included) and opposite-cluster features
    expected = np.zeros_like(slide.targets)
    for i in range(n_orig):
        d2 = ((grid - grid[i]) ** 2).sum(axis=1)
        same = np.flatnonzero(clusters == clusters[i])
        opp = np.flatnonzero(clusters != clusters[i])
        same = same[np.argsort(d2[same], kind="stable")][: cfg.neighbor_k]
        opp = opp[np.argsort(d2[opp], kind="stable")][: cfg.neighbor_k]
        expected[i] = feats[same].mean(axis=0) @ desc.w_same - cfg.inhibition_strength * (
            feats[opp].mean(axis=0) @ desc.w_opp
        )
    npt.assert_allclose(slide.targets, expected, atol=1e-10)


def test_synth_zero_inhibition_ignores_opposite_cluster():
    cfg = dt.SynthConfig(
        n_train=1, n_test=0, grid_rows=7, grid_cols=7, noise_std=0.0,
        inhibition_strength=0.0, seed=14,
    )
    train, _, desc = dt.synth_dataset(cfg)
    slide = train[0]
    grid = slide.coords.grid[: slide.n_orig]
    feats = slide.features[: slide.n_orig]
    clusters = desc.clusters[slide.slide_id]
    expected = np.zeros_like(slide.targets)
    for i in range(slide.n_orig):
        d2 = ((grid - grid[i]) ** 2).sum(axis=1)
        same = np.flatnonzero(clusters == clusters[i])
        same = same[np.argsort(d2[same], kind="stable")][: cfg.neighbor_k]
        expected[i] = feats[same].mean(axis=0) @ desc.w_same
    npt.assert_allclose(slide.targets, expected, atol=1e-10)


def test_synth_config_invariants():
    with pytest.raises(ConfigError, match="dropout"):
        dt.SynthConfig(dropout_rate=0.6).validate()
    with pytest.raises(ConfigError):
        dt.SynthConfig(grid_rows=2, grid_cols=2, neighbor_k=8).validate()


def test_strip_pseudo_keeps_originals():
    slide = random_slide(15, n_orig=7, n_pseudo=5)
    bare = dt.strip_pseudo(slide)
    assert bare.n_total == bare.n_orig == 7
    npt.assert_array_equal(bare.features, slide.features[:7])
    npt.assert_array_equal(bare.targets, slide.targets)
    assert dt.validate_slide(bare) == []


def test_toy_slide_layout():
    slide = dt.toy_slide(16, 3, seed=0)
    assert slide.n_orig == 8
    assert slide.n_total == 12
    assert dt.validate_slide(slide) == []


def test_idw_features_blend_nearest():
    orig_grid = np.array([(0.0, 0.0), (0.0, 1.0)])
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = dt.idw_features(np.array([(0.0, 0.5)]), orig_grid, feats)
    npt.assert_allclose(out, [[0.5, 0.5]], atol=1e-12)  # equidistant pair

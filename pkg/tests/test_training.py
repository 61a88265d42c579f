"""Optimizer mechanics, schedule, training loop behavior, and metrics."""

import numpy as np
import numpy.testing as npt
import pytest

from spotattn import data as dt
from spotattn import training as tr
from spotattn.errors import ConfigError, MetricsError, OptimizerError, ShapeError
from spotattn.model import ModelConfig, forward, init_params
from spotattn.numerics import Tensor
from spotattn.training import OptimizerState, TrainConfig, adam_step, cosine_lr, evaluate, train


def small_task(seed=21, n_train=2, n_test=1):
    cfg = dt.SynthConfig(
        n_train=n_train, n_test=n_test, grid_rows=8, grid_cols=8, seed=seed
    )
    return dt.synth_dataset(cfg)


def desk_model(**overrides):
    return ModelConfig.desk_profile(**overrides)


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------


def params_of(*arrays):
    return {f"p{i}": Tensor(np.array(a, dtype=float)) for i, a in enumerate(arrays)}


def test_adam_zero_gradients_zero_decay_leave_params():
    params = params_of([[1.0, -2.0]])
    state = OptimizerState.init(params)
    adam_step(params, {"p0": np.zeros((1, 2))}, state, lr=0.1,
              cfg=TrainConfig(weight_decay=0.0))
    npt.assert_array_equal(params["p0"].data, [[1.0, -2.0]])


def test_adam_first_step_magnitude():
    # from zero state with g=1: m_hat = 1, v_hat = 1, update = lr/(1+eps)
    params = params_of([[0.0]])
    state = OptimizerState.init(params)
    adam_step(params, {"p0": np.ones((1, 1))}, state, lr=0.1,
              cfg=TrainConfig(weight_decay=0.0))
    npt.assert_allclose(params["p0"].data, [[-0.1]], atol=1e-8)


def test_adam_identical_grads_identical_updates():
    params = params_of([[1.0, 1.0]], [[1.0, 1.0]])
    state = OptimizerState.init(params)
    g = np.array([[0.3, -0.7]])
    adam_step(params, {"p0": g.copy(), "p1": g.copy()}, state, lr=0.05,
              cfg=TrainConfig(weight_decay=0.0))
    npt.assert_array_equal(params["p0"].data, params["p1"].data)


def test_adam_lr_zero_leaves_params():
    params = params_of([[3.0, 4.0]])
    state = OptimizerState.init(params)
    adam_step(params, {"p0": np.ones((1, 2))}, state, lr=0.0, cfg=TrainConfig())
    npt.assert_array_equal(params["p0"].data, [[3.0, 4.0]])


def test_adam_nonfinite_gradient_names_param():
    params = params_of([[1.0]])
    state = OptimizerState.init(params)
    with pytest.raises(OptimizerError, match="p0"):
        adam_step(params, {"p0": np.array([[float("nan")]])}, state, lr=0.1, cfg=TrainConfig())


def test_adam_decay_skips_1d_params():
    params = {"w": Tensor(np.full((2, 2), 2.0)), "gain": Tensor(np.full(2, 2.0))}
    state = OptimizerState.init(params)
    zero = {"w": np.zeros((2, 2)), "gain": np.zeros(2)}
    adam_step(params, zero, state, lr=0.5, cfg=TrainConfig(weight_decay=0.1))
    npt.assert_allclose(params["w"].data, 2.0 * (1 - 0.5 * 0.1), atol=1e-12)
    npt.assert_array_equal(params["gain"].data, np.full(2, 2.0))


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 2e-3) == 2e-3
    assert cosine_lr(100, 100, 2e-3) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 2e-3) == pytest.approx(1e-3)


def test_cosine_non_increasing():
    values = [cosine_lr(s, 64, 1.0) for s in range(65)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_train_zero_epochs_returns_initial_params():
    train_slides, _, _ = small_task()
    mcfg = desk_model(seed=1)
    initial = init_params(mcfg).named_arrays()
    params, history = train(train_slides, TrainConfig(epochs=0), mcfg)
    assert history == []
    for name, arr in params.named_arrays().items():
        npt.assert_array_equal(arr, initial[name])


def test_train_loss_strictly_decreases_on_constant_targets():
    train_slides, _, _ = small_task(seed=22)
    for slide in train_slides:
        slide.targets = np.full_like(slide.targets, 0.7)
    mcfg = desk_model(seed=2)
    _, history = train(train_slides, TrainConfig.desk_profile(epochs=10), mcfg)
    losses = [h.mean_loss for h in history]
    assert all(a > b for a, b in zip(losses, losses[1:])), losses


def test_train_descent_over_three_seeds():
    train_slides, _, _ = small_task(seed=23)
    for seed in (1, 2, 3):
        _, history = train(
            train_slides, TrainConfig.desk_profile(epochs=15), desk_model(seed=seed)
        )
        assert history[-1].mean_loss < history[0].mean_loss


def test_train_same_seed_bit_identical_history():
    train_slides, _, _ = small_task(seed=24)
    mcfg = desk_model(seed=3)
    _, h1 = train(train_slides, TrainConfig.desk_profile(epochs=4), mcfg)
    _, h2 = train(train_slides, TrainConfig.desk_profile(epochs=4), mcfg)
    assert [e.mean_loss for e in h1] == [e.mean_loss for e in h2]
    assert [e.lr for e in h1] == [e.lr for e in h2]


def test_train_rejects_inconsistent_dims():
    train_slides, _, _ = small_task(seed=25)
    other = dt.toy_slide(16, 3, seed=1)
    with pytest.raises(ShapeError, match="dims"):
        train(train_slides + [other], TrainConfig(epochs=1), desk_model())


def test_train_needs_slides():
    with pytest.raises(ConfigError):
        train([], TrainConfig(epochs=1), desk_model())


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def perfect_slide(mcfg, seed):
    """A slide whose targets equal the untrained model's own predictions."""
    slide = dt.toy_slide(mcfg.d, mcfg.n_genes, seed=seed)
    params = init_params(mcfg)
    preds, _ = forward(slide, params, mcfg)
    slide.targets = preds.data.copy()
    return slide, params


def test_evaluate_perfect_predictions():
    mcfg = ModelConfig(d=16, n_heads=2, n_layers=1, knn_k=4, n_genes=3, mlp_hidden=8, seed=4)
    slide, params = perfect_slide(mcfg, seed=31)
    report = evaluate(params, [slide], mcfg)
    assert report.mse == pytest.approx(0.0, abs=1e-24)
    assert report.mae == pytest.approx(0.0, abs=1e-12)
    assert report.pcc == pytest.approx(1.0, abs=1e-12)
    assert report.excluded_genes == []


def test_evaluate_anticorrelated_predictions():
    mcfg = ModelConfig(d=16, n_heads=2, n_layers=1, knn_k=4, n_genes=3, mlp_hidden=8, seed=5)
    slide, params = perfect_slide(mcfg, seed=32)
    slide.targets = -slide.targets
    report = evaluate(params, [slide], mcfg)
    assert report.pcc == pytest.approx(-1.0, abs=1e-12)


def test_pearson_hand_case():
    # 4 spots, 2 genes, worked with the raw definition
    pred = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, 1.0], [4.0, 4.0]])
    target = np.array([[1.1, 0.2], [1.9, 0.8], [3.2, 1.1], [3.8, 3.9]])
    for g in range(2):
        a, b = pred[:, g], target[:, g]
        expected = (
            ((a - a.mean()) * (b - b.mean())).sum()
            / np.sqrt(((a - a.mean()) ** 2).sum() * ((b - b.mean()) ** 2).sum())
        )
        assert tr.pearson(a, b) == pytest.approx(expected, abs=1e-12)


def test_zero_variance_gene_excluded_and_reported():
    mcfg = ModelConfig(d=16, n_heads=2, n_layers=1, knn_k=4, n_genes=3, mlp_hidden=8, seed=6)
    slide, params = perfect_slide(mcfg, seed=33)
    slide.targets[:, 1] = 5.0  # constant target column
    report = evaluate(params, [slide], mcfg)
    assert report.excluded_genes == [1]
    assert np.isnan(report.per_gene_pcc[1])
    defined = [v for i, v in enumerate(report.per_gene_pcc) if i != 1]
    assert report.pcc == pytest.approx(float(np.mean(defined)), abs=1e-12)


def test_all_zero_variance_raises():
    mcfg = ModelConfig(d=16, n_heads=2, n_layers=1, knn_k=4, n_genes=2, mlp_hidden=8, seed=7)
    slide, params = perfect_slide(mcfg, seed=34)
    slide.targets[:] = 1.0
    with pytest.raises(MetricsError):
        evaluate(params, [slide], mcfg)


def test_evaluate_invariant_to_slide_order():
    mcfg = ModelConfig(d=16, n_heads=2, n_layers=1, knn_k=4, n_genes=3, mlp_hidden=8, seed=8)
    s1, params = perfect_slide(mcfg, seed=35)
    s2 = dt.toy_slide(mcfg.d, mcfg.n_genes, seed=36)
    r_ab = evaluate(params, [s1, s2], mcfg)
    r_ba = evaluate(params, [s2, s1], mcfg)
    assert r_ab.mse == pytest.approx(r_ba.mse, rel=1e-12)
    assert r_ab.mae == pytest.approx(r_ba.mae, rel=1e-12)
    assert r_ab.pcc == pytest.approx(r_ba.pcc, rel=1e-12)


def test_evaluate_invariant_to_spot_order():
    # full neighborhood: on integer grids a k-boundary distance tie resolves
    # by spot index, so a label permutation could otherwise swap neighbors
    mcfg = ModelConfig(d=16, n_heads=2, n_layers=1, knn_k=11, n_genes=3, mlp_hidden=8, seed=9)
    slide = dt.toy_slide(mcfg.d, mcfg.n_genes, seed=37)
    params = init_params(mcfg)
    base = evaluate(params, [slide], mcfg)

    rng = np.random.default_rng(0)
    perm_orig = rng.permutation(slide.n_orig)
    perm_pseudo = slide.n_orig + rng.permutation(slide.n_total - slide.n_orig)
    perm = np.concatenate([perm_orig, perm_pseudo])
    from spotattn.geometry import SpotCoords

    shuffled = dt.SlideRecord(
        slide_id=slide.slide_id,
        coords=SpotCoords(
            grid=slide.coords.grid[perm],
            phys=slide.coords.phys[perm],
            is_pseudo=slide.coords.is_pseudo[perm],
        ),
        features=slide.features[perm],
        targets=slide.targets[perm_orig],
        gene_names=slide.gene_names,
    )
    got = evaluate(params, [shuffled], mcfg)
    assert got.mse == pytest.approx(base.mse, rel=1e-9)
    assert got.mae == pytest.approx(base.mae, rel=1e-9)
    assert got.pcc == pytest.approx(base.pcc, rel=1e-9)


def test_pcc_invariant_to_positive_affine_rescaling():
    rng = np.random.default_rng(1)
    pred = rng.standard_normal((40, 3))
    target = rng.standard_normal((40, 3))
    base = [tr.pearson(pred[:, g], target[:, g]) for g in range(3)]
    scaled = pred * np.array([2.0, 0.5, 7.0]) + np.array([1.0, -3.0, 0.25])
    got = [tr.pearson(scaled[:, g], target[:, g]) for g in range(3)]
    npt.assert_allclose(got, base, atol=1e-12)

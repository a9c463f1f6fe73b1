import math

import pytest

from src.errors import TrainingError
from src.model_selection import GridPoint, HyperGrid, aggregate_runs, grid_search
from src.trainer import Method, RunResult, TrainConfig, TrainingLog


def quick(method: Method) -> TrainConfig:
    return TrainConfig(method=method, iterations=10, batch_size=16, checkpoint_every=5, hidden=(4,),
                       alpha=10.0, beta=1.0, k_irm=5, d_steps=1)


def fake_run(test_acc: float, failed: bool = False) -> RunResult:
    result = RunResult(config=TrainConfig(), seed=0, log=TrainingLog(), failed=failed)
    if not failed:
        result.test_acc = test_acc
        result.val_acc = test_acc
        result.train_acc = test_acc
        result.val_loss = 1.0 - test_acc
    return result


def test_grid_points_use_only_relevant_dimensions():
    grid = HyperGrid(alpha_grid=(1.0, 10.0), beta_grid=(1.0, 2.0, 3.0), k_irm_grid=(5, 10))
    assert grid.points(Method.ERM) == [GridPoint(0.0, 0.0, 0)]
    assert len(grid.points(Method.IRM)) == 4
    assert len(grid.points(Method.MMD)) == 3
    assert len(grid.points(Method.IRM_ACDM)) == 12
    assert {p.beta for p in grid.points(Method.IRMBAL)} == {0.0}


def test_default_grid():
    grid = HyperGrid()
    assert grid.alpha_grid[0] == 1.0 and grid.alpha_grid[-1] == 1e8
    assert grid.beta_grid[-1] == 1e5
    assert grid.k_irm_grid == (200, 400, 600)


def test_grid_rejects_empty_or_negative():
    with pytest.raises(ValueError):
        HyperGrid(alpha_grid=())
    with pytest.raises(ValueError):
        HyperGrid(beta_grid=(-1.0,))


def test_grid_point_apply():
    cfg = GridPoint(3.0, 4.0, 7).apply(quick(Method.IRM_MMD))
    assert (cfg.alpha, cfg.beta, cfg.k_irm) == (3.0, 4.0, 7)
    assert cfg.method == Method.IRM_MMD


def test_aggregate_skips_failed_runs():
    agg = aggregate_runs([fake_run(0.6), fake_run(0.8), fake_run(0.0, failed=True)])
    assert agg.n_runs == 3 and agg.n_failed == 1 and agg.n_ok == 2
    assert agg.mean_test_acc == pytest.approx(0.7)
    assert agg.std_test_acc == pytest.approx(0.1)
    assert agg.mean_val_loss == pytest.approx(0.3)


def test_aggregate_all_failed_is_nan():
    agg = aggregate_runs([fake_run(0.0, failed=True)])
    assert math.isnan(agg.mean_test_acc) and math.isnan(agg.std_test_acc)


def test_singleton_grid_passes_through(small_plus_dataset):
    grid = HyperGrid(alpha_grid=(10.0,), beta_grid=(1.0,), k_irm_grid=(5,))
    result = grid_search(small_plus_dataset, quick(Method.IRM), grid, seeds=[0, 1])
    assert result.best_point == GridPoint(10.0, 0.0, 5)
    assert result.best_config.alpha == 10.0
    assert len(result.best_runs) == 2
    assert [r.seed for r in result.best_runs] == [0, 1]


def test_best_point_has_lowest_mean_val_loss(small_plus_dataset):
    grid = HyperGrid(alpha_grid=(1.0, 1000.0), beta_grid=(1.0,), k_irm_grid=(0, 5))
    result = grid_search(small_plus_dataset, quick(Method.IRM), grid, seeds=[0], jobs=2)
    kept = [p for p in result.points if not p.excluded]
    lowest = min(p.aggregate.mean_val_loss for p in kept)
    assert result.best.aggregate.mean_val_loss == lowest
    first_lowest = next(p for p in kept if p.aggregate.mean_val_loss == lowest)
    assert result.best_point == first_lowest.point


def test_grid_search_is_deterministic_across_jobs(small_plus_dataset):
    grid = HyperGrid(alpha_grid=(1.0, 100.0), beta_grid=(1.0,), k_irm_grid=(5,))
    serial = grid_search(small_plus_dataset, quick(Method.IRM), grid, seeds=[0, 1], jobs=1)
    parallel = grid_search(small_plus_dataset, quick(Method.IRM), grid, seeds=[0, 1], jobs=4)
    assert serial.best_point == parallel.best_point
    assert [r.test_acc for r in serial.best_runs] == [r.test_acc for r in parallel.best_runs]


def test_grid_search_requires_seeds(small_plus_dataset):
    with pytest.raises(TrainingError):
        grid_search(small_plus_dataset, quick(Method.ERM), HyperGrid(), seeds=[])

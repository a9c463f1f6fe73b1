"""
超参数网格搜索与多次运行汇总
网格上的选择只看训练环境的验证损失；测试准确率只是选中模型的报告值
"""

import asyncio
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from .errors import TrainingError
from .sampler import Dataset
from .trainer import Method, RunResult, TrainConfig, train_run


logger = logging.getLogger(__name__)


class HyperGrid(BaseModel):
    """超参数网格"""

    model_config = ConfigDict(frozen=True)

    alpha_grid: Tuple[float, ...] = tuple(10.0 ** k for k in range(0, 9))
    beta_grid: Tuple[float, ...] = tuple(10.0 ** k for k in range(0, 6))
    k_irm_grid: Tuple[int, ...] = (200, 400, 600)

    @field_validator("alpha_grid", "beta_grid", "k_irm_grid")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("网格不能为空")
        if any(v < 0 for v in value):
            raise ValueError(f"网格取值必须非负: {value}")
        return value

    def points(self, method: Method) -> List["GridPoint"]:
        """方法实际用到的网格点（未使用的维度固定为0）"""
        alphas = self.alpha_grid if method.uses_irm else (0.0,)
        k_irms = self.k_irm_grid if method.uses_irm else (0,)
        betas = self.beta_grid if method.cdm_kind else (0.0,)
        return [GridPoint(a, b, k) for a in alphas for b in betas for k in k_irms]


@dataclass(frozen=True)
class GridPoint:
    alpha: float
    beta: float
    k_irm: int

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return cfg.model_copy(update={"alpha": self.alpha, "beta": self.beta, "k_irm": self.k_irm})


@dataclass
class RunAggregate:
    """多次运行的汇总（失败的运行不计入均值）"""
    n_runs: int
    n_failed: int
    mean_test_acc: float
    std_test_acc: float
    mean_val_acc: float
    mean_val_loss: float
    mean_train_acc: float

    @property
    def n_ok(self) -> int:
        return self.n_runs - self.n_failed


def aggregate_runs(results: Sequence[RunResult]) -> RunAggregate:
    """
    汇总多次运行

    Args:
        results: 运行结果

    Returns:
        均值/标准差与失败计数；全部失败时均值为 NaN
    """
    ok = [r for r in results if not r.failed]

    def _mean(values: List[float]) -> float:
        return float(np.mean(values)) if values else math.nan

    test = [r.test_acc for r in ok]
    return RunAggregate(
        n_runs=len(results),
        n_failed=len(results) - len(ok),
        mean_test_acc=_mean(test),
        std_test_acc=float(np.std(test)) if test else math.nan,
        mean_val_acc=_mean([r.val_acc for r in ok]),
        mean_val_loss=_mean([r.val_loss for r in ok]),
        mean_train_acc=_mean([r.train_acc for r in ok]),
    )


@dataclass
class GridPointResult:
    point: GridPoint
    runs: List[RunResult]
    aggregate: RunAggregate

    @property
    def excluded(self) -> bool:
        return self.aggregate.n_ok == 0


@dataclass
class GridSearchResult:
    """网格搜索结果"""
    method: Method
    best_point: Optional[GridPoint]
    best_config: Optional[TrainConfig]
    points: List[GridPointResult] = field(default_factory=list)

    @property
    def best(self) -> Optional[GridPointResult]:
        for result in self.points:
            if result.point == self.best_point:
                return result
        return None

    @property
    def best_runs(self) -> List[RunResult]:
        best = self.best
        return best.runs if best else []


async def run_seeds(ds: Dataset, cfg: TrainConfig, seeds: Iterable[int],
                    semaphore: Optional[asyncio.Semaphore] = None) -> List[RunResult]:
    """在线程中并发执行多个种子的训练，结果按种子顺序返回"""
    semaphore = semaphore or asyncio.Semaphore(1)

    async def _one(seed: int) -> RunResult:
        async with semaphore:
            return await asyncio.to_thread(train_run, ds, cfg, seed)

    return list(await asyncio.gather(*[_one(s) for s in seeds]))


async def grid_search_async(ds: Dataset, base_cfg: TrainConfig, grid: HyperGrid, seeds: Sequence[int],
                            jobs: int = 1, semaphore: Optional[asyncio.Semaphore] = None) -> GridSearchResult:
    """
    网格搜索

    每个网格点在所有种子上训练，按平均验证损失选择最优点（并列取网格顺序靠前者）；
    全部失败的网格点被排除。

    Args:
        ds: 数据集
        base_cfg: 基础配置，其 method 决定使用哪些网格维度
        grid: 超参数网格
        seeds: 种子列表
        jobs: 并发线程数
        semaphore: 与其他搜索共享的并发限制（提供时忽略 jobs）

    Returns:
        网格搜索结果
    """
    if not seeds:
        raise TrainingError("种子列表不能为空")
    method = base_cfg.method
    points = grid.points(method)
    semaphore = semaphore or asyncio.Semaphore(max(1, jobs))
    logger.info(f"{method.display_name}: 网格搜索{len(points)}个点 × {len(seeds)}个种子")

    all_runs = await asyncio.gather(*[
        run_seeds(ds, point.apply(base_cfg), seeds, semaphore) for point in points
    ])

    results = []
    best: Optional[GridPointResult] = None
    for point, runs in zip(points, all_runs):
        result = GridPointResult(point, runs, aggregate_runs(runs))
        results.append(result)
        if result.excluded:
            logger.warning(f"{method.display_name} 网格点{point}的所有运行均失败，已排除")
            continue
        if result.aggregate.n_failed:
            logger.warning(f"{method.display_name} 网格点{point}: {result.aggregate.n_failed}次运行失败")
        if best is None or result.aggregate.mean_val_loss < best.aggregate.mean_val_loss:
            best = result

    if best is None:
        logger.error(f"{method.display_name}: 所有网格点都失败")
        return GridSearchResult(method, None, None, results)
    return GridSearchResult(method, best.point, best.point.apply(base_cfg), results)


def grid_search(ds: Dataset, base_cfg: TrainConfig, grid: HyperGrid, seeds: Sequence[int],
                jobs: int = 1) -> GridSearchResult:
    """grid_search_async 的同步入口"""
    return asyncio.run(grid_search_async(ds, base_cfg, grid, seeds, jobs))

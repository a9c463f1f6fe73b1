"""
表示诊断
用线性探针从表示预测环境（非重叠表示的量化），在离散化的表示单元上估计
E[Y | F(X), E] 的跨环境差异，以及各环境表示分布的重叠度
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .errors import DiagnosticsError
from .models import FeatureClassifier
from .sampler import SPLIT_TRAIN, SPLIT_VAL, Dataset


logger = logging.getLogger(__name__)

DEFAULT_BINS = 16
PROBE_TEST_SIZE = 0.3


@dataclass
class ProbeReport:
    """探针报告"""
    domain_probe_accuracy: float
    majority_rate: float
    n_samples: int
    domain_probe_accuracy_with_label: Optional[float] = None
    per_class: Dict[int, float] = field(default_factory=dict)
    overlap_score: Optional[float] = None
    ci_gap: Optional[float] = None
    shared_cell_fraction: Optional[float] = None

    @property
    def flags_non_overlap(self) -> bool:
        """探针准确率明显高于多数类比例"""
        return self.domain_probe_accuracy > self.majority_rate + 0.5 * (1.0 - self.majority_rate)

    def to_row(self) -> Dict[str, Optional[float]]:
        return {
            "domain_probe_acc": self.domain_probe_accuracy,
            "ci_gap": self.ci_gap,
            "shared_cell_fraction": self.shared_cell_fraction,
            "overlap_score": self.overlap_score,
        }


@dataclass
class CellOccupancy:
    """单个表示单元的占用情况"""
    cell: int
    counts: Dict[int, int]
    label_means: Dict[int, float]
    gap: Optional[float]

    @property
    def shared(self) -> bool:
        return sum(1 for n in self.counts.values() if n > 0) >= 2

    @property
    def size(self) -> int:
        return sum(self.counts.values())


@dataclass
class CIGapReport:
    """条件独立差异报告；没有共享单元时 gap 为 None"""
    gap: Optional[float]
    cells: List[CellOccupancy]

    @property
    def shared_cell_fraction(self) -> float:
        if not self.cells:
            return 0.0
        return sum(1 for c in self.cells if c.shared) / len(self.cells)

    @property
    def total_count(self) -> int:
        return sum(c.size for c in self.cells)


def _as_2d(reps) -> np.ndarray:
    if torch.is_tensor(reps):
        reps = reps.detach().cpu().numpy()
    arr = np.asarray(reps, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1)


def _check_envs(envs: np.ndarray, min_per_env: int = 2) -> np.ndarray:
    env_ids, counts = np.unique(envs, return_counts=True)
    if env_ids.size < 2:
        raise DiagnosticsError(f"至少需要2个环境，实际为{env_ids.size}")
    if counts.min() < min_per_env:
        raise DiagnosticsError(f"每个环境至少需要{min_per_env}个样本，实际最少为{counts.min()}")
    return env_ids


def _probe_accuracy(x: np.ndarray, envs: np.ndarray, seed: int) -> float:
    x_train, x_test, e_train, e_test = train_test_split(
        x, envs, test_size=PROBE_TEST_SIZE, random_state=seed, stratify=envs,
    )
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=1000))
    probe.fit(x_train, e_train)
    return float(probe.score(x_test, e_test))


def domain_probe(reps, envs, labels=None, seed: int = 0) -> ProbeReport:
    """
    线性探针 E ~ F(X)

    在留出集上评估准确率；准确率远高于最大环境先验说明各环境的表示几乎不重叠。

    Args:
        reps: n×d 表示
        envs: 环境编号
        labels: 可选的类别标签，提供时额外报告 E ~ (F(X), Y) 与按类别的准确率
        seed: 划分种子

    Returns:
        探针报告
    """
    x = _as_2d(reps)
    envs = np.asarray(envs).reshape(-1)
    env_ids = _check_envs(envs)
    majority = float(max(np.mean(envs == e) for e in env_ids))

    report = ProbeReport(
        domain_probe_accuracy=_probe_accuracy(x, envs, seed),
        majority_rate=majority,
        n_samples=int(x.shape[0]),
    )
    if labels is not None:
        labels = np.asarray(labels).reshape(-1)
        report.domain_probe_accuracy_with_label = _probe_accuracy(
            np.hstack([x, labels[:, None].astype(np.float64)]), envs, seed,
        )
        for y in np.unique(labels):
            in_class = labels == y
            try:
                _check_envs(envs[in_class], min_per_env=4)
            except DiagnosticsError:
                logger.debug(f"类别Y={y}样本不足，跳过按类别探针")
                continue
            report.per_class[int(y)] = _probe_accuracy(x[in_class], envs[in_class], seed)
    logger.debug(f"环境探针准确率={report.domain_probe_accuracy:.3f}，多数类比例={majority:.3f}")
    return report


def bin_representations(reps, k: int = DEFAULT_BINS, seed: int = 0) -> np.ndarray:
    """
    表示离散化：不同取值不超过 k 个时按取值分箱，否则用 k-means 聚类

    Returns:
        每个样本的单元编号
    """
    x = _as_2d(reps)
    unique, inverse = np.unique(x, axis=0, return_inverse=True)
    if unique.shape[0] <= k:
        return inverse.reshape(-1).astype(np.int64)
    return KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(x).astype(np.int64)


def conditional_independence_gap(reps, labels, envs, k: int = DEFAULT_BINS, seed: int = 0) -> CIGapReport:
    """
    Ê[Y | F(X), E=e] 与 Ê[Y | F(X), E=e'] 的差异

    每个共享单元取各环境条件均值的最大两两差，再按单元样本数加权平均；
    只被单一环境占据的单元不参与（IRM 约束在这些单元上不起作用）。

    Args:
        reps: 表示
        labels: 观测标签
        envs: 环境编号
        k: 单元数上限

    Returns:
        差异报告，全部单元都只属于单一环境时 gap 为 None
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    envs = np.asarray(envs).reshape(-1)
    _check_envs(envs, min_per_env=1)
    cells_of = bin_representations(reps, k, seed)
    env_ids = [int(e) for e in np.unique(envs)]

    cells = []
    weighted, weight = 0.0, 0
    for cell in np.unique(cells_of):
        in_cell = cells_of == cell
        counts = {e: int(np.sum(in_cell & (envs == e))) for e in env_ids}
        means = {e: float(labels[in_cell & (envs == e)].mean()) for e in env_ids if counts[e] > 0}
        gap = None
        if len(means) >= 2:
            gap = max(abs(means[a] - means[b]) for a, b in combinations(means, 2))
            weighted += gap * int(in_cell.sum())
            weight += int(in_cell.sum())
        cells.append(CellOccupancy(int(cell), counts, means, gap))

    report = CIGapReport(gap=weighted / weight if weight else None, cells=cells)
    if report.gap is None:
        logger.info("所有表示单元都只属于单一环境，条件独立差异无定义")
    return report


def overlap_score(reps, envs, k: int = DEFAULT_BINS, seed: int = 0) -> float:
    """
    1 − 总变差（各环境在同一组单元上的直方图，多环境时取两两平均）

    Returns:
        [0, 1] 内的重叠度
    """
    envs = np.asarray(envs).reshape(-1)
    env_ids = _check_envs(envs, min_per_env=1)
    cells_of = bin_representations(reps, k, seed)
    n_cells = int(cells_of.max()) + 1
    hists = {e: np.bincount(cells_of[envs == e], minlength=n_cells) / np.sum(envs == e) for e in env_ids}
    scores = [1.0 - 0.5 * np.abs(hists[a] - hists[b]).sum() for a, b in combinations(env_ids, 2)]
    return float(np.clip(np.mean(scores), 0.0, 1.0))


def _train_env_rows(ds: Dataset) -> np.ndarray:
    return np.isin(ds.e, ds.train_env_ids) & np.isin(ds.split, (SPLIT_TRAIN, SPLIT_VAL)) \
        & (ds.origin == np.arange(len(ds)))


def layer_activations(model: FeatureClassifier, features) -> List[np.ndarray]:
    """每个隐藏层的激活"""
    x = features if torch.is_tensor(features) else torch.as_tensor(features, dtype=torch.float64)
    with torch.no_grad():
        return [a.numpy() for a in model.hidden_activations(x)]


def layerwise_domain_probe(model: FeatureClassifier, ds: Dataset, seed: int = 0) -> List[float]:
    """对每个隐藏层的激活做环境探针，返回逐层准确率"""
    rows = _train_env_rows(ds)
    activations = layer_activations(model, ds.features[rows])
    return [domain_probe(a, ds.e[rows], seed=seed).domain_probe_accuracy for a in activations]


def diagnose(model: FeatureClassifier, ds: Dataset, k: int = DEFAULT_BINS, seed: int = 0) -> ProbeReport:
    """
    对选中模型的表示做完整诊断（训练环境的训练与验证样本，不含平衡复制行）

    Returns:
        附带 overlap_score、ci_gap 与 shared_cell_fraction 的探针报告
    """
    rows = _train_env_rows(ds)
    with torch.no_grad():
        reps = model(torch.as_tensor(ds.features[rows], dtype=torch.float64)).representation.numpy()
    envs, labels = ds.e[rows], ds.y[rows]

    report = domain_probe(reps, envs, labels, seed)
    report.overlap_score = overlap_score(reps, envs, k, seed)
    gap = conditional_independence_gap(reps, labels, envs, k, seed)
    report.ci_gap = gap.gap
    report.shared_cell_fraction = gap.shared_cell_fraction
    return report

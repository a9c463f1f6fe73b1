"""
条件分布匹配（CDM）
无偏MMD估计、按(类别, 环境)分组的MMD惩罚、条件判别器与对抗式(ACDM)目标
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import CdmError
from .models import init_uniform_
from .sampler import SPLIT_TRAIN, Dataset


logger = logging.getLogger(__name__)

DISCRIMINATOR_EPSILON = 1e-7
MIN_GROUP_SIZE = 2
MKMMD_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)

GroupKey = Tuple[int, int]  # (y, e)
Discriminator = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class KernelSpec(BaseModel):
    """
    RBF（多）核

    relative=True 时 bandwidths 是中位数启发式的倍数，需经 resolve_kernel 换算。
    """

    model_config = ConfigDict(frozen=True)

    family: Literal["rbf"] = "rbf"
    bandwidths: Tuple[float, ...] = (1.0,)
    weights: Optional[Tuple[float, ...]] = None
    relative: bool = False

    @model_validator(mode="after")
    def _check(self) -> "KernelSpec":
        if not self.bandwidths:
            raise ValueError("bandwidths不能为空")
        if any(b <= 0 for b in self.bandwidths):
            raise ValueError(f"bandwidths必须为正: {self.bandwidths}")
        if self.weights is not None:
            if len(self.weights) != len(self.bandwidths):
                raise ValueError("weights与bandwidths长度不一致")
            if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError(f"weights必须是凸组合: {self.weights}")
        return self

    @property
    def resolved_weights(self) -> Tuple[float, ...]:
        if self.weights is not None:
            return self.weights
        return tuple(1.0 / len(self.bandwidths) for _ in self.bandwidths)

    @classmethod
    def mkmmd(cls, multipliers: Sequence[float] = MKMMD_MULTIPLIERS) -> "KernelSpec":
        return cls(bandwidths=tuple(multipliers), relative=True)

    def single(self, index: int) -> "KernelSpec":
        return KernelSpec(bandwidths=(self.bandwidths[index],), relative=self.relative)


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # 直接相减后平方，避免 cdist 在零距离处的 NaN 梯度
    return (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)


def _gram_sq_dists(x: torch.Tensor) -> torch.Tensor:
    # 大批量用展开式 |a|²+|b|²-2a·b，不生成 N×N×d 的中间张量
    sq = x.pow(2).sum(-1)
    return (sq[:, None] + sq[None, :] - 2.0 * x @ x.T).clamp_min(0.0)


def _median_from_sq_dists(d2: torch.Tensor) -> float:
    n = d2.shape[0]
    if n < 2:
        return 1.0
    with torch.no_grad():
        iu = torch.triu_indices(n, n, offset=1)
        median = float(d2[iu[0], iu[1]].sqrt().median())
    return median if median > 0 else 1.0


def median_pairwise_distance(pooled: torch.Tensor) -> float:
    """合并样本的两两欧氏距离中位数（不含对角线）"""
    if pooled.shape[0] < 2:
        return 1.0
    with torch.no_grad():
        return _median_from_sq_dists(_sq_dists(pooled, pooled))


def resolve_kernel(k: KernelSpec, pooled: torch.Tensor, median: Optional[float] = None) -> KernelSpec:
    """按当前批次的中位数距离换算相对带宽（median 已算好时直接使用）"""
    if not k.relative:
        return k
    base = median_pairwise_distance(pooled) if median is None else median
    return KernelSpec(
        bandwidths=tuple(m * base for m in k.bandwidths),
        weights=k.resolved_weights,
        relative=False,
    )


def kernel_matrix(a: torch.Tensor, b: torch.Tensor, k: KernelSpec) -> torch.Tensor:
    if k.relative:
        raise CdmError("相对带宽的核需要先经过 resolve_kernel")
    return _kernel_from_sq_dists(_sq_dists(a, b), k)


def _kernel_from_sq_dists(d2: torch.Tensor, k: KernelSpec) -> torch.Tensor:
    # 所有带宽一次算完：(B,1,1) 与 (1,N,M) 广播后按权重求和
    sigmas = torch.as_tensor(k.bandwidths, dtype=d2.dtype)
    weights = torch.as_tensor(k.resolved_weights, dtype=d2.dtype)
    scaled = d2.unsqueeze(0) / (2.0 * sigmas.pow(2)).reshape(-1, 1, 1)
    return (weights.reshape(-1, 1, 1) * torch.exp(-scaled)).sum(0)


def _as_matrix(samples) -> torch.Tensor:
    t = torch.as_tensor(samples, dtype=torch.float64) if not torch.is_tensor(samples) else samples
    return t.reshape(t.shape[0], -1) if t.dim() != 2 else t


def mmd_unbiased(samples_p, samples_q, k: KernelSpec, paired: bool = False) -> torch.Tensor:
    """
    MMD的无偏估计

    (1/N(N-1))Σ_{i≠j}k(p_i,p_j) + (1/M(M-1))Σ_{i≠j}k(q_i,q_j) - (2/MN)ΣΣk(p_i,q_j)

    Args:
        samples_p: N×d 样本
        samples_q: M×d 样本
        k: 核（相对带宽会按合并样本换算）
        paired: N=M 时改用配对U统计量（交叉项也去掉 i=j），相同样本列表上恰为0

    Returns:
        标量张量
    """
    p = _as_matrix(samples_p)
    q = _as_matrix(samples_q)
    n, m = p.shape[0], q.shape[0]
    if n < 2 or m < 2:
        raise CdmError(f"MMD每侧至少需要2个样本，实际为{n}和{m}")
    if p.shape[1] != q.shape[1]:
        raise CdmError(f"样本维度不一致: {p.shape[1]} vs {q.shape[1]}")

    k = resolve_kernel(k, torch.cat([p, q]))
    kpp = kernel_matrix(p, p, k)
    kqq = kernel_matrix(q, q, k)
    kpq = kernel_matrix(p, q, k)

    within_p = (kpp.sum() - kpp.diagonal().sum()) / (n * (n - 1))
    within_q = (kqq.sum() - kqq.diagonal().sum()) / (m * (m - 1))
    if paired:
        if n != m:
            raise CdmError("配对估计要求两侧样本数相同")
        cross = 2.0 * (kpq.sum() - kpq.diagonal().sum()) / (n * (n - 1))
    else:
        cross = 2.0 * kpq.sum() / (n * m)
    return within_p + within_q - cross


@dataclass
class GroupedRepresentations:
    """按 (y, e) 分组的表示"""
    groups: Dict[GroupKey, torch.Tensor]

    def __post_init__(self):
        dims = {g.shape[1] for g in self.groups.values() if g.shape[0] > 0}
        if len(dims) > 1:
            raise CdmError(f"各组表示维度不一致: {sorted(dims)}")

    @property
    def labels(self) -> List[int]:
        return sorted({y for y, _ in self.groups})

    @property
    def env_ids(self) -> List[int]:
        return sorted({e for _, e in self.groups})

    def get(self, y: int, e: int) -> Optional[torch.Tensor]:
        return self.groups.get((y, e))

    def pooled(self) -> torch.Tensor:
        return torch.cat([g for g in self.groups.values() if g.shape[0] > 0])


def group_representations(reps: torch.Tensor, labels, envs) -> GroupedRepresentations:
    """把表示按 (标签, 环境) 分组"""
    labels_t = torch.as_tensor(labels).reshape(-1).long()
    envs_t = torch.as_tensor(envs).reshape(-1).long()
    groups: Dict[GroupKey, torch.Tensor] = {}
    for y in torch.unique(labels_t).tolist():
        for e in torch.unique(envs_t).tolist():
            selected = (labels_t == y) & (envs_t == e)
            if bool(selected.any()):
                groups[(int(y), int(e))] = reps[selected]
    return GroupedRepresentations(groups)


def cdm_mmd_penalty(reps: GroupedRepresentations, k: KernelSpec, normalized: bool = False,
                    min_group_size: int = MIN_GROUP_SIZE,
                    max_group_size: Optional[int] = None) -> torch.Tensor:
    """
    分组MMD惩罚 Σ_y Σ_e Σ_{e'≠e} MMD(group(y,e), group(y,e'))

    默认按有序对求和（每个无序对计两次）；normalized=True 时每个无序对只计一次。
    样本数不足的组跳过并记录日志。所有组拼成一个矩阵，核矩阵只算一次，
    各项由分块求和得到，与逐对调用 mmd_unbiased 只差浮点舍入。

    Args:
        max_group_size: 每组最多取前若干行（批次已打乱），None 表示不截断

    Returns:
        标量张量
    """
    usable = {key: g for key, g in reps.groups.items() if g.shape[0] >= min_group_size}
    skipped = sorted(set(reps.groups) - set(usable))
    if skipped:
        logger.warning(f"以下(y, e)组样本数不足{min_group_size}，已跳过: {skipped}")
    if not usable:
        raise CdmError("所有(y, e)组样本数都不足，无法计算MMD惩罚")
    if max_group_size is not None:
        if max_group_size < min_group_size:
            raise CdmError(f"max_group_size({max_group_size})不能小于min_group_size({min_group_size})")
        usable = {key: g[:max_group_size] for key, g in usable.items()}

    keys = sorted(usable)
    stacked = torch.cat([usable[key] for key in keys])
    d2 = _gram_sq_dists(stacked)
    kernel = resolve_kernel(k, stacked, _median_from_sq_dists(d2) if k.relative else None)
    gram = _kernel_from_sq_dists(d2, kernel)

    sizes = [usable[key].shape[0] for key in keys]
    bounds = np.concatenate([[0], np.cumsum(sizes)]).tolist()
    index = {key: i for i, key in enumerate(keys)}
    # 分块和：block[i][j] = Σ K(group_i, group_j)
    block = [[gram[bounds[i]:bounds[i + 1], bounds[j]:bounds[j + 1]].sum() for j in range(len(keys))]
             for i in range(len(keys))]
    diag = gram.diagonal()
    within = [(block[i][i] - diag[bounds[i]:bounds[i + 1]].sum()) / (sizes[i] * (sizes[i] - 1))
              for i in range(len(keys))]

    total = torch.zeros((), dtype=stacked.dtype)
    for y in reps.labels:
        envs = [e for e in reps.env_ids if (y, e) in usable]
        for a, e in enumerate(envs):
            for b, e_other in enumerate(envs):
                if a == b or (normalized and b < a):
                    continue
                i, j = index[(y, e)], index[(y, e_other)]
                cross = 2.0 * block[i][j] / (sizes[i] * sizes[j])
                total = total + within[i] + within[j] - cross
    return total


@dataclass(frozen=True)
class GammaWeights:
    """γ_e^y = P(E=e, Y=y)"""
    table: Dict[GroupKey, float]  # (e, y) -> 概率

    def get(self, e: int, y: int) -> float:
        return self.table.get((e, y), 0.0)

    def total(self) -> float:
        return float(sum(self.table.values()))


def gamma_from_batch(labels, envs) -> GammaWeights:
    """由一批样本的标签和环境估计联合频率"""
    labels_a = np.asarray(labels).reshape(-1).astype(np.int64)
    envs_a = np.asarray(envs).reshape(-1).astype(np.int64)
    n = labels_a.shape[0]
    if n == 0:
        raise CdmError("空批次无法估计γ")
    table = {}
    for e in np.unique(envs_a):
        for y in (0, 1):
            table[(int(e), y)] = float(np.sum((envs_a == e) & (labels_a == y)) / n)
    return GammaWeights(table)


def gamma_weights(ds: Dataset) -> GammaWeights:
    """
    训练划分上的经验联合频率 P(E=e, Y=y)

    Args:
        ds: 数据集（只使用训练环境的训练划分）

    Returns:
        γ 权重表
    """
    selected = (ds.split == SPLIT_TRAIN) & np.isin(ds.e, ds.train_env_ids)
    if not selected.any():
        raise CdmError("训练划分为空")
    return gamma_from_batch(ds.y[selected], ds.e[selected])


class ConditionalDiscriminator(nn.Module):
    """
    条件判别器 D(F(x), y) -> 训练环境上的概率分布

    类别标签以独热形式拼接到表示后，两层隐藏层，输出经过 softmax。
    """

    def __init__(self, rep_dim: int, n_envs: int, hidden_size: int = 16, n_classes: int = 2,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if n_envs < 2:
            raise CdmError(f"判别器至少需要2个训练环境，实际为{n_envs}")
        self.n_classes = n_classes
        self.n_envs = n_envs

        self.fc1 = nn.Linear(rep_dim + n_classes, hidden_size)
        self.fc2 = nn.Linear(hidden_size, hidden_size)
        self.fc3 = nn.Linear(hidden_size, n_envs)
        self.relu = nn.ReLU()

        if generator is not None:
            for layer in (self.fc1, self.fc2, self.fc3):
                init_uniform_(layer, generator)
        self.double()

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        y_onehot = nn.functional.one_hot(y.reshape(-1).long(), self.n_classes).to(z.dtype)
        x = torch.cat([z, y_onehot], dim=1)
        x = self.relu(self.fc1(x))
        x = self.relu(self.fc2(x))
        return torch.softmax(self.fc3(x), dim=1)


def _weighted_log_likelihood(reps: GroupedRepresentations, D: Discriminator,
                             g: GammaWeights, env_ids: Sequence[int]) -> torch.Tensor:
    env_index = {e: i for i, e in enumerate(env_ids)}
    total = None
    for (y, e), group in sorted(reps.groups.items()):
        if group.shape[0] == 0 or e not in env_index:
            continue
        labels = torch.full((group.shape[0],), y, dtype=torch.long)
        probs = D(group, labels)[:, env_index[e]]
        n_low = int((probs < DISCRIMINATOR_EPSILON).sum())
        if n_low:
            logger.debug(f"判别器在(y={y}, e={e})组有{n_low}个输出过小，已截断到{DISCRIMINATOR_EPSILON}")
        term = g.get(e, y) * torch.log(torch.clamp(probs, min=DISCRIMINATOR_EPSILON)).mean()
        total = term if total is None else total + term
    if total is None:
        raise CdmError("没有可用的(y, e)组")
    return total


def acdm_discriminator_loss(reps: GroupedRepresentations, D: Discriminator, g: GammaWeights,
                            env_ids: Optional[Sequence[int]] = None) -> torch.Tensor:
    """
    Σ_y Σ_e γ_e^y · mean log D^e(F(x), y)

    判别器对该量做上升，表示参数对其做下降。

    Args:
        reps: 分组表示
        D: 判别器，(表示, 标签) -> 环境概率
        g: γ 权重
        env_ids: 判别器输出列对应的训练环境（默认取分组中出现的环境）

    Returns:
        非正标量张量
    """
    return _weighted_log_likelihood(reps, D, g, env_ids or reps.env_ids)


def acdm_generator_penalty(reps: GroupedRepresentations, D: Discriminator, g: GammaWeights,
                           env_ids: Optional[Sequence[int]] = None) -> torch.Tensor:
    """生成器一侧的惩罚：与判别器目标相同，以正号进入表示参数的最小化"""
    return _weighted_log_likelihood(reps, D, g, env_ids or reps.env_ids)

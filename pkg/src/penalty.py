"""
风险函数与IRM惩罚项
包含虚拟分类器 w=1.0 的梯度闭式解（BCE/MSE）以及基于自动微分的对照实现
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Literal, Optional, Sequence

import torch
import torch.nn.functional as nnf

from .errors import PenaltyError


logger = logging.getLogger(__name__)

BCE_EPSILON = 1e-7

DummyTarget = Literal["output", "logit"]


class LossKind(Enum):
    """损失类型"""
    BCE = "bce"
    MSE = "mse"


@dataclass
class EnvBatch:
    """
    单个环境的一批输出

    outputs 为模型输出 F(x)：BCE 下是 sigmoid 之后的概率，MSE 下是原始标量；
    logits 仅在虚拟乘子作用于 logit 时需要。
    """
    outputs: torch.Tensor
    labels: torch.Tensor
    env_id: int
    logits: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.outputs = self.outputs.reshape(-1)
        self.labels = self.labels.reshape(-1).to(self.outputs.dtype)
        if self.logits is not None:
            self.logits = self.logits.reshape(-1)
        if self.outputs.shape[0] != self.labels.shape[0]:
            raise PenaltyError(
                f"E={self.env_id}: 输出长度{self.outputs.shape[0]}与标签长度{self.labels.shape[0]}不一致"
            )
        if self.outputs.shape[0] == 0:
            raise PenaltyError(f"E={self.env_id}: 空批次")

    def __len__(self) -> int:
        return int(self.outputs.shape[0])


def _scaled(batch: EnvBatch, w, dummy_on: DummyTarget) -> torch.Tensor:
    if dummy_on == "logit":
        if batch.logits is None:
            raise PenaltyError(f"E={batch.env_id}: 虚拟乘子作用于logit时需要提供logits")
        return w * batch.logits
    return w * batch.outputs


def _clamp_probs(p: torch.Tensor, env_id: int) -> torch.Tensor:
    clamped = torch.clamp(p, BCE_EPSILON, 1.0 - BCE_EPSILON)
    n_hit = int(((p < BCE_EPSILON) | (p > 1.0 - BCE_EPSILON)).sum())
    if n_hit:
        logger.debug(f"E={env_id}: {n_hit}个BCE输出落在边界，已截断到[{BCE_EPSILON}, 1-{BCE_EPSILON}]")
    return clamped


def instance_losses(batch: EnvBatch, kind: LossKind, w=1.0,
                    dummy_on: DummyTarget = "output") -> torch.Tensor:
    """每个样本的损失 R(wF(x), y)"""
    scaled = _scaled(batch, w, dummy_on)
    y = batch.labels
    if kind == LossKind.MSE:
        return (scaled - y) ** 2
    if dummy_on == "logit":
        return nnf.binary_cross_entropy_with_logits(scaled, y, reduction="none")
    p = _clamp_probs(scaled, batch.env_id)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))


def risk(batch: EnvBatch, kind: LossKind, dummy_on: DummyTarget = "output") -> torch.Tensor:
    """
    环境平均风险

    Args:
        batch: 环境批次
        kind: 损失类型

    Returns:
        标量张量
    """
    return instance_losses(batch, kind, 1.0, dummy_on).mean()


def dummy_gradient(batch: EnvBatch, kind: LossKind, per_instance: bool = False,
                   dummy_on: DummyTarget = "output") -> torch.Tensor:
    """
    风险对虚拟乘子 w 在 w=1 处的导数（闭式）

    BCE: -[y F/(wF) + (1-y)(-F)/(1-wF)]；MSE: 2(wF-y)F。
    BCE 截断区间外的样本导数为 0，与截断函数的次梯度一致。

    Args:
        batch: 环境批次
        kind: 损失类型
        per_instance: True 时返回每个样本的导数，否则返回平均风险的导数

    Returns:
        标量张量或长度为批大小的张量
    """
    y = batch.labels
    if dummy_on == "logit":
        z = _scaled(batch, 1.0, dummy_on)
        if kind == LossKind.MSE:
            grads = 2.0 * (z - y) * z
        else:
            grads = (torch.sigmoid(z) - y) * z
    else:
        f = batch.outputs
        if kind == LossKind.MSE:
            grads = 2.0 * (f - y) * f
        else:
            inside = (f >= BCE_EPSILON) & (f <= 1.0 - BCE_EPSILON)
            p = _clamp_probs(f, batch.env_id)
            grads = -(y * f / p - (1.0 - y) * f / (1.0 - p))
            grads = torch.where(inside, grads, torch.zeros_like(grads))
    return grads if per_instance else grads.mean()


def autograd_dummy_gradient(batch: EnvBatch, kind: LossKind,
                            dummy_on: DummyTarget = "output") -> torch.Tensor:
    """用自动微分对虚拟乘子求导，供闭式解交叉验证"""
    scale = torch.tensor(1.0, dtype=batch.outputs.dtype, requires_grad=True)
    loss = instance_losses(batch, kind, scale, dummy_on).mean()
    return torch.autograd.grad(loss, [scale], create_graph=True)[0]


def irm_penalty(batch: EnvBatch, kind: LossKind, per_instance: bool = False,
                dummy_on: DummyTarget = "output") -> torch.Tensor:
    """
    IRM惩罚项 ||∇_{w|w=1} R^e(wF, y)||²

    默认对环境平均风险求梯度（每个环境一个惩罚值）；per_instance=True 时
    对每个样本的梯度平方取平均。

    Returns:
        非负标量张量，可对模型参数继续求导
    """
    grads = dummy_gradient(batch, kind, per_instance=per_instance, dummy_on=dummy_on)
    if per_instance:
        return (grads ** 2).mean()
    return grads ** 2


@dataclass
class IrmTerms:
    """各环境的风险与惩罚"""
    env_ids: List[int]
    risks: List[torch.Tensor]
    penalties: List[torch.Tensor]

    def total(self, alpha: float) -> torch.Tensor:
        return combine_irm_terms(self.risks, self.penalties, alpha)


def combine_irm_terms(risks: Sequence[torch.Tensor], penalties: Sequence[torch.Tensor],
                      alpha: float) -> torch.Tensor:
    """Σ_e [risk_e + alpha · penalty_e]"""
    if not risks:
        raise PenaltyError("至少需要一个环境")
    total = torch.zeros((), dtype=torch.as_tensor(risks[0]).dtype)
    for r, p in zip(risks, penalties):
        total = total + torch.as_tensor(r)
        if alpha != 0.0:
            total = total + alpha * torch.as_tensor(p)
    return total


def irm_terms(batches: Sequence[EnvBatch], kind: LossKind, per_instance: bool = False,
              dummy_on: DummyTarget = "output") -> IrmTerms:
    """计算每个环境的风险与惩罚"""
    if not batches:
        raise PenaltyError("至少需要一个环境")
    return IrmTerms(
        env_ids=[b.env_id for b in batches],
        risks=[risk(b, kind, dummy_on) for b in batches],
        penalties=[irm_penalty(b, kind, per_instance, dummy_on) for b in batches],
    )


def irm_regularized_loss(batches: Sequence[EnvBatch], kind: LossKind, alpha: float,
                         per_instance: bool = False, dummy_on: DummyTarget = "output") -> torch.Tensor:
    """
    IRM正则化总损失

    Args:
        batches: 各训练环境的批次
        kind: 损失类型
        alpha: 惩罚权重，0 时等价于各环境风险之和

    Returns:
        标量张量
    """
    if alpha < 0:
        raise PenaltyError(f"alpha必须非负，实际为{alpha}")
    return irm_terms(batches, kind, per_instance, dummy_on).total(alpha)

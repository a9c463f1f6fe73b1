"""
训练流程
ERM / IRM / IRMBAL / MMD / ACDM / IRM-MMD / IRM-ACDM 七种方法、IRM惩罚延迟启用、
ACDM交替上升/下降，以及按最低验证损失选择检查点
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from .cdm import (
    MKMMD_MULTIPLIERS,
    ConditionalDiscriminator,
    GammaWeights,
    KernelSpec,
    acdm_discriminator_loss,
    acdm_generator_penalty,
    cdm_mmd_penalty,
    gamma_from_batch,
    gamma_weights,
    group_representations,
)
from .errors import LabError, NonFiniteGradientError, TrainingError
from .models import DEFAULT_HIDDEN, FeatureClassifier, backward
from .penalty import DummyTarget, EnvBatch, LossKind, irm_terms, risk
from .sampler import SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL, Dataset, balance_labels, named_stream


logger = logging.getLogger(__name__)


class Method(Enum):
    """训练方法"""
    ERM = "erm"
    IRM = "irm"
    IRMBAL = "irmbal"
    MMD = "mmd"
    ACDM = "acdm"
    IRM_MMD = "irm_mmd"
    IRM_ACDM = "irm_acdm"

    @property
    def uses_irm(self) -> bool:
        return self in (Method.IRM, Method.IRMBAL, Method.IRM_MMD, Method.IRM_ACDM)

    @property
    def cdm_kind(self) -> Optional[str]:
        if self in (Method.MMD, Method.IRM_MMD):
            return "mmd"
        if self in (Method.ACDM, Method.IRM_ACDM):
            return "acdm"
        return None

    @property
    def balances_labels(self) -> bool:
        return self == Method.IRMBAL

    @property
    def display_name(self) -> str:
        return self.value.upper().replace("_", "-")


class TrainConfig(BaseModel):
    """单次训练的配置"""

    model_config = ConfigDict(frozen=True)

    method: Method = Method.ERM
    loss_kind: LossKind = LossKind.BCE
    alpha: float = Field(default=0.0, ge=0.0)
    beta: float = Field(default=0.0, ge=0.0)
    k_irm: int = Field(default=0, ge=0)
    d_steps: int = Field(default=10, ge=1)
    lr: float = Field(default=0.1, gt=0.0)
    d_lr: float = Field(default=0.01, gt=0.0)
    iterations: int = Field(default=1000, ge=1)
    batch_size: int = Field(default=512, ge=2)
    seed: int = 0
    runs: int = Field(default=10, ge=1)
    hidden: Tuple[int, ...] = DEFAULT_HIDDEN
    activation: Literal["relu", "tanh"] = "relu"
    optimizer: Literal["sgd", "momentum", "adam"] = "sgd"
    discriminator_hidden: int = Field(default=16, ge=1)
    checkpoint_every: int = Field(default=10, ge=1)
    per_instance_penalty: bool = False
    dummy_on: DummyTarget = "output"
    rescale_large_penalty: bool = True
    val_loss_includes_penalty: bool = False
    select_after_k_irm: bool = False
    reset_optimizer_at_k_irm: bool = True
    kernel_multipliers: Tuple[float, ...] = MKMMD_MULTIPLIERS
    normalized_pairs: bool = False
    mmd_max_group_size: Optional[int] = Field(default=None, ge=2)
    gamma_source: Literal["dataset", "batch"] = "dataset"

    def effective_alpha(self, iteration: int) -> float:
        """第 iteration 次迭代（从1开始）实际使用的 alpha"""
        if not self.method.uses_irm or iteration < self.k_irm:
            return 0.0
        return self.alpha

    @property
    def effective_beta(self) -> float:
        return self.beta if self.method.cdm_kind else 0.0

    def resets_optimizer_at(self, iteration: int) -> bool:
        """IRM惩罚在这一迭代首次启用时重建优化器（K_IRM<=1 时惩罚从头启用，不重建）"""
        return (self.reset_optimizer_at_k_irm and self.method.uses_irm and self.alpha > 0.0
                and self.k_irm > 1 and iteration == self.k_irm)


@dataclass
class Checkpoint:
    """检查点评估结果"""
    iteration: int
    val_loss: float
    train_acc: float
    val_acc: float
    test_acc: float


@dataclass
class TrainingLog:
    """逐迭代日志"""
    rows: List[Dict[str, Any]] = field(default_factory=list)
    checkpoints: List[Checkpoint] = field(default_factory=list)
    discriminator_steps: List[int] = field(default_factory=list)
    optimizer_resets: List[int] = field(default_factory=list)

    def log_step(self, iteration: int, env_ids: List[int], risks: List[float], penalties: List[float],
                 irm_weight: float, mmd_penalty: float, acdm_penalty: float) -> None:
        for env_id, r, p in zip(env_ids, risks, penalties):
            self.rows.append({
                "iter": iteration,
                "env": env_id,
                "risk": r,
                "irm_penalty": p,
                "irm_weight": irm_weight,
                "cdm_penalty": mmd_penalty + acdm_penalty,
                "mmd_penalty": mmd_penalty,
                "acdm_penalty": acdm_penalty,
                "val_loss": math.nan,
            })

    def log_checkpoint(self, checkpoint: Checkpoint) -> None:
        self.checkpoints.append(checkpoint)
        for row in reversed(self.rows):
            if row["iter"] != checkpoint.iteration:
                break
            row["val_loss"] = checkpoint.val_loss


@dataclass
class RunResult:
    """单次训练结果"""
    config: TrainConfig
    seed: int
    log: TrainingLog
    selected_iteration: Optional[int] = None
    train_acc: float = math.nan
    val_acc: float = math.nan
    test_acc: float = math.nan
    val_loss: float = math.nan
    failed: bool = False
    failure_reason: str = ""
    model_state: Optional[Dict[str, torch.Tensor]] = None

    def summary(self) -> Dict[str, Any]:
        return {
            "method": self.config.method.value,
            "alpha": self.config.alpha,
            "beta": self.config.beta,
            "k_irm": self.config.k_irm,
            "seed": self.seed,
            "val_loss": self.val_loss,
            "train_acc": self.train_acc,
            "val_acc": self.val_acc,
            "test_acc": self.test_acc,
            "selected_iter": self.selected_iteration,
            "failed": self.failed,
        }


def select_model(checkpoints: List[Checkpoint], after: Optional[int] = None) -> Checkpoint:
    """
    选择验证损失最低的检查点，并列时取最早的迭代

    Args:
        checkpoints: 检查点列表
        after: 只考虑迭代号不小于该值的检查点（没有则退回全部）

    Returns:
        选中的检查点
    """
    if not checkpoints:
        raise TrainingError("没有可选择的检查点")
    candidates = checkpoints
    if after is not None:
        candidates = [c for c in checkpoints if c.iteration >= after] or checkpoints
    return min(candidates, key=lambda c: (c.val_loss, c.iteration))


class _EnvTensors:
    """某一划分下各环境的张量"""

    def __init__(self, ds: Dataset, split: int, env_ids: List[int]):
        self.env_ids = env_ids
        self.features = {}
        self.labels = {}
        for env_id in env_ids:
            arrays = ds.env_arrays(env_id, split)
            self.features[env_id] = torch.as_tensor(arrays["features"], dtype=torch.float64)
            self.labels[env_id] = torch.as_tensor(arrays["y"], dtype=torch.float64)

    def size(self, env_id: int) -> int:
        return int(self.labels[env_id].shape[0])

    def all_features(self) -> torch.Tensor:
        return torch.cat([self.features[e] for e in self.env_ids])

    def all_labels(self) -> torch.Tensor:
        return torch.cat([self.labels[e] for e in self.env_ids])


def _build_optimizer(kind: str, params, lr: float) -> torch.optim.Optimizer:
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr)
    if kind == "momentum":
        return torch.optim.SGD(params, lr=lr, momentum=0.9)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    raise TrainingError(f"未知的优化器: {kind}")


def _accuracy(model: FeatureClassifier, features: torch.Tensor, labels: torch.Tensor) -> float:
    if labels.shape[0] == 0:
        return math.nan
    return float((model.predict(features) == labels.long()).double().mean())


class Trainer:
    """
    单次训练的执行器

    测试环境的数据只在 _test_accuracy 中用于报告准确率，不进入损失、检查点选择或网格搜索。
    """

    def __init__(self, ds: Dataset, cfg: TrainConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.logger = logging.getLogger(__name__)

        if cfg.method.balances_labels:
            ds = balance_labels(ds, self.seed)
        self.env_ids = list(ds.train_env_ids)
        if cfg.method.uses_irm and len(self.env_ids) < 2:
            self.logger.warning(f"{cfg.method.display_name}只有{len(self.env_ids)}个训练环境")

        self.train = _EnvTensors(ds, SPLIT_TRAIN, self.env_ids)
        self.val = _EnvTensors(ds, SPLIT_VAL, self.env_ids)
        for env_id in self.env_ids:
            if self.train.size(env_id) == 0:
                raise TrainingError(f"训练环境E={env_id}的训练划分为空")
        test_arrays = ds.env_arrays(ds.test_env_id, SPLIT_TEST)
        self._test_features = torch.as_tensor(test_arrays["features"], dtype=torch.float64)
        self._test_labels = torch.as_tensor(test_arrays["y"], dtype=torch.float64)

        init_seed = int(named_stream(self.seed, "init").integers(0, 2 ** 62))
        generator = torch.Generator().manual_seed(init_seed)
        self.model = FeatureClassifier(ds.features.shape[1], cfg.hidden, cfg.loss_kind,
                                       generator, cfg.activation)
        self.optimizer = _build_optimizer(cfg.optimizer, self.model.parameters(), cfg.lr)
        self.batch_rng = named_stream(self.seed, "batches")

        self.kernel = KernelSpec.mkmmd(cfg.kernel_multipliers)
        self.discriminator = None
        self.d_optimizer = None
        self.gamma: Optional[GammaWeights] = None
        if cfg.method.cdm_kind == "acdm":
            self.discriminator = ConditionalDiscriminator(
                self.model.rep_dim, len(self.env_ids), cfg.discriminator_hidden, generator=generator,
            )
            self.d_optimizer = _build_optimizer(cfg.optimizer, self.discriminator.parameters(), cfg.d_lr)
            if cfg.gamma_source == "dataset":
                self.gamma = gamma_weights(ds)

        self.log = TrainingLog()
        # 只保留候选最优检查点的参数："all" 为全程最优，"after" 为 K_IRM 之后最优
        self._selection_after = cfg.k_irm if cfg.select_after_k_irm and cfg.method.uses_irm else None
        self._best: Dict[str, Checkpoint] = {}
        self._states: Dict[int, Dict[str, torch.Tensor]] = {}

    def _draw_batch(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        features, labels, envs = [], [], []
        for env_id in self.env_ids:
            n = self.train.size(env_id)
            idx = self.batch_rng.choice(n, size=self.cfg.batch_size, replace=n < self.cfg.batch_size)
            idx_t = torch.as_tensor(idx, dtype=torch.long)
            features.append(self.train.features[env_id][idx_t])
            labels.append(self.train.labels[env_id][idx_t])
            envs.append(torch.full((self.cfg.batch_size,), env_id, dtype=torch.long))
        return torch.cat(features), torch.cat(labels), torch.cat(envs)

    def _env_batches(self, outputs, labels, envs) -> List[EnvBatch]:
        return [
            EnvBatch(outputs.output[envs == e], labels[envs == e], e, logits=outputs.logit[envs == e])
            for e in self.env_ids
        ]

    def _batch_gamma(self, labels, envs) -> GammaWeights:
        if self.gamma is not None:
            return self.gamma
        return gamma_from_batch(labels.long().numpy(), envs.numpy())

    def _discriminator_steps(self, features, labels, envs) -> int:
        with torch.no_grad():
            reps = self.model(features).representation
        grouped = group_representations(reps, labels, envs)
        gamma = self._batch_gamma(labels, envs)
        steps = 0
        for _ in range(self.cfg.d_steps):
            # 判别器做梯度上升，即最小化负目标
            backward(self.discriminator,
                     lambda: -acdm_discriminator_loss(grouped, self.discriminator, gamma, self.env_ids))
            self.d_optimizer.step()
            steps += 1
        return steps

    def _model_step(self, iteration: int, features, labels, envs) -> None:
        cfg = self.cfg
        alpha = cfg.effective_alpha(iteration)
        beta = cfg.effective_beta
        losses = {}

        def closure() -> torch.Tensor:
            outputs = self.model(features)
            terms = irm_terms(self._env_batches(outputs, labels, envs), cfg.loss_kind,
                              cfg.per_instance_penalty, cfg.dummy_on)
            total = terms.total(alpha)
            mmd_value = torch.zeros((), dtype=torch.float64)
            acdm_value = torch.zeros((), dtype=torch.float64)
            if cfg.method.cdm_kind == "mmd":
                grouped = group_representations(outputs.representation, labels, envs)
                mmd_value = cdm_mmd_penalty(grouped, self.kernel, cfg.normalized_pairs,
                                            max_group_size=cfg.mmd_max_group_size)
            elif cfg.method.cdm_kind == "acdm":
                grouped = group_representations(outputs.representation, labels, envs)
                acdm_value = acdm_generator_penalty(grouped, self.discriminator,
                                                    self._batch_gamma(labels, envs), self.env_ids)
            if beta != 0.0:
                total = total + beta * (mmd_value + acdm_value)
            if cfg.rescale_large_penalty and alpha > 1.0:
                total = total / alpha
            if not torch.isfinite(total):
                raise TrainingError(f"第{iteration}次迭代损失为非有限值")
            losses.update(terms=terms, mmd=float(mmd_value), acdm=float(acdm_value))
            return total

        backward(self.model, closure)
        self.optimizer.step()

        terms = losses["terms"]
        self.log.log_step(
            iteration, terms.env_ids,
            [float(r) for r in terms.risks], [float(p) for p in terms.penalties],
            alpha, losses["mmd"], losses["acdm"],
        )

    def _validation_loss(self, iteration: int) -> float:
        with torch.no_grad():
            batches = []
            for env_id in self.env_ids:
                if self.val.size(env_id) == 0:
                    continue
                outputs = self.model(self.val.features[env_id])
                batches.append(EnvBatch(outputs.output, self.val.labels[env_id], env_id,
                                        logits=outputs.logit))
            if not batches:
                raise TrainingError("验证划分为空，无法选择模型")
            if self.cfg.val_loss_includes_penalty:
                terms = irm_terms(batches, self.cfg.loss_kind, self.cfg.per_instance_penalty,
                                  self.cfg.dummy_on)
                return float(terms.total(self.cfg.effective_alpha(iteration)))
            return float(sum(risk(b, self.cfg.loss_kind, self.cfg.dummy_on) for b in batches))

    def _test_accuracy(self) -> float:
        return _accuracy(self.model, self._test_features, self._test_labels)

    def _checkpoint(self, iteration: int) -> None:
        val_loss = self._validation_loss(iteration)
        checkpoint = Checkpoint(
            iteration=iteration,
            val_loss=val_loss,
            train_acc=_accuracy(self.model, self.train.all_features(), self.train.all_labels()),
            val_acc=_accuracy(self.model, self.val.all_features(), self.val.all_labels()),
            test_acc=self._test_accuracy(),
        )
        if not math.isfinite(val_loss):
            raise TrainingError(f"第{iteration}次迭代验证损失为非有限值")
        self.log.log_checkpoint(checkpoint)
        self._keep_if_best(checkpoint)

    def _keep_if_best(self, checkpoint: Checkpoint) -> None:
        slots = ["all"]
        if self._selection_after is not None and checkpoint.iteration >= self._selection_after:
            slots.append("after")
        improved = False
        for slot in slots:
            current = self._best.get(slot)
            # 迭代号递增，严格更小才替换，并列时保留最早的
            if current is None or checkpoint.val_loss < current.val_loss:
                self._best[slot] = checkpoint
                improved = True
        if improved:
            self._states[checkpoint.iteration] = copy.deepcopy(self.model.state_dict())
        referenced = {c.iteration for c in self._best.values()}
        for iteration in [i for i in self._states if i not in referenced]:
            del self._states[iteration]

    @property
    def retained_iterations(self) -> List[int]:
        """仍保存着模型参数的检查点迭代号"""
        return sorted(self._states)

    def _reset_optimizer(self, iteration: int) -> None:
        self.optimizer = _build_optimizer(self.cfg.optimizer, self.model.parameters(), self.cfg.lr)
        self.log.optimizer_resets.append(iteration)
        self.logger.debug(f"{self.cfg.method.display_name} seed={self.seed}: 第{iteration}次迭代启用IRM惩罚，重建优化器")

    def run(self) -> RunResult:
        cfg = self.cfg
        result = RunResult(config=cfg, seed=self.seed, log=self.log)
        try:
            for iteration in range(1, cfg.iterations + 1):
                features, labels, envs = self._draw_batch()
                if self.discriminator is not None:
                    self.log.discriminator_steps.append(self._discriminator_steps(features, labels, envs))
                if cfg.resets_optimizer_at(iteration):
                    self._reset_optimizer(iteration)
                self._model_step(iteration, features, labels, envs)
                if iteration % cfg.checkpoint_every == 0 or iteration == cfg.iterations:
                    self._checkpoint(iteration)
        except (TrainingError, NonFiniteGradientError) as exc:
            self.logger.warning(f"{cfg.method.display_name} seed={self.seed} 训练失败: {exc}")
            result.failed = True
            result.failure_reason = str(exc)
            return result

        selected = select_model(self.log.checkpoints, self._selection_after)
        result.selected_iteration = selected.iteration
        result.val_loss = selected.val_loss
        result.train_acc = selected.train_acc
        result.val_acc = selected.val_acc
        result.test_acc = selected.test_acc
        result.model_state = self._states[selected.iteration]
        self.logger.debug(
            f"{cfg.method.display_name} seed={self.seed}: 选中第{selected.iteration}次迭代，"
            f"val_loss={selected.val_loss:.4f}, test_acc={selected.test_acc:.4f}"
        )
        return result


def train_run(ds: Dataset, cfg: TrainConfig, seed: Optional[int] = None) -> RunResult:
    """
    执行一次训练

    Args:
        ds: 已划分的数据集
        cfg: 训练配置
        seed: 覆盖 cfg.seed

    Returns:
        训练结果；发散时 failed=True
    """
    return Trainer(ds, cfg, seed).run()


def restore_model(result: RunResult, input_dim: int) -> FeatureClassifier:
    """按运行结果重建选中的模型"""
    if result.model_state is None:
        raise LabError("该运行没有保存模型参数")
    model = FeatureClassifier(input_dim, result.config.hidden, result.config.loss_kind,
                              activation=result.config.activation)
    model.load_state_dict(result.model_state)
    return model

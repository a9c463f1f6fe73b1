"""
小型前馈网络
特征映射 F 由若干仿射+ReLU层组成，末层隐藏激活即表示；头部是标量仿射输出乘以固定的虚拟乘子 w=1.0
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import torch
import torch.nn as nn

from .errors import ModelError, NonFiniteGradientError
from .penalty import LossKind


logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (16, 16)
FINITE_DIFFERENCE_STEP = 1e-5
ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh}


def init_uniform_(layer: nn.Linear, generator: torch.Generator) -> None:
    """权重与偏置从 ±1/sqrt(fan_in) 均匀分布中抽取"""
    bound = 1.0 / layer.in_features ** 0.5
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


@dataclass
class ModelOutput:
    """前向结果"""
    representation: torch.Tensor
    logit: torch.Tensor
    output: torch.Tensor


class FeatureClassifier(nn.Module):
    """
    表示学习网络 + 标量分类头

    Args:
        input_dim: 输入特征宽度
        hidden: 各隐藏层宽度，最后一层宽度即表示维度 d；为空时表示就是输入本身
        loss_kind: BCE 时输出经过 sigmoid
        generator: 初始化用的随机数生成器
        activation: "relu" 或 "tanh"
    """

    def __init__(self, input_dim: int, hidden: Sequence[int] = DEFAULT_HIDDEN,
                 loss_kind: LossKind = LossKind.BCE, generator: Optional[torch.Generator] = None,
                 activation: str = "relu"):
        super().__init__()
        if input_dim < 1 or any(h < 1 for h in hidden):
            raise ModelError(f"非法的网络宽度: input={input_dim}, hidden={tuple(hidden)}")
        self.input_dim = input_dim
        self.hidden = tuple(hidden)
        self.loss_kind = loss_kind

        widths = (input_dim,) + self.hidden
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.head = nn.Linear(widths[-1], 1)
        if activation not in ACTIVATIONS:
            raise ModelError(f"未知的激活函数: {activation}")
        self.activation = ACTIVATIONS[activation]()
        # 虚拟乘子不是参数，任何优化器都不会更新它
        self.register_buffer("dummy", torch.tensor(1.0))

        if generator is not None:
            for layer in list(self.layers) + [self.head]:
                init_uniform_(layer, generator)
        self.double()

    @property
    def rep_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def _check_width(self, features: torch.Tensor) -> None:
        if features.dim() != 2 or features.shape[1] != self.input_dim:
            raise ModelError(f"输入宽度不匹配: 期望{self.input_dim}，实际形状{tuple(features.shape)}")

    def hidden_activations(self, features: torch.Tensor) -> List[torch.Tensor]:
        """每个隐藏层的激活"""
        self._check_width(features)
        activations = []
        x = features
        for layer in self.layers:
            x = self.activation(layer(x))
            activations.append(x)
        return activations

    def forward(self, features: torch.Tensor) -> ModelOutput:
        activations = self.hidden_activations(features)
        representation = activations[-1] if activations else features
        logit = self.head(representation).reshape(-1) * self.dummy
        output = torch.sigmoid(logit) if self.loss_kind == LossKind.BCE else logit
        return ModelOutput(representation=representation, logit=logit, output=output)

    def predict(self, features: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return (self.forward(features).output > 0.5).long()


def forward(model: FeatureClassifier, features) -> ModelOutput:
    """对数组或张量输入做前向"""
    x = features if torch.is_tensor(features) else torch.as_tensor(features, dtype=torch.float64)
    return model(x)


def backward(model: nn.Module, loss_closure: Callable[[], torch.Tensor]) -> Dict[str, torch.Tensor]:
    """
    反向传播，把梯度写入各参数的 .grad 并返回

    Args:
        model: 网络
        loss_closure: 返回标量损失的闭包

    Returns:
        {参数名: 梯度}

    Raises:
        NonFiniteGradientError: 出现 NaN/Inf 梯度
    """
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    loss = loss_closure()
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)

    result = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"参数{name}的梯度出现非有限值，损失={float(loss)}")
        p.grad = g.detach().clone()
        result[name] = p.grad
    return result


def numerical_gradient(model: nn.Module, loss_closure: Callable[[], torch.Tensor],
                       step: float = FINITE_DIFFERENCE_STEP) -> Dict[str, torch.Tensor]:
    """中心差分梯度，用于校验 backward"""
    result = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            grad = torch.zeros_like(p)
            flat_p = p.view(-1)
            flat_g = grad.view(-1)
            for i in range(flat_p.numel()):
                original = flat_p[i].item()
                flat_p[i] = original + step
                plus = float(loss_closure())
                flat_p[i] = original - step
                minus = float(loss_closure())
                flat_p[i] = original
                flat_g[i] = (plus - minus) / (2.0 * step)
            result[name] = grad
    return result


def max_relative_error(analytic: Dict[str, torch.Tensor], numeric: Dict[str, torch.Tensor],
                       floor: float = 1e-6) -> float:
    """两组梯度的最大相对误差"""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        scale = torch.maximum(a.abs(), n.abs()).clamp(min=floor)
        worst = max(worst, float(((a - n).abs() / scale).max()))
    return worst

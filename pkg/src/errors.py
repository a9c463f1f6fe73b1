"""
异常层次
实验室各模块抛出的错误类型
"""


class LabError(Exception):
    """实验室错误基类"""


class SpecValidationError(LabError, ValueError):
    """数据规格参数不合法"""


class OracleError(LabError):
    """解析后验在某个单元上无定义"""


class SamplerError(LabError):
    """采样、划分或类别平衡失败"""


class PenaltyError(LabError):
    """风险或惩罚项输入不合法"""


class CdmError(LabError):
    """条件分布匹配惩罚无法计算"""


class ModelError(LabError):
    """模型输入维度不匹配"""


class NonFiniteGradientError(LabError):
    """梯度出现NaN或Inf"""


class TrainingError(LabError):
    """训练配置与方法不一致，或训练过程发散"""


class DiagnosticsError(LabError):
    """表示诊断的输入不足"""


class ConfigError(LabError):
    """配置文件无法通过校验"""

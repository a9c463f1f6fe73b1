"""
离散因果模型规格
构造CMNIST+、CMNIST及两者之间插值族的数据规格，并提供校验与读写
"""

import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from .errors import SpecValidationError


logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-9
DEFAULT_FLIP_RATE = 0.25
PLUS_REFERENCE_RHO = 0.9


class ColorSymbol(Enum):
    """颜色符号，表格布局顺序固定为 G < B < R"""
    G = "G"
    B = "B"
    R = "R"

    @property
    def index(self) -> int:
        return COLOR_ORDER.index(self)


COLOR_ORDER: Tuple[ColorSymbol, ...] = (ColorSymbol.G, ColorSymbol.B, ColorSymbol.R)
COLOR_NAMES: Tuple[str, ...] = tuple(c.value for c in COLOR_ORDER)

# color_table的行顺序：第0行为Y=1，第1行为Y=0
LABEL_ROWS: Tuple[int, ...] = (1, 0)


class EnvRole(Enum):
    """环境角色"""
    TRAIN = "train"
    TEST = "test"


ColorRow = Tuple[float, float, float]


class EnvironmentSpec(BaseModel):
    """单个环境：P(Y=1|E) 与 P(C|Y,E)"""

    model_config = ConfigDict(frozen=True)

    env_id: int
    role: EnvRole
    p_y1: float
    color_table: Tuple[ColorRow, ColorRow]

    def color_row(self, y: int) -> ColorRow:
        """
        取某个类别的颜色分布

        Args:
            y: 类别标签 0/1

        Returns:
            (P(G|y,e), P(B|y,e), P(R|y,e))
        """
        return self.color_table[LABEL_ROWS.index(y)]

    def p_label(self, y: int) -> float:
        return self.p_y1 if y == 1 else 1.0 - self.p_y1


class DatasetSpec(BaseModel):
    """完整的数据规格：有序环境列表、训练环境先验、翻转率与ρ"""

    model_config = ConfigDict(frozen=True)

    environments: Tuple[EnvironmentSpec, ...]
    env_prior: Tuple[float, ...]
    flip_rate: float = DEFAULT_FLIP_RATE
    rho: Optional[float] = None

    @property
    def train_envs(self) -> List[EnvironmentSpec]:
        return [env for env in self.environments if env.role == EnvRole.TRAIN]

    @property
    def test_env(self) -> EnvironmentSpec:
        tests = [env for env in self.environments if env.role == EnvRole.TEST]
        if len(tests) != 1:
            raise SpecValidationError(f"需要恰好一个测试环境，实际为{len(tests)}个")
        return tests[0]

    @property
    def train_env_ids(self) -> List[int]:
        return [env.env_id for env in self.train_envs]

    def environment(self, env_id: int) -> EnvironmentSpec:
        for env in self.environments:
            if env.env_id == env_id:
                return env
        raise KeyError(f"未知环境: {env_id}")

    def prior_of(self, env_id: int) -> float:
        return self.env_prior[self.train_env_ids.index(env_id)]

    def to_dict(self) -> Dict[str, Any]:
        """导出为配置文件使用的嵌套字典"""
        return {
            "environments": [
                {
                    "env_id": env.env_id,
                    "role": env.role.value,
                    "p_y1": env.p_y1,
                    "color_table": [list(row) for row in env.color_table],
                }
                for env in self.environments
            ],
            "env_prior": list(self.env_prior),
            "flip_rate": self.flip_rate,
            "rho": self.rho,
        }

    def digest(self) -> str:
        """规格的稳定标识（规范化JSON的SHA-1）"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(canonical.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetSpec":
        environments = tuple(
            EnvironmentSpec(
                env_id=int(env["env_id"]),
                role=EnvRole(env["role"]),
                p_y1=float(env["p_y1"]),
                color_table=tuple(tuple(float(v) for v in row) for row in env["color_table"]),
            )
            for env in data["environments"]
        )
        return cls(
            environments=environments,
            env_prior=tuple(float(p) for p in data["env_prior"]),
            flip_rate=float(data.get("flip_rate", DEFAULT_FLIP_RATE)),
            rho=data.get("rho"),
        )


class InterpolationParams(BaseModel):
    """CMNIST 与 CMNIST+ 之间的插值参数"""

    model_config = ConfigDict(frozen=True)

    w_plus: float = Field(ge=0.0, le=1.0)
    p_ye: float = Field(ge=0.5, le=0.9)


def _check_rho(rho: float) -> None:
    if not 0.5 < rho < 1.0:
        raise SpecValidationError(f"rho必须在(0.5, 1)内，实际为{rho}")


def cmnist_plus_test_env(env_id: int = 3) -> EnvironmentSpec:
    """CMNIST+ 的测试环境（与ρ无关）"""
    return EnvironmentSpec(
        env_id=env_id,
        role=EnvRole.TEST,
        p_y1=0.5,
        color_table=((0.1, 0.1, 0.8), (0.4, 0.4, 0.2)),
    )


def cmnist_test_env(env_id: int = 3) -> EnvironmentSpec:
    """CMNIST 的测试环境"""
    return EnvironmentSpec(
        env_id=env_id,
        role=EnvRole.TEST,
        p_y1=0.5,
        color_table=((0.1, 0.0, 0.9), (0.9, 0.0, 0.1)),
    )


def cmnist_plus(rho: float) -> DatasetSpec:
    """
    构造 CMNIST+ 规格

    Args:
        rho: 伪相关强度，取值 (0.5, 1)

    Returns:
        三环境的数据规格
    """
    _check_rho(rho)
    q = (1.0 - rho) / 2.0
    env1 = EnvironmentSpec(
        env_id=1, role=EnvRole.TRAIN, p_y1=0.9,
        color_table=((rho, q, q), (q, q, rho)),
    )
    env2 = EnvironmentSpec(
        env_id=2, role=EnvRole.TRAIN, p_y1=0.1,
        color_table=((q, rho, q), (q, q, rho)),
    )
    return DatasetSpec(
        environments=(env1, env2, cmnist_plus_test_env()),
        env_prior=(0.5, 0.5),
        flip_rate=DEFAULT_FLIP_RATE,
        rho=rho,
    )


def cmnist() -> DatasetSpec:
    """构造原始 CMNIST 规格（B列恒为0）"""
    env1 = EnvironmentSpec(
        env_id=1, role=EnvRole.TRAIN, p_y1=0.5,
        color_table=((0.9, 0.0, 0.1), (0.1, 0.0, 0.9)),
    )
    env2 = EnvironmentSpec(
        env_id=2, role=EnvRole.TRAIN, p_y1=0.5,
        color_table=((0.8, 0.0, 0.2), (0.2, 0.0, 0.8)),
    )
    return DatasetSpec(
        environments=(env1, env2, cmnist_test_env()),
        env_prior=(0.5, 0.5),
        flip_rate=DEFAULT_FLIP_RATE,
    )


def two_color_config() -> DatasetSpec:
    """
    两种颜色(R/G)下的强三角伪相关示例配置

    B列恒为0，测试环境位于两个训练环境正中间，
    拟合颜色的模型在测试集上也能得到0.5，因此难以从测试精度上观察到失败。
    """
    env1 = EnvironmentSpec(
        env_id=1, role=EnvRole.TRAIN, p_y1=0.9,
        color_table=((0.9, 0.0, 0.1), (0.1, 0.0, 0.9)),
    )
    env2 = EnvironmentSpec(
        env_id=2, role=EnvRole.TRAIN, p_y1=0.1,
        color_table=((0.1, 0.0, 0.9), (0.9, 0.0, 0.1)),
    )
    env3 = EnvironmentSpec(
        env_id=3, role=EnvRole.TEST, p_y1=0.5,
        color_table=((0.5, 0.0, 0.5), (0.5, 0.0, 0.5)),
    )
    return DatasetSpec(environments=(env1, env2, env3), env_prior=(0.5, 0.5))


def _mix_row(plus_row: ColorRow, base_row: ColorRow, w_plus: float) -> ColorRow:
    raw = [p * w_plus + b * (1.0 - w_plus) for p, b in zip(plus_row, base_row)]
    total = sum(raw)
    return tuple(v / total for v in raw)


def _mixed_train_envs(plus: DatasetSpec, base: DatasetSpec, params: InterpolationParams) -> List[EnvironmentSpec]:
    p_y1 = {1: params.p_ye, 2: 1.0 - params.p_ye}
    envs = []
    for plus_env, base_env in zip(plus.train_envs, base.train_envs):
        rows = tuple(
            _mix_row(plus_row, base_row, params.w_plus)
            for plus_row, base_row in zip(plus_env.color_table, base_env.color_table)
        )
        envs.append(EnvironmentSpec(
            env_id=plus_env.env_id,
            role=EnvRole.TRAIN,
            p_y1=p_y1[plus_env.env_id],
            color_table=rows,
        ))
    return envs


def interpolate(params: InterpolationParams, test_spec: str = "cmnist_plus") -> DatasetSpec:
    """
    在 CMNIST 与 CMNIST+(ρ=0.9) 之间插值

    Args:
        params: 插值参数 (w_plus, p_ye)
        test_spec: 测试环境取自 "cmnist_plus" 或 "cmnist"

    Returns:
        插值后的数据规格
    """
    if test_spec not in ("cmnist_plus", "cmnist"):
        raise SpecValidationError(f"未知的测试规格: {test_spec}")

    plus = cmnist_plus(PLUS_REFERENCE_RHO)
    # w_plus=1 且 p_ye 与 CMNIST+ 相同时端点就是 CMNIST+(ρ=0.9)，直接沿用其环境与 ρ
    at_plus_endpoint = params.w_plus == 1.0 and params.p_ye == plus.train_envs[0].p_y1
    if at_plus_endpoint:
        train_envs = list(plus.train_envs)
    else:
        train_envs = _mixed_train_envs(plus, cmnist(), params)

    test_env = cmnist_plus_test_env() if test_spec == "cmnist_plus" else cmnist_test_env()
    logger.debug(f"插值规格: w_plus={params.w_plus}, p_ye={params.p_ye}, 测试={test_spec}")
    return DatasetSpec(
        environments=tuple(train_envs) + (test_env,),
        env_prior=(0.5, 0.5),
        flip_rate=DEFAULT_FLIP_RATE,
        rho=PLUS_REFERENCE_RHO if at_plus_endpoint and test_spec == "cmnist_plus" else None,
    )


def interpolation_lipschitz_bound() -> float:
    """
    插值族关于 w_plus 的Lipschitz常数

    两端表格都已归一化，混合后的分母恒为1，
    因此每个单元对 w_plus 的导数就是两端取值之差。
    """
    plus = cmnist_plus(PLUS_REFERENCE_RHO)
    base = cmnist()
    bound = 0.0
    for plus_env, base_env in zip(plus.train_envs, base.train_envs):
        for plus_row, base_row in zip(plus_env.color_table, base_env.color_table):
            for p, b in zip(plus_row, base_row):
                bound = max(bound, abs(p - b))
    return bound


def validate_spec(spec: DatasetSpec, min_train_envs: int = 1,
                  allow_rho_half: bool = False) -> Dict[str, Any]:
    """
    校验数据规格的全部不变量

    Args:
        spec: 待校验的规格
        min_train_envs: 至少需要的训练环境数（IRM类训练为2）
        allow_rho_half: 是否允许 rho=0.5

    Returns:
        {"is_valid": bool, "issues": [...]}
    """
    issues: List[str] = []

    test_count = sum(1 for env in spec.environments if env.role == EnvRole.TEST)
    if test_count != 1:
        issues.append(f"expected exactly one test environment, found {test_count}")

    train_envs = spec.train_envs
    if len(train_envs) < min_train_envs:
        issues.append(f"need at least {min_train_envs} train environments, found {len(train_envs)}")

    env_ids = [env.env_id for env in spec.environments]
    if len(set(env_ids)) != len(env_ids):
        issues.append(f"duplicate env_id in {env_ids}")
    if any(env_id < 1 for env_id in env_ids):
        issues.append("env_id must be >= 1")

    for env in spec.environments:
        if not 0.0 <= env.p_y1 <= 1.0:
            issues.append(f"p_y1 out of range at E={env.env_id}: {env.p_y1}")
        for y in LABEL_ROWS:
            row = env.color_row(y)
            if any(v < 0.0 or v > 1.0 for v in row):
                issues.append(f"color_table entry out of range at (E={env.env_id}, Y={y}): {row}")
            row_sum = sum(row)
            if abs(row_sum - 1.0) > ROW_SUM_TOLERANCE:
                issues.append(f"color_table row (E={env.env_id}, Y={y}) sums to {row_sum:.6g}")

    if len(spec.env_prior) != len(train_envs):
        issues.append(f"env_prior has {len(spec.env_prior)} entries for {len(train_envs)} train environments")
    if any(p < 0.0 for p in spec.env_prior):
        issues.append("env_prior has negative entries")
    prior_sum = sum(spec.env_prior)
    if abs(prior_sum - 1.0) > ROW_SUM_TOLERANCE:
        issues.append(f"env_prior sums to {prior_sum:.6g}")

    if not 0.0 <= spec.flip_rate < 0.5:
        issues.append(f"flip_rate out of range ({spec.flip_rate})")

    if spec.rho is not None:
        lower_ok = spec.rho >= 0.5 if allow_rho_half else spec.rho > 0.5
        if not (lower_ok and spec.rho < 1.0):
            issues.append(f"rho out of range ({spec.rho})")

    if issues:
        logger.warning(f"规格校验未通过: {len(issues)}个问题")
    return {"is_valid": not issues, "issues": issues}


def require_valid(spec: DatasetSpec, min_train_envs: int = 1) -> DatasetSpec:
    """校验失败时抛出 SpecValidationError"""
    report = validate_spec(spec, min_train_envs=min_train_envs)
    if not report["is_valid"]:
        raise SpecValidationError("; ".join(report["issues"]))
    return spec


def load_spec(path: str) -> DatasetSpec:
    """从JSON文件读取规格"""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    spec = DatasetSpec.from_dict(data)
    logger.info(f"成功加载数据规格: {path}")
    return spec


def save_spec(spec: DatasetSpec, path: str) -> str:
    """把规格写入JSON文件"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2, ensure_ascii=False)
    logger.info(f"数据规格已保存到: {path}")
    return path


def spec_from_settings(dataset_settings: Dict[str, Any], rho: Optional[float] = None,
                       w_plus: Optional[float] = None, p_ye: Optional[float] = None) -> DatasetSpec:
    """
    按配置中的 dataset_settings 构造规格

    Args:
        dataset_settings: 配置段
        rho / w_plus / p_ye: 命令行覆盖值

    Returns:
        数据规格
    """
    family = dataset_settings.get("family", "cmnist_plus")
    if family == "cmnist_plus":
        spec = cmnist_plus(rho if rho is not None else dataset_settings.get("rho", 0.9))
    elif family == "cmnist":
        spec = cmnist()
    elif family == "interpolated":
        params = InterpolationParams(
            w_plus=w_plus if w_plus is not None else dataset_settings.get("w_plus", 0.0),
            p_ye=p_ye if p_ye is not None else dataset_settings.get("p_ye", 0.5),
        )
        spec = interpolate(params, dataset_settings.get("test_spec", "cmnist_plus"))
    elif family == "two_color":
        spec = two_color_config()
    elif family == "file":
        spec = load_spec(dataset_settings["spec_path"])
    else:
        raise SpecValidationError(f"未知的数据族: {family}")

    overrides: Dict[str, Any] = {}
    if dataset_settings.get("env_prior") is not None:
        overrides["env_prior"] = tuple(dataset_settings["env_prior"])
    if dataset_settings.get("flip_rate") is not None:
        overrides["flip_rate"] = float(dataset_settings["flip_rate"])
    if overrides:
        spec = spec.model_copy(update=overrides)
    return spec


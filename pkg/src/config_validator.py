"""
配置验证和加载工具
提供统一的配置管理，确保config.json真正生效
"""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, List


METHOD_NAMES = ("erm", "irm", "irmbal", "mmd", "acdm", "irm_mmd", "irm_acdm")
SPEC_FAMILIES = ("cmnist_plus", "cmnist", "interpolated", "two_color", "file")
TEST_SPECS = ("cmnist_plus", "cmnist")


class ConfigValidator:
    """配置验证和加载工具"""

    def __init__(self, config_path: str = "config.json"):
        """
        初始化配置验证器

        Args:
            config_path: 配置文件路径
        """
        self.config_path = config_path
        self.logger = logging.getLogger(__name__)

    def load_config(self) -> Dict[str, Any]:
        """
        加载并合并配置文件

        Returns:
            补全默认值后的配置字典
        """
        try:
            if Path(self.config_path).exists():
                with open(self.config_path, "r", encoding="utf-8") as f:
                    config = json.load(f)
                self.logger.info(f"成功加载配置文件: {self.config_path}")
            else:
                self.logger.warning(f"配置文件不存在: {self.config_path}，使用默认配置")
                config = {}

            return self._validate_and_merge_config(config)

        except Exception as e:
            self.logger.error(f"加载配置文件失败: {e}")
            return self._get_default_config()

    def _validate_and_merge_config(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """
        按段补充缺失的默认值，忽略未知键

        Args:
            config: 原始配置

        Returns:
            完整配置
        """
        default_config = self._get_default_config()
        merged = {}
        for section, defaults in default_config.items():
            given = config.get(section, {}) or {}
            unknown = sorted(set(given) - set(defaults))
            if unknown:
                self.logger.warning(f"{section} 中的未知配置项将被忽略: {unknown}")
            merged[section] = {key: given.get(key, value) for key, value in defaults.items()}
        return merged

    def _get_default_config(self) -> Dict[str, Any]:
        """
        获取与config.json一致的默认配置

        Returns:
            默认配置字典
        """
        return copy.deepcopy({
            "dataset_settings": {
                "family": "cmnist_plus",
                "rho": 0.9,
                "rho_grid": [0.55, 0.6, 0.65, 0.7, 0.8, 0.85, 0.9],
                "compare_rhos": [0.8, 0.85, 0.9],
                "w_plus": 0.0,
                "p_ye": 0.5,
                "w_plus_grid": [0.0, 0.25, 0.5, 0.75, 1.0],
                "p_ye_grid": [0.5, 0.7, 0.9],
                "test_spec": "cmnist_plus",
                "spec_path": None,
                "env_prior": None,
                "flip_rate": None,
                "n_per_env": 25000,
                "train_ratio": 0.8
            },
            "encoding_settings": {
                "shape_encoding": "exact",
                "shape_noise_sigma": 0.0
            },
            "train_settings": {
                "loss_kind": "bce",
                "alpha": 1000.0,
                "beta": 10.0,
                "k_irm": 200,
                "d_steps": 10,
                "lr": 0.1,
                "d_lr": 0.01,
                "iterations": 1000,
                "batch_size": 512,
                "runs": 10,
                "hidden": [16, 16],
                "activation": "relu",
                "optimizer": "sgd",
                "checkpoint_every": 10,
                "per_instance_penalty": False,
                "dummy_on": "output",
                "rescale_large_penalty": True,
                "val_loss_includes_penalty": False,
                "select_after_k_irm": False,
                "reset_optimizer_at_k_irm": True
            },
            "grid_settings": {
                "use_grid_search": True,
                "alpha_grid": [10.0 ** k for k in range(0, 9)],
                "beta_grid": [10.0 ** k for k in range(0, 6)],
                "k_irm_grid": [200, 400, 600]
            },
            "cdm_settings": {
                "kernel_multipliers": [0.25, 0.5, 1.0, 2.0, 4.0],
                "normalized_pairs": False,
                "mmd_max_group_size": None,
                "gamma_source": "dataset",
                "discriminator_hidden": 16
            },
            "experiment_settings": {
                "methods": list(METHOD_NAMES),
                "jobs": 1,
                "output_dir": "results",
                "root_seed": 0,
                "render_plots": False,
                "run_diagnostics": True,
                "probe_bins": 16
            },
            "logging_settings": {
                "level": "INFO",
                "log_file": None
            }
        })

    def validate_config(self, config: Dict[str, Any]) -> Dict[str, bool]:
        """
        验证各配置段是否存在

        Args:
            config: 要验证的配置

        Returns:
            {段名: 是否存在}
        """
        return {section: bool(config.get(section)) for section in self._get_default_config()}

    def get_config_value(self, config: Dict[str, Any], key_path: str, default: Any = None) -> Any:
        """
        安全地获取配置值

        Args:
            config: 配置字典
            key_path: 键路径，如 "train_settings.alpha"
            default: 默认值

        Returns:
            配置值或默认值
        """
        try:
            value = config
            for key in key_path.split("."):
                value = value[key]
            return value
        except (KeyError, TypeError):
            return default

    def validate_dataset_settings(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """
        验证数据设置

        Args:
            config: 完整配置

        Returns:
            {"is_valid": bool, "issues": [...]}
        """
        ds = config.get("dataset_settings", {})
        issues: List[str] = []

        family = ds.get("family")
        if family not in SPEC_FAMILIES:
            issues.append(f"未知的数据族: {family}")
        if family == "file" and not ds.get("spec_path"):
            issues.append("family=file 时必须提供 spec_path")

        if not _in_open(ds.get("rho"), 0.5, 1.0):
            issues.append(f"rho超出范围(0.5, 1): {ds.get('rho')}")
        for key in ("rho_grid", "compare_rhos"):
            grid = ds.get(key) or []
            if not grid:
                issues.append(f"{key}不能为空")
            elif not all(_in_open(r, 0.5, 1.0) for r in grid):
                issues.append(f"{key}中存在超出范围(0.5, 1)的取值: {grid}")

        w_grid = ds.get("w_plus_grid") or []
        if not w_grid or not all(_in_closed(w, 0.0, 1.0) for w in w_grid):
            issues.append(f"w_plus_grid必须非空且取值在[0, 1]: {w_grid}")
        p_grid = ds.get("p_ye_grid") or []
        if not p_grid or not all(_in_closed(p, 0.5, 0.9) for p in p_grid):
            issues.append(f"p_ye_grid必须非空且取值在[0.5, 0.9]: {p_grid}")

        if ds.get("test_spec") not in TEST_SPECS:
            issues.append(f"未知的测试环境: {ds.get('test_spec')}")

        n_per_env = ds.get("n_per_env")
        if not isinstance(n_per_env, int) or n_per_env < 0:
            issues.append(f"n_per_env必须是非负整数: {n_per_env}")
        if not _in_open(ds.get("train_ratio"), 0.0, 1.0):
            issues.append(f"train_ratio超出范围(0, 1): {ds.get('train_ratio')}")

        flip_rate = ds.get("flip_rate")
        if flip_rate is not None and not (_is_number(flip_rate) and 0.0 <= flip_rate < 0.5):
            issues.append(f"flip_rate超出范围[0, 0.5): {flip_rate}")
        env_prior = ds.get("env_prior")
        if env_prior is not None and (not env_prior or abs(sum(env_prior) - 1.0) > 1e-9):
            issues.append(f"env_prior之和必须为1: {env_prior}")

        enc = config.get("encoding_settings", {})
        if enc.get("shape_encoding") not in ("exact", "noisy"):
            issues.append(f"未知的形状编码: {enc.get('shape_encoding')}")
        if not _is_number(enc.get("shape_noise_sigma")) or enc.get("shape_noise_sigma") < 0:
            issues.append(f"shape_noise_sigma必须非负: {enc.get('shape_noise_sigma')}")

        return {"is_valid": not issues, "issues": issues}

    def validate_train_settings(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """
        验证训练、网格、CDM与实验设置

        Args:
            config: 完整配置

        Returns:
            {"is_valid": bool, "issues": [...]}
        """
        ts = config.get("train_settings", {})
        gs = config.get("grid_settings", {})
        cs = config.get("cdm_settings", {})
        es = config.get("experiment_settings", {})
        issues: List[str] = []

        for key in ("alpha", "beta", "k_irm"):
            if not _is_number(ts.get(key)) or ts.get(key) < 0:
                issues.append(f"{key}必须非负: {ts.get(key)}")
        for key in ("d_steps", "iterations", "runs", "checkpoint_every"):
            if not isinstance(ts.get(key), int) or ts.get(key) < 1:
                issues.append(f"{key}必须是正整数: {ts.get(key)}")
        if not isinstance(ts.get("batch_size"), int) or ts.get("batch_size") < 2:
            issues.append(f"batch_size至少为2: {ts.get('batch_size')}")
        for key in ("lr", "d_lr"):
            if not _is_number(ts.get(key)) or ts.get(key) <= 0:
                issues.append(f"{key}必须为正: {ts.get(key)}")
        if ts.get("loss_kind") not in ("bce", "mse"):
            issues.append(f"未知的损失类型: {ts.get('loss_kind')}")
        if ts.get("optimizer") not in ("sgd", "momentum", "adam"):
            issues.append(f"未知的优化器: {ts.get('optimizer')}")
        if ts.get("dummy_on") not in ("output", "logit"):
            issues.append(f"dummy_on只能是output或logit: {ts.get('dummy_on')}")
        if ts.get("activation") not in ("relu", "tanh"):
            issues.append(f"未知的激活函数: {ts.get('activation')}")

        for key in ("alpha_grid", "beta_grid", "k_irm_grid"):
            grid = gs.get(key) or []
            if not grid:
                issues.append(f"{key}不能为空")
            elif any(not _is_number(v) or v < 0 for v in grid):
                issues.append(f"{key}取值必须非负: {grid}")

        multipliers = cs.get("kernel_multipliers") or []
        if not multipliers or any(not _is_number(m) or m <= 0 for m in multipliers):
            issues.append(f"kernel_multipliers必须非空且为正: {multipliers}")
        if cs.get("gamma_source") not in ("dataset", "batch"):
            issues.append(f"gamma_source只能是dataset或batch: {cs.get('gamma_source')}")
        cap = cs.get("mmd_max_group_size")
        if cap is not None and (not isinstance(cap, int) or cap < 2):
            issues.append(f"mmd_max_group_size必须是不小于2的整数或null: {cap}")

        methods = es.get("methods") or []
        unknown = [m for m in methods if m not in METHOD_NAMES]
        if not methods:
            issues.append("methods不能为空")
        elif unknown:
            issues.append(f"未知的方法: {unknown}")
        if not isinstance(es.get("jobs"), int) or es.get("jobs") < 1:
            issues.append(f"jobs必须是正整数: {es.get('jobs')}")

        return {"is_valid": not issues, "issues": issues}

    def validate_all(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """汇总所有校验结果"""
        dataset = self.validate_dataset_settings(config)
        train = self.validate_train_settings(config)
        return {
            "is_valid": dataset["is_valid"] and train["is_valid"],
            "sections": self.validate_config(config),
            "dataset_settings": dataset,
            "train_settings": train,
        }

    def suggest_config_fixes(self, validation_results: Dict[str, Any]) -> List[str]:
        """
        根据验证结果提供配置修复建议

        Args:
            validation_results: validate_all 的结果

        Returns:
            修复建议列表
        """
        suggestions = []
        issues = validation_results.get("dataset_settings", {}).get("issues", []) + \
            validation_results.get("train_settings", {}).get("issues", [])

        for issue in issues:
            if issue.startswith("rho") or "rho_grid" in issue or "compare_rhos" in issue:
                suggestions.append("rho 取值应在 (0.5, 1) 开区间内，例如 0.55 至 0.9")
            elif "w_plus_grid" in issue:
                suggestions.append("w_plus_grid 使用 [0, 0.25, 0.5, 0.75, 1.0] 一类的取值")
            elif "p_ye_grid" in issue:
                suggestions.append("p_ye_grid 取值应在 [0.5, 0.9]")
            elif "未知的方法" in issue or "methods" in issue:
                suggestions.append(f"methods 只能从 {list(METHOD_NAMES)} 中选择")
            elif "env_prior" in issue:
                suggestions.append("env_prior 设为 null 使用均匀先验，或确保各项之和为1")
            elif "flip_rate" in issue:
                suggestions.append("flip_rate 设为 null 使用默认的0.25，或取 [0, 0.5) 内的值")
            elif "spec_path" in issue:
                suggestions.append("为 family=file 提供 spec_path，或改用内置数据族")
            elif "grid" in issue:
                suggestions.append("超参数网格至少保留一个非负取值")
            else:
                suggestions.append(f"检查配置项: {issue}")

        return suggestions


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _in_open(value: Any, low: float, high: float) -> bool:
    return _is_number(value) and low < value < high


def _in_closed(value: Any, low: float, high: float) -> bool:
    return _is_number(value) and low <= value <= high

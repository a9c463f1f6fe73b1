"""
实验执行器
oracle-table / sweep-rho / sweep-interp / compare / train 五个命令，结果写成CSV、清单与可选的SVG趋势图
"""

import asyncio
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import __version__
from .dataset_spec import (
    DatasetSpec,
    require_valid,
    spec_from_settings,
)
from .diagnostics import diagnose
from .errors import LabError, SpecValidationError
from .model_selection import GridSearchResult, HyperGrid, aggregate_runs, grid_search_async
from .oracle import FAMILY_ORDER, FeatureFamily, OracleReport, full_report, oracle_frame, reference_note
from .penalty import LossKind
from .report_observer import ReportObserver
from .sampler import Dataset, EncodingConfig, make_dataset
from .trainer import Method, TrainConfig, restore_model


logger = logging.getLogger(__name__)

Command = Literal["oracle-table", "sweep-rho", "sweep-interp", "train", "compare"]
COMMANDS: Tuple[str, ...] = ("oracle-table", "sweep-rho", "sweep-interp", "train", "compare")
ORACLE_METHOD = "oracle"


class ExperimentConfig(BaseModel):
    """一次命令执行的完整解析配置"""

    model_config = ConfigDict(frozen=True)

    command: Command
    rho_grid: Tuple[float, ...]
    compare_rhos: Tuple[float, ...] = (0.8, 0.85, 0.9)
    w_plus_grid: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    p_ye_grid: Tuple[float, ...] = (0.5, 0.7, 0.9)
    test_specs: Tuple[Literal["cmnist_plus", "cmnist"], ...] = ("cmnist_plus",)
    methods: Tuple[Method, ...] = tuple(Method)
    balanced: Optional[bool] = None
    dataset_settings: Dict[str, Any] = Field(default_factory=dict)
    encoding: EncodingConfig = EncodingConfig()
    n_per_env: int = Field(default=25000, ge=0)
    train_ratio: float = Field(default=0.8, gt=0.0, lt=1.0)
    train: TrainConfig = TrainConfig()
    grid: HyperGrid = HyperGrid()
    use_grid_search: bool = True
    output_dir: str = "results"
    root_seed: int = 0
    jobs: int = Field(default=1, ge=1)
    render_plots: bool = False
    run_diagnostics: bool = True
    probe_bins: int = Field(default=16, ge=1)

    @field_validator("rho_grid", "compare_rhos", "w_plus_grid", "p_ye_grid", "methods", "test_specs")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("列表不能为空")
        return value

    @property
    def seeds(self) -> List[int]:
        return [self.root_seed + i for i in range(self.train.runs)]

    @property
    def effective_grid(self) -> HyperGrid:
        if self.use_grid_search:
            return self.grid
        return HyperGrid(alpha_grid=(self.train.alpha,), beta_grid=(self.train.beta,),
                         k_irm_grid=(self.train.k_irm,))

    @classmethod
    def from_config(cls, config: Dict[str, Any], command: str,
                    overrides: Optional[Dict[str, Any]] = None) -> "ExperimentConfig":
        """
        由合并后的配置与命令行覆盖值构造

        Args:
            config: ConfigValidator.load_config 的结果
            command: 命令名
            overrides: rho / w_plus / p_ye / method / balanced / test_spec / k_irm / seed / jobs / out

        Returns:
            实验配置
        """
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        ds = dict(config["dataset_settings"])
        ts = config["train_settings"]
        gs = config["grid_settings"]
        cs = config["cdm_settings"]
        es = config["experiment_settings"]

        rho_grid = tuple(overrides["rho"]) if "rho" in overrides else tuple(ds["rho_grid"])
        compare_rhos = tuple(overrides["rho"]) if "rho" in overrides else tuple(ds["compare_rhos"])
        if "rho" in overrides:
            ds["rho"] = overrides["rho"][0]
        w_plus_grid = tuple(overrides["w_plus"]) if "w_plus" in overrides else tuple(ds["w_plus_grid"])
        p_ye_grid = tuple(overrides["p_ye"]) if "p_ye" in overrides else tuple(ds["p_ye_grid"])
        if "w_plus" in overrides:
            ds["w_plus"] = overrides["w_plus"][0]
        if "p_ye" in overrides:
            ds["p_ye"] = overrides["p_ye"][0]

        if "test_spec" in overrides:
            test_specs = ("cmnist_plus", "cmnist") if overrides["test_spec"] == "both" \
                else (overrides["test_spec"],)
        elif command == "sweep-interp":
            test_specs = ("cmnist_plus", "cmnist")
        else:
            test_specs = (ds["test_spec"],)

        methods = tuple(Method(m) for m in overrides.get("method", es["methods"]))

        k_irm = ts["k_irm"]
        k_irm_grid = tuple(gs["k_irm_grid"])
        if "k_irm" in overrides:
            k_irm = overrides["k_irm"]
            k_irm_grid = (overrides["k_irm"],)

        train = TrainConfig(
            method=methods[0],
            loss_kind=LossKind(ts["loss_kind"]),
            alpha=ts["alpha"],
            beta=ts["beta"],
            k_irm=k_irm,
            d_steps=ts["d_steps"],
            lr=ts["lr"],
            d_lr=ts["d_lr"],
            iterations=ts["iterations"],
            batch_size=ts["batch_size"],
            seed=overrides.get("seed", es["root_seed"]),
            runs=ts["runs"],
            hidden=tuple(ts["hidden"]),
            activation=ts["activation"],
            optimizer=ts["optimizer"],
            discriminator_hidden=cs["discriminator_hidden"],
            checkpoint_every=ts["checkpoint_every"],
            per_instance_penalty=ts["per_instance_penalty"],
            dummy_on=ts["dummy_on"],
            rescale_large_penalty=ts["rescale_large_penalty"],
            val_loss_includes_penalty=ts["val_loss_includes_penalty"],
            select_after_k_irm=ts["select_after_k_irm"],
            reset_optimizer_at_k_irm=ts["reset_optimizer_at_k_irm"],
            kernel_multipliers=tuple(cs["kernel_multipliers"]),
            normalized_pairs=cs["normalized_pairs"],
            mmd_max_group_size=cs["mmd_max_group_size"],
            gamma_source=cs["gamma_source"],
        )
        return cls(
            command=command,
            rho_grid=rho_grid,
            compare_rhos=compare_rhos,
            w_plus_grid=w_plus_grid,
            p_ye_grid=p_ye_grid,
            test_specs=test_specs,
            methods=methods,
            balanced=overrides.get("balanced"),
            dataset_settings=ds,
            encoding=EncodingConfig(**config["encoding_settings"]),
            n_per_env=ds["n_per_env"],
            train_ratio=ds["train_ratio"],
            train=train,
            grid=HyperGrid(alpha_grid=tuple(gs["alpha_grid"]), beta_grid=tuple(gs["beta_grid"]),
                           k_irm_grid=k_irm_grid),
            use_grid_search=gs["use_grid_search"],
            output_dir=overrides.get("out", es["output_dir"]),
            root_seed=overrides.get("seed", es["root_seed"]),
            jobs=overrides.get("jobs", es["jobs"]),
            render_plots=es["render_plots"],
            run_diagnostics=es["run_diagnostics"],
            probe_bins=es["probe_bins"],
        )


class ExperimentRunner:
    """按命令执行实验并写出结果文件"""

    def __init__(self, exp: ExperimentConfig, observer: Optional[ReportObserver] = None):
        """
        Args:
            exp: 实验配置
            observer: 终端报告（可选）
        """
        self.exp = exp
        self.observer = observer
        self.logger = logging.getLogger(__name__)
        self.out_dir = Path(exp.output_dir)
        self.written: List[str] = []
        self.spec_digests: Dict[str, str] = {}

    def run(self) -> Dict[str, Any]:
        """
        执行配置中的命令

        Returns:
            {"command", "files", "manifest"}；有观察器时另含 "observer_log"
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        handlers = {
            "oracle-table": self.run_oracle_table,
            "sweep-rho": lambda: asyncio.run(self.run_sweep_rho()),
            "sweep-interp": lambda: asyncio.run(self.run_sweep_interp()),
            "compare": lambda: asyncio.run(self.run_compare()),
            "train": lambda: asyncio.run(self.run_train()),
        }
        handlers[self.exp.command]()
        manifest = self._write_manifest()
        result = {"command": self.exp.command, "files": list(self.written), "manifest": manifest}
        if self.observer:
            # observer.log 与结果文件放在一起，不计入 manifest
            result["observer_log"] = self.observer.save_report_log(str(self.out_dir))
        return result

    # ---------- oracle ----------

    def run_oracle_table(self) -> pd.DataFrame:
        """
        ρ 网格 × 平衡设定的解析准确率表

        Returns:
            宽表：每个 (ρ, balanced) 一行
        """
        balanced_modes = (False, True) if self.exp.balanced is None else (self.exp.balanced,)
        reports: List[OracleReport] = []
        for rho in self.exp.rho_grid:
            spec = require_valid(self._plus_spec(rho), min_train_envs=2)
            self.spec_digests[f"cmnist_plus_{rho:g}"] = spec.digest()
            for balanced in balanced_modes:
                reports.append(full_report(spec, balanced))

        long_frame = oracle_frame(reports)
        wide = oracle_wide_frame(reports)
        self._write_csv(long_frame, "oracle_long.csv")
        self._write_csv(wide, "oracle_table.csv")
        if self.observer:
            self.observer.display_oracle_table(long_frame)
        return wide

    # ---------- 训练类命令 ----------

    def _plus_spec(self, rho: float) -> DatasetSpec:
        settings = {**self.exp.dataset_settings, "family": "cmnist_plus"}
        return spec_from_settings(settings, rho=rho)

    def _dataset(self, spec: DatasetSpec, key: str) -> Dataset:
        spec = require_valid(spec, min_train_envs=1)
        self.spec_digests[key] = spec.digest()
        return make_dataset(spec, self.exp.n_per_env, self.exp.root_seed, self.exp.encoding,
                            self.exp.train_ratio)

    async def _search(self, ds: Dataset, method: Method,
                      semaphore: asyncio.Semaphore) -> GridSearchResult:
        base = self.exp.train.model_copy(update={"method": method})
        return await grid_search_async(ds, base, self.exp.effective_grid, self.exp.seeds,
                                       semaphore=semaphore)

    async def _method_rows(self, ds: Dataset, labels: Dict[str, Any],
                           semaphore: asyncio.Semaphore) -> Tuple[List[Dict[str, Any]], List[Dict[str, Any]]]:
        """对所有方法做网格搜索，返回 (趋势行, 逐次运行行)"""
        searches = await asyncio.gather(*[self._search(ds, m, semaphore) for m in self.exp.methods])
        trend, runs = [], []
        for method, search in zip(self.exp.methods, searches):
            best_runs = search.best_runs
            agg = aggregate_runs(best_runs) if best_runs else None
            point = search.best_point
            trend.append({
                "method": method.value,
                **labels,
                "alpha": point.alpha if point else None,
                "beta": point.beta if point else None,
                "k_irm": point.k_irm if point else None,
                "mean_test_acc": agg.mean_test_acc if agg else float("nan"),
                "std_test_acc": agg.std_test_acc if agg else float("nan"),
                "mean_val_acc": agg.mean_val_acc if agg else float("nan"),
                "n_runs": agg.n_runs if agg else 0,
                "n_failed": agg.n_failed if agg else len(self.exp.seeds),
            })
            for run in best_runs:
                runs.append({**labels, **run.summary()})
        return trend, runs

    def _oracle_row(self, spec: DatasetSpec, labels: Dict[str, Any]) -> Dict[str, Any]:
        shape_test = full_report(spec).accuracies[FeatureFamily.SHAPE][1]
        return {
            "method": ORACLE_METHOD, **labels, "alpha": None, "beta": None, "k_irm": None,
            "mean_test_acc": shape_test, "std_test_acc": 0.0, "mean_val_acc": shape_test,
            "n_runs": 0, "n_failed": 0,
        }

    async def run_sweep_rho(self) -> pd.DataFrame:
        """
        每个 (方法, ρ) 的平均测试准确率，附带解析 Oracle 线

        Returns:
            趋势表
        """
        semaphore = asyncio.Semaphore(self.exp.jobs)
        trend, runs = [], []
        for rho in self.exp.rho_grid:
            spec = self._plus_spec(rho)
            ds = self._dataset(spec, f"cmnist_plus_{rho:g}")
            t, r = await self._method_rows(ds, {"rho": rho}, semaphore)
            trend.extend(t)
            runs.extend(r)
            trend.append(self._oracle_row(spec, {"rho": rho}))

        frame = _sorted(pd.DataFrame(trend), ["method", "rho"])
        self._write_csv(frame, "sweep_rho_trend.csv")
        self._write_csv(_sorted(pd.DataFrame(runs), ["method", "rho", "seed"]), "sweep_rho_summary.csv")
        self._maybe_plot(frame, "rho", "sweep_rho.svg")
        if self.observer:
            self.observer.display_summary(frame, "ρ 扫描", ["method", "rho", "mean_test_acc", "std_test_acc"])
        return frame

    async def run_sweep_interp(self) -> pd.DataFrame:
        """
        (w_plus, p_ye, 测试环境) 网格上的平均测试准确率

        Returns:
            趋势表
        """
        semaphore = asyncio.Semaphore(self.exp.jobs)
        trend, runs = [], []
        for test_spec in self.exp.test_specs:
            for w_plus in self.exp.w_plus_grid:
                for p_ye in self.exp.p_ye_grid:
                    settings = {**self.exp.dataset_settings, "family": "interpolated", "test_spec": test_spec}
                    spec = spec_from_settings(settings, w_plus=w_plus, p_ye=p_ye)
                    labels = {"w_plus": w_plus, "p_ye": p_ye, "test_spec": test_spec}
                    ds = self._dataset(spec, f"interp_{w_plus:g}_{p_ye:g}_{test_spec}")
                    t, r = await self._method_rows(ds, labels, semaphore)
                    trend.extend(t)
                    runs.extend(r)

        frame = _sorted(pd.DataFrame(trend), ["test_spec", "method", "p_ye", "w_plus"])
        self._write_csv(frame, "sweep_interp_trend.csv")
        self._write_csv(_sorted(pd.DataFrame(runs), ["test_spec", "method", "p_ye", "w_plus", "seed"]),
                        "sweep_interp_summary.csv")
        self._maybe_plot(frame, "w_plus", "sweep_interp.svg")
        if self.observer:
            self.observer.display_summary(frame, "w_plus 插值扫描",
                                          ["test_spec", "method", "p_ye", "w_plus", "mean_test_acc"])
        return frame

    async def run_compare(self) -> pd.DataFrame:
        """
        方法 × ρ 的平均测试准确率对比表（含 Oracle 行）

        Returns:
            宽表：每个方法一行，每个 ρ 一列
        """
        semaphore = asyncio.Semaphore(self.exp.jobs)
        trend = []
        for rho in self.exp.compare_rhos:
            spec = self._plus_spec(rho)
            ds = self._dataset(spec, f"cmnist_plus_{rho:g}")
            t, _ = await self._method_rows(ds, {"rho": rho}, semaphore)
            trend.extend(t)
            trend.append(self._oracle_row(spec, {"rho": rho}))

        long_frame = _sorted(pd.DataFrame(trend), ["method", "rho"])
        order = [m.value for m in self.exp.methods] + [ORACLE_METHOD]
        wide = long_frame.pivot(index="method", columns="rho", values="mean_test_acc")
        seeds = long_frame.pivot(index="method", columns="rho", values="n_runs")
        wide.columns = [f"rho_{c:g}" for c in wide.columns]
        seeds.columns = [f"n_{c:g}" for c in seeds.columns]
        table = wide.join(seeds).reindex(order).reset_index()

        self._write_csv(long_frame, "compare_long.csv")
        self._write_csv(table, "compare_table.csv")
        if self.observer:
            self.observer.display_summary(table, "方法对比")
        return table

    async def run_train(self) -> pd.DataFrame:
        """
        单个方法的训练（网格搜索或固定超参数），写出汇总与逐迭代日志

        Returns:
            逐次运行汇总（附探针列）
        """
        method = self.exp.methods[0]
        spec = spec_from_settings(self.exp.dataset_settings)
        ds = self._dataset(spec, "train")
        search = await self._search(ds, method, asyncio.Semaphore(self.exp.jobs))
        if search.best_point is None:
            raise LabError(f"{method.display_name} 所有网格点都失败")

        rows, iterations = [], []
        for run in search.best_runs:
            row = {"rho": spec.rho, **run.summary()}
            if self.exp.run_diagnostics and not run.failed:
                model = restore_model(run, ds.features.shape[1])
                row.update(diagnose(model, ds, self.exp.probe_bins, run.seed).to_row())
            rows.append(row)
            for log_row in run.log.rows:
                iterations.append({"seed": run.seed, **log_row})
            if self.observer:
                self.observer.display_run_result(run)

        frame = _sorted(pd.DataFrame(rows), ["seed"])
        self._write_csv(frame, "train_summary.csv")
        self._write_csv(pd.DataFrame(iterations), "train_iterations.csv")
        return frame

    # ---------- 输出 ----------

    def _write_csv(self, frame: pd.DataFrame, name: str) -> str:
        path = self.out_dir / name
        frame.to_csv(path, index=False, float_format="%.6f")
        self.written.append(str(path))
        self.logger.info(f"已写出: {path}")
        return str(path)

    def _write_manifest(self) -> str:
        path = self.out_dir / "manifest.json"
        manifest = {
            "version": __version__,
            "command": self.exp.command,
            "config": json.loads(self.exp.model_dump_json()),
            "spec_digests": dict(sorted(self.spec_digests.items())),
            "files": sorted(Path(p).name for p in self.written),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False, sort_keys=True)
        return str(path)

    def _maybe_plot(self, frame: pd.DataFrame, x: str, name: str) -> Optional[str]:
        if not self.exp.render_plots or frame.empty:
            return None
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        plt.rcParams["svg.hashsalt"] = "irm-lab"
        group_keys = [k for k in ("test_spec", "p_ye") if k in frame.columns]
        fig, ax = plt.subplots(figsize=(6, 4))
        for key, part in frame.groupby(["method"] + group_keys, sort=True):
            key = key if isinstance(key, tuple) else (key,)
            part = part.sort_values(x)
            ax.plot(part[x], part["mean_test_acc"], marker="o", label=" ".join(str(k) for k in key))
        ax.set_xlabel(x)
        ax.set_ylabel("test accuracy")
        ax.legend(fontsize="small")
        path = self.out_dir / name
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        self.written.append(str(path))
        return str(path)


def oracle_wide_frame(reports: Sequence[OracleReport]) -> pd.DataFrame:
    """每个 (ρ, balanced) 一行，各特征族的验证/测试准确率与获胜者"""
    rows = []
    for report in reports:
        row: Dict[str, Any] = {"rho": report.rho, "balanced": report.balanced}
        for family in FAMILY_ORDER:
            val, test = report.accuracies[family]
            row[f"{family.value}_val"] = val
            row[f"{family.value}_test"] = test
        row["winners"] = "|".join(f.value for f in FAMILY_ORDER if f in report.winners)
        row["note"] = reference_note(report)
        rows.append(row)
    return pd.DataFrame(rows)


def _sorted(frame: pd.DataFrame, keys: List[str]) -> pd.DataFrame:
    keys = [k for k in keys if k in frame.columns]
    if frame.empty or not keys:
        return frame
    return frame.sort_values(keys, kind="mergesort").reset_index(drop=True)


def run_command(config: Dict[str, Any], command: str, overrides: Optional[Dict[str, Any]] = None,
                observer: Optional[ReportObserver] = None) -> Dict[str, Any]:
    """构造实验配置并执行命令"""
    if command not in COMMANDS:
        raise SpecValidationError(f"未知的命令: {command}")
    exp = ExperimentConfig.from_config(config, command, overrides)
    return ExperimentRunner(exp, observer).run()

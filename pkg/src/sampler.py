"""
数据采样器
按数据规格生成带种子的有限数据集，编码特征向量，划分训练/验证，并可做类别平衡
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from .dataset_spec import COLOR_NAMES, DatasetSpec, EnvironmentSpec, EnvRole
from .errors import SamplerError


logger = logging.getLogger(__name__)

SPLIT_TRAIN = 0
SPLIT_VAL = 1
SPLIT_TEST = 2
SPLIT_NAMES = {SPLIT_TRAIN: "train", SPLIT_VAL: "val", SPLIT_TEST: "test"}

DEFAULT_N_PER_ENV = 25000
DEFAULT_TRAIN_RATIO = 0.8

# 各阶段使用独立的随机流，切换某一阶段不会扰动其他阶段
STREAM_IDS = {
    "labels": 0,
    "flips": 1,
    "colors": 2,
    "shape_noise": 3,
    "splits": 4,
    "balancing": 5,
    "init": 6,
    "batches": 7,
}


def named_stream(seed: int, name: str) -> np.random.Generator:
    """由根种子派生命名随机流"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_IDS[name]]))


class EncodingConfig(BaseModel):
    """特征编码：颜色独热（宽3）在前，形状通道在后"""

    model_config = ConfigDict(frozen=True)

    shape_encoding: Literal["exact", "noisy"] = "exact"
    shape_noise_sigma: float = Field(default=0.0, ge=0.0)

    @property
    def width(self) -> int:
        return len(COLOR_NAMES) + 1


@dataclass(frozen=True)
class Instance:
    """单个样本"""
    y_star: int
    y: int
    e: int
    c: str
    s: float
    features: Tuple[float, ...]


@dataclass(frozen=True)
class Dataset:
    """
    列式存储的数据集

    每一行是一个样本；origin 指向原始行，类别平衡产生的复制行与原行共享 origin。
    """
    y_star: np.ndarray
    y: np.ndarray
    e: np.ndarray
    c: np.ndarray
    s: np.ndarray
    features: np.ndarray
    split: np.ndarray
    origin: np.ndarray
    train_env_ids: Tuple[int, ...]
    test_env_id: int
    spec_digest: str
    seed: int
    encoding: EncodingConfig
    warnings: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def mask(self, env_id: Optional[int] = None, split: Optional[int] = None) -> np.ndarray:
        selected = np.ones(len(self), dtype=bool)
        if env_id is not None:
            selected &= self.e == env_id
        if split is not None:
            selected &= self.split == split
        return selected

    def env_arrays(self, env_id: int, split: int) -> Dict[str, np.ndarray]:
        """
        取某环境某划分的数组

        Args:
            env_id: 环境编号
            split: SPLIT_TRAIN / SPLIT_VAL / SPLIT_TEST

        Returns:
            {"features", "y", "y_star", "c"}
        """
        selected = self.mask(env_id, split)
        return {
            "features": self.features[selected],
            "y": self.y[selected],
            "y_star": self.y_star[selected],
            "c": self.c[selected],
        }

    def instances(self, env_id: int) -> Iterator[Instance]:
        for i in np.flatnonzero(self.e == env_id):
            yield Instance(
                y_star=int(self.y_star[i]),
                y=int(self.y[i]),
                e=int(self.e[i]),
                c=COLOR_NAMES[int(self.c[i])],
                s=float(self.s[i]),
                features=tuple(float(v) for v in self.features[i]),
            )

    def count(self, env_id: int, split: Optional[int] = None) -> int:
        return int(self.mask(env_id, split).sum())

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "y_star": self.y_star,
            "y": self.y,
            "e": self.e,
            "c": [COLOR_NAMES[int(c)] for c in self.c],
            "s": self.s,
            "split": [SPLIT_NAMES[int(s)] for s in self.split],
        })
        for k in range(self.features.shape[1]):
            frame[f"feature_{k}"] = self.features[:, k]
        return frame


def _encode(c: np.ndarray, s: np.ndarray) -> np.ndarray:
    one_hot = np.eye(len(COLOR_NAMES))[c]
    return np.hstack([one_hot, s[:, None]])


def _draw_colors(rng: np.random.Generator, env: EnvironmentSpec, y: np.ndarray) -> np.ndarray:
    u = rng.random(y.shape[0])
    c = np.zeros(y.shape[0], dtype=np.int64)
    for label in (0, 1):
        selected = y == label
        cumulative = np.cumsum(env.color_row(label))[:-1]
        c[selected] = (u[selected][:, None] >= cumulative[None, :]).sum(axis=1)
    return c


def sample_dataset(spec: DatasetSpec, n_per_env: int, seed: int,
                   enc: Optional[EncodingConfig] = None) -> Dataset:
    """
    按规格生成数据集

    每个环境抽取 n_per_env 个样本：先按 P(Y|E) 抽观测标签，再以对称翻转得到无噪声标签，
    联合分布与“按Y*生成、翻转、再按Y分配环境”的流程一致；随后按 P(C|Y,E) 上色，
    形状通道取无噪声标签。训练环境的样本初始都在训练划分中。

    Args:
        spec: 数据规格
        n_per_env: 每个环境的样本数
        seed: 根种子
        enc: 特征编码

    Returns:
        数据集
    """
    if n_per_env < 0:
        raise SamplerError(f"n_per_env必须非负，实际为{n_per_env}")
    enc = enc or EncodingConfig()

    rng_labels = named_stream(seed, "labels")
    rng_flips = named_stream(seed, "flips")
    rng_colors = named_stream(seed, "colors")
    rng_noise = named_stream(seed, "shape_noise")

    columns: Dict[str, List[np.ndarray]] = {k: [] for k in ("y_star", "y", "e", "c", "s", "split")}
    warnings: List[str] = []

    for env in spec.environments:
        y = (rng_labels.random(n_per_env) < env.p_y1).astype(np.int64)
        flips = rng_flips.random(n_per_env) < spec.flip_rate
        y_star = np.where(flips, 1 - y, y)
        c = _draw_colors(rng_colors, env, y)

        s = y_star.astype(np.float64)
        if enc.shape_encoding == "noisy":
            s = s + rng_noise.normal(0.0, enc.shape_noise_sigma, size=n_per_env)

        if n_per_env > 0:
            for label in (0, 1):
                if env.p_label(label) > 0.0 and not np.any(y == label):
                    message = f"(Y={label}, E={env.env_id}) 单元为空"
                    warnings.append(message)
                    logger.warning(f"样本量过小: {message}")

        split_code = SPLIT_TEST if env.role == EnvRole.TEST else SPLIT_TRAIN
        columns["y_star"].append(y_star)
        columns["y"].append(y)
        columns["e"].append(np.full(n_per_env, env.env_id, dtype=np.int64))
        columns["c"].append(c)
        columns["s"].append(s)
        columns["split"].append(np.full(n_per_env, split_code, dtype=np.int64))

    merged = {k: np.concatenate(v) if v else np.zeros(0) for k, v in columns.items()}
    total = merged["y"].shape[0]
    logger.info(f"采样完成: {len(spec.environments)}个环境，共{total}个样本，seed={seed}")

    return Dataset(
        y_star=merged["y_star"].astype(np.int64),
        y=merged["y"].astype(np.int64),
        e=merged["e"].astype(np.int64),
        c=merged["c"].astype(np.int64),
        s=merged["s"].astype(np.float64),
        features=_encode(merged["c"].astype(np.int64), merged["s"].astype(np.float64)),
        split=merged["split"].astype(np.int64),
        origin=np.arange(total, dtype=np.int64),
        train_env_ids=tuple(spec.train_env_ids),
        test_env_id=spec.test_env.env_id,
        spec_digest=spec.digest(),
        seed=seed,
        encoding=enc,
        warnings=tuple(warnings),
    )


def split_train_val(ds: Dataset, ratio: float = DEFAULT_TRAIN_RATIO, seed: int = 0) -> Dataset:
    """
    在每个训练环境内随机划分训练/验证

    Args:
        ds: 数据集
        ratio: 训练比例，取值 (0, 1)
        seed: 种子

    Returns:
        重新划分后的数据集
    """
    if not 0.0 < ratio < 1.0:
        raise SamplerError(f"划分比例必须在(0, 1)内，实际为{ratio}")

    rng = named_stream(seed, "splits")
    split = ds.split.copy()
    for env_id in ds.train_env_ids:
        rows = np.flatnonzero(ds.e == env_id)
        order = rng.permutation(rows)
        n_train = int(round(ratio * rows.shape[0]))
        split[order[:n_train]] = SPLIT_TRAIN
        split[order[n_train:]] = SPLIT_VAL
    return replace(ds, split=split)


def make_dataset(spec: DatasetSpec, n_per_env: int = DEFAULT_N_PER_ENV, seed: int = 0,
                 enc: Optional[EncodingConfig] = None, ratio: float = DEFAULT_TRAIN_RATIO) -> Dataset:
    """采样并划分"""
    return split_train_val(sample_dataset(spec, n_per_env, seed, enc), ratio, seed)


def _take(ds: Dataset, rows: np.ndarray) -> Dict[str, np.ndarray]:
    return {
        name: getattr(ds, name)[rows]
        for name in ("y_star", "y", "e", "c", "s", "features", "split", "origin")
    }


def balance_labels(ds: Dataset, seed: int = 0) -> Dataset:
    """
    在每个训练环境的训练划分内过采样少数类，使两类数量相等

    Args:
        ds: 数据集
        seed: 种子

    Returns:
        平衡后的数据集（验证与测试不变）
    """
    rng = named_stream(seed, "balancing")
    extra_rows: List[np.ndarray] = []
    for env_id in ds.train_env_ids:
        rows = np.flatnonzero(ds.mask(env_id, SPLIT_TRAIN))
        positives = rows[ds.y[rows] == 1]
        negatives = rows[ds.y[rows] == 0]
        if positives.size == 0 or negatives.size == 0:
            raise SamplerError(f"训练环境E={env_id}缺少某一类别，无法平衡")
        minority, majority = sorted((positives, negatives), key=lambda r: r.size)
        deficit = majority.size - minority.size
        if deficit > 0:
            extra_rows.append(rng.choice(minority, size=deficit, replace=True))
            logger.debug(f"E={env_id}: 复制{deficit}个少数类样本")

    if not extra_rows:
        return ds

    extra = np.concatenate(extra_rows)
    base = _take(ds, np.arange(len(ds)))
    added = _take(ds, extra)
    merged = {name: np.concatenate([base[name], added[name]]) for name in base}
    return replace(ds, **merged)


@dataclass(frozen=True)
class EmpiricalTables:
    """
    频率估计

    color_tables 中空的条件单元为 None，并记录在 flagged 中。
    """
    env_ids: Tuple[int, ...]
    train_env_ids: Tuple[int, ...]
    test_env_id: int
    p_y1: Dict[int, Optional[float]]
    color_tables: Dict[int, Tuple[Optional[Tuple[float, ...]], Optional[Tuple[float, ...]]]]
    env_prior: Dict[int, float]
    flip_rate: float
    counts: Dict[Tuple[int, int], int] = field(default_factory=dict)
    flagged: Tuple[str, ...] = ()

    def to_spec(self) -> DatasetSpec:
        """把估计值转回数据规格，供Oracle复算"""
        if self.flagged:
            raise SamplerError(f"存在空的条件单元，无法构造规格: {list(self.flagged)}")
        environments = tuple(
            EnvironmentSpec(
                env_id=env_id,
                role=EnvRole.TEST if env_id == self.test_env_id else EnvRole.TRAIN,
                p_y1=self.p_y1[env_id],
                color_table=self.color_tables[env_id],
            )
            for env_id in self.env_ids
        )
        return DatasetSpec(
            environments=environments,
            env_prior=tuple(self.env_prior[env_id] for env_id in self.train_env_ids),
            flip_rate=self.flip_rate,
        )


def empirical_distributions(ds: Dataset, include_duplicates: bool = False) -> EmpiricalTables:
    """
    估计 P(Y|E)、P(C|Y,E) 与训练环境的 P(E)

    Args:
        ds: 非空数据集
        include_duplicates: 是否计入类别平衡产生的复制行

    Returns:
        频率估计表
    """
    if len(ds) == 0:
        raise SamplerError("空数据集无法估计分布")

    rows = np.ones(len(ds), dtype=bool)
    if not include_duplicates:
        rows = ds.origin == np.arange(len(ds))
    y, e, c = ds.y[rows], ds.e[rows], ds.c[rows]

    env_ids = tuple(ds.train_env_ids) + (ds.test_env_id,)
    p_y1: Dict[int, Optional[float]] = {}
    tables: Dict[int, tuple] = {}
    counts: Dict[Tuple[int, int], int] = {}
    flagged: List[str] = []

    for env_id in env_ids:
        in_env = e == env_id
        n_env = int(in_env.sum())
        if n_env == 0:
            flagged.append(f"E={env_id}")
            p_y1[env_id] = None
            tables[env_id] = (None, None)
            continue
        p_y1[env_id] = float(y[in_env].mean())
        table_rows = []
        for label in (1, 0):
            cell = in_env & (y == label)
            n_cell = int(cell.sum())
            counts[(env_id, label)] = n_cell
            if n_cell == 0:
                flagged.append(f"(E={env_id}, Y={label})")
                table_rows.append(None)
                continue
            freq = np.bincount(c[cell], minlength=len(COLOR_NAMES)) / n_cell
            table_rows.append(tuple(float(v) for v in freq))
        tables[env_id] = tuple(table_rows)

    train_counts = {env_id: int((e == env_id).sum()) for env_id in ds.train_env_ids}
    n_train = sum(train_counts.values())
    env_prior = {env_id: (n / n_train if n_train else 0.0) for env_id, n in train_counts.items()}

    if flagged:
        logger.warning(f"经验分布存在空单元: {flagged}")

    return EmpiricalTables(
        env_ids=env_ids,
        train_env_ids=tuple(ds.train_env_ids),
        test_env_id=ds.test_env_id,
        p_y1=p_y1,
        color_tables=tables,
        env_prior=env_prior,
        flip_rate=float(np.mean(ds.y_star[rows] != y)),
        counts=counts,
        flagged=tuple(flagged),
    )


def save_dataset(ds: Dataset, out_dir: str, name: str = "dataset") -> Dict[str, str]:
    """
    保存为列式CSV和附带的清单文件

    Returns:
        {"csv": 路径, "manifest": 路径}
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    manifest_path = out / f"{name}.manifest.json"

    ds.to_frame().to_csv(csv_path, index=False)
    manifest = {
        "spec_digest": ds.spec_digest,
        "seed": ds.seed,
        "encoding": ds.encoding.model_dump(),
        "train_env_ids": list(ds.train_env_ids),
        "test_env_id": ds.test_env_id,
        "rows": len(ds),
        "warnings": list(ds.warnings),
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    logger.info(f"数据集已保存到: {csv_path}")
    return {"csv": str(csv_path), "manifest": str(manifest_path)}

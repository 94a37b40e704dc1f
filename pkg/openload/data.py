"""
OpenLoad 数据模块
智能电表数据的读取与准备：时间戳解码、夏令时修复、3 小时降采样、电表过滤、
数据集划分，以及处理后数据集文件的读写
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from datetime import date, timedelta
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from openload.errors import ConfigError, DataError
from openload.kernels import HOLIDAY_CLASS, CalendarArrays

logger = logging.getLogger(__name__)

# CER 约定: 第 1 天 = 2009-01-01
EPOCH = date(2009, 1, 1)
HALF_HOURS_PER_DAY = 48
HALF_HOURS_PER_SLOT = 6
SLOTS_PER_DAY = HALF_HOURS_PER_DAY // HALF_HOURS_PER_SLOT
SLOT_HOURS = 3.0
MAX_HALF_HOUR = 50
# 三位日序 + 两位半小时序号，日序不足三位时补零
TIMESTAMP_RE = re.compile(r"\d{5}")

SLOTS_FILE = "slots.csv"
METERS_FILE = "meters.csv"
OBSERVATIONS_FILE = "observations.csv"


class MeterGroup(str, Enum):
    """电表用户分组"""
    RESIDENTIAL = "Residential"
    SME = "SME"
    OTHERS = "Others"

    @classmethod
    def parse(cls, value: str) -> "MeterGroup":
        for g in cls:
            if g.value.lower() == str(value).strip().lower():
                return g
        raise DataError(f"未知的电表分组: {value!r}，可选: {[g.value for g in cls]}")


class DayKind(str, Enum):
    """按夏令时切换划分的日期类型"""
    NORMAL = "normal"
    DST_START = "dst_start"
    DST_END = "dst_end"


# ==================== 数据类型 ====================

@dataclass(eq=False)
class ObservationMatrix:
    """
    ℓ×m 需求矩阵 Y 与观测掩码 M（True = 已观测）
    未观测位置的 Y 一律存 0
    """
    Y: np.ndarray
    M: np.ndarray

    def __post_init__(self) -> None:
        self.Y = np.asarray(self.Y, dtype=float)
        self.M = np.asarray(self.M, dtype=bool)
        if self.Y.ndim != 2 or self.Y.shape != self.M.shape:
            raise DataError(f"Y 与 M 形状不一致: {self.Y.shape} vs {self.M.shape}")
        bad = self.M & ~np.isfinite(self.Y)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DataError(f"任务 {j} 在时段 {i} 的读数不是有限值: {self.Y[i, j]}")
        self.Y = np.where(self.M, self.Y, 0.0)

    @classmethod
    def full(cls, Y: np.ndarray) -> "ObservationMatrix":
        """全观测矩阵"""
        Y = np.asarray(Y, dtype=float)
        return cls(Y, np.ones(Y.shape, dtype=bool))

    @property
    def n_slots(self) -> int:
        return self.Y.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.Y.shape[1]

    @property
    def observed_count(self) -> int:
        return int(self.M.sum())

    @property
    def sparsity(self) -> float:
        """缺失比例"""
        return 1.0 - self.observed_count / self.M.size if self.M.size else 0.0

    def take_rows(self, idx) -> "ObservationMatrix":
        return ObservationMatrix(self.Y[idx], self.M[idx])

    def take_cols(self, idx) -> "ObservationMatrix":
        return ObservationMatrix(self.Y[:, idx], self.M[:, idx])

    def check_nonnegative(self, task_ids: Sequence[str] | None = None) -> None:
        bad = self.M & (self.Y < 0)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            name = task_ids[j] if task_ids is not None else j
            raise DataError(f"电表 {name} 在时段 {i} 的读数为负: {self.Y[i, j]}")


@dataclass
class SplitSpec:
    """训练/验证/测试时段划分，对所有电表相同"""
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int
    train_days: int
    validation_fraction: float

    @property
    def fit(self) -> np.ndarray:
        """训练 ∪ 验证（重新拟合用）"""
        return np.union1d(self.train, self.validation)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train_days": self.train_days,
            "validation_fraction": self.validation_fraction,
            "n_train": int(self.train.size),
            "n_validation": int(self.validation.size),
            "n_test": int(self.test.size),
        }


@dataclass
class MeterDataset:
    """电表 × 时段数据集"""
    meter_ids: list[str]
    groups: list[MeterGroup]
    slots: pd.DataFrame  # slot_index, date, slot_of_day, t, d, c
    observations: ObservationMatrix

    def __post_init__(self) -> None:
        if len(set(self.meter_ids)) != len(self.meter_ids):
            raise DataError("电表 ID 重复")
        if len(self.groups) != len(self.meter_ids):
            raise DataError("电表分组数量与电表数量不一致")
        if self.observations.Y.shape != (len(self.slots), len(self.meter_ids)):
            raise DataError(
                f"观测矩阵形状 {self.observations.Y.shape} 与 "
                f"{len(self.slots)} 个时段 × {len(self.meter_ids)} 个电表不一致"
            )
        idx = self.slots["slot_index"].to_numpy()
        if idx.size > 1 and not np.all(np.diff(idx) > 0):
            raise DataError("slot_index 必须严格递增")
        if len(self.slots) % SLOTS_PER_DAY:
            raise DataError(f"时段数 {len(self.slots)} 不是每天 {SLOTS_PER_DAY} 个时段的整数倍")
        self.observations.check_nonnegative(self.meter_ids)

    @property
    def n_meters(self) -> int:
        return len(self.meter_ids)

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def n_days(self) -> int:
        return self.n_slots // SLOTS_PER_DAY

    @property
    def points(self) -> CalendarArrays:
        return CalendarArrays(
            t=self.slots["t"].to_numpy(dtype=float),
            d=self.slots["d"].to_numpy(dtype=float),
            c=self.slots["c"].to_numpy(dtype=np.int64),
        )

    def group_columns(self, groups: Iterable[str | MeterGroup] | None) -> np.ndarray:
        """属于给定分组的电表列索引；None 或空表示全部"""
        wanted = {MeterGroup.parse(g) if not isinstance(g, MeterGroup) else g for g in (groups or [])}
        if not wanted:
            return np.arange(self.n_meters)
        return np.array([j for j, g in enumerate(self.groups) if g in wanted], dtype=np.int64)

    def select_meters(self, columns: np.ndarray) -> "MeterDataset":
        columns = np.asarray(columns, dtype=np.int64)
        return MeterDataset(
            meter_ids=[self.meter_ids[j] for j in columns],
            groups=[self.groups[j] for j in columns],
            slots=self.slots,
            observations=self.observations.take_cols(columns),
        )

    def summary(self) -> pd.DataFrame:
        """各分组的电表数与缺失比例（%）"""
        rows = []
        for g in MeterGroup:
            cols = self.group_columns([g])
            if cols.size == 0:
                continue
            sub = self.observations.take_cols(cols)
            rows.append({"group": g.value, "meters": int(cols.size), "sparsity_pct": 100.0 * sub.sparsity})
        return pd.DataFrame(rows, columns=["group", "meters", "sparsity_pct"])


@dataclass
class RejectionReport:
    """电表过滤与逐记录错误的统计"""
    removed_meters: dict[str, str] = field(default_factory=dict)
    dropped_records: dict[str, int] = field(default_factory=dict)

    def drop(self, reason: str, count: int) -> None:
        if count:
            self.dropped_records[reason] = self.dropped_records.get(reason, 0) + int(count)

    def lines(self) -> list[str]:
        out = [f"移除电表 {meter}: {reason}" for meter, reason in sorted(self.removed_meters.items())]
        out += [f"丢弃记录 {count} 条: {reason}" for reason, count in sorted(self.dropped_records.items())]
        return out


# ==================== 时间戳与日历 ====================

def decode_timestamp(code: int | str) -> tuple[int, int]:
    """
    五位时间戳解码: 前三位为日序（1 = 2009-01-01，写作 00101），后两位为半小时序号
    此阶段接受半小时序号 1..50，夏令时修复在后续步骤
    """
    text = code.strip() if isinstance(code, str) else f"{int(code):05d}"
    if not TIMESTAMP_RE.fullmatch(text):
        raise DataError(f"时间戳必须是五位数: {code}")
    day, half_hour = divmod(int(text), 100)
    if day < 1:
        raise DataError(f"时间戳 {text} 的日序无效: {day}")
    if not 1 <= half_hour <= MAX_HALF_HOUR:
        raise DataError(f"时间戳 {text} 的半小时序号无效: {half_hour}")
    return day, half_hour


def day_to_date(day: int) -> date:
    return EPOCH + timedelta(days=int(day) - 1)


def day_kind(day_date: date, dst_start: set[date], dst_end: set[date]) -> DayKind:
    if day_date in dst_start:
        return DayKind.DST_START
    if day_date in dst_end:
        return DayKind.DST_END
    return DayKind.NORMAL


def calendar_slots(first: date, n_days: int, holidays: Iterable[date] = ()) -> pd.DataFrame:
    """连续 n_days 天、每天 8 个 3 小时时段的时段表"""
    holidays = set(holidays)
    rows = []
    for offset in range(n_days):
        day_date = first + timedelta(days=offset)
        c = HOLIDAY_CLASS if day_date in holidays else day_date.weekday()
        d = day_date.timetuple().tm_yday
        for s in range(SLOTS_PER_DAY):
            rows.append((offset * SLOTS_PER_DAY + s, day_date.isoformat(), s, SLOT_HOURS * s + SLOT_HOURS / 2, d, c))
    return pd.DataFrame(rows, columns=["slot_index", "date", "slot_of_day", "t", "d", "c"])


# ==================== 夏令时修复与降采样 ====================

def _repair_frame(records: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    records: meter_id, day, half_hour, value, kind
    返回 (修复并合并重复后的记录, 被拒绝的记录)
    """
    hh = records["half_hour"].to_numpy()
    is_end = (records["kind"] == DayKind.DST_END.value).to_numpy()
    limit = np.where(is_end, MAX_HALF_HOUR, HALF_HOURS_PER_DAY)
    invalid = (hh < 1) | (hh > limit)
    rejected = records[invalid]
    kept = records[~invalid].copy()

    # 夏令时结束日: 1..4 不变，5,6 -> 3,4，k>=7 -> k-2
    end_rows = (kept["kind"] == DayKind.DST_END.value) & (kept["half_hour"] > 4)
    kept.loc[end_rows, "half_hour"] = kept.loc[end_rows, "half_hour"] - 2
    merged = (
        kept.groupby(["meter_id", "day", "half_hour"], sort=True, as_index=False)["value"].mean()
    )
    return merged, rejected


def _downsample_frame(records: pd.DataFrame) -> pd.DataFrame:
    """按 3 小时窗口求可用读数的均值: meter_id, day, slot, value"""
    out = records.assign(slot=(records["half_hour"] - 1) // HALF_HOURS_PER_SLOT)
    return out.groupby(["meter_id", "day", "slot"], sort=True, as_index=False)["value"].mean()


def _day_frame(day_records: Sequence[tuple[int, float]], kind: DayKind) -> pd.DataFrame:
    hh = [int(h) for h, _ in day_records]
    values = [float(v) for _, v in day_records]
    return pd.DataFrame({
        "meter_id": "_", "day": 0, "half_hour": pd.Series(hh, dtype=np.int64),
        "value": pd.Series(values, dtype=float), "kind": kind.value,
    })


def repair_dst(day_records: Sequence[tuple[int, float]], kind: DayKind | str) -> list[tuple[int, float]]:
    """
    修复单日记录的半小时序号，结果落在 [1, 48]
    normal/dst_start 原样通过（dst_start 缺少 3、4 属正常），dst_end 按 1,2,3,4,3,4,5,6,... 重映射并平均重复项
    """
    kind = DayKind(kind)
    merged, rejected = _repair_frame(_day_frame(day_records, kind))
    if len(rejected):
        raise DataError(f"{kind.value} 日存在无效的半小时序号: {sorted(rejected['half_hour'].tolist())}")
    return [(int(h), float(v)) for h, v in zip(merged["half_hour"], merged["value"])]


def downsample_3h(records: Sequence[tuple[int, float]]) -> list[Optional[float]]:
    """
    单日半小时记录 -> 8 个 3 小时时段均值；无可用读数的时段为 None（缺失）
    时段 s 覆盖半小时 6s+1 … 6s+6
    """
    frame = _day_frame(records, DayKind.NORMAL)
    if ((frame["half_hour"] < 1) | (frame["half_hour"] > HALF_HOURS_PER_DAY)).any():
        raise DataError("降采样前半小时序号必须在 [1, 48] 内")
    out: list[Optional[float]] = [None] * SLOTS_PER_DAY
    for s, v in zip(*(_downsample_frame(frame)[["slot", "value"]].to_numpy().T)):
        out[int(s)] = float(v)
    return out


# ==================== 电表过滤 ====================

def filter_meters(raw: pd.DataFrame) -> tuple[pd.DataFrame, RejectionReport]:
    """移除含有半小时序号 > 50 的电表"""
    report = RejectionReport()
    too_late = raw["half_hour"] > MAX_HALF_HOUR
    bad = raw.loc[too_late].groupby("meter_id")["half_hour"].max()
    for meter, worst in bad.items():
        report.removed_meters[str(meter)] = f"半小时序号 {int(worst)} > {MAX_HALF_HOUR}"
    kept = raw[~raw["meter_id"].isin(bad.index)]
    if len(bad):
        logger.warning(f"已移除 {len(bad)} 个含有半小时序号 > {MAX_HALF_HOUR} 的电表")
    return kept, report


# ==================== 文件读取 ====================

def read_raw(path: str | Path) -> pd.DataFrame:
    """
    读取原始读数文件: 每行 `meter_id SEP code SEP value`，SEP 为空白或逗号
    返回列 line, meter_id, day, half_hour, value（half_hour 尚未校验范围）
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"原始数据文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        first = next((line for line in f if line.strip()), "")
    sep = "," if "," in first else r"\s+"
    try:
        raw = pd.read_csv(
            path, sep=sep, header=None, names=["meter_id", "code", "value"],
            dtype=str, skip_blank_lines=False, engine="c",
        )
    except pd.errors.ParserError as e:
        raise DataError(f"原始数据文件解析失败: {e}") from e

    raw["line"] = np.arange(1, len(raw) + 1)
    for col in ["meter_id", "code", "value"]:
        raw[col] = raw[col].str.strip()
    blank = raw[["meter_id", "code", "value"]].isna().all(axis=1)
    raw = raw[~blank]
    partial = raw[["meter_id", "code", "value"]].isna().any(axis=1)
    if partial.any():
        line = int(raw.loc[partial, "line"].iloc[0])
        raise DataError(f"第 {line} 行: 字段数量不足，需要 meter_id、时间戳和读数")

    bad_code = ~raw["code"].str.fullmatch(TIMESTAMP_RE.pattern)
    if bad_code.any():
        row = raw[bad_code].iloc[0]
        raise DataError(f"第 {int(row['line'])} 行: 时间戳必须是五位数: {row['code']!r}")
    bad_day = raw["code"].str[:3] == "000"
    if bad_day.any():
        row = raw[bad_day].iloc[0]
        raise DataError(f"第 {int(row['line'])} 行: 时间戳 {row['code']} 的日序无效: 0")

    values = pd.to_numeric(raw["value"], errors="coerce")
    bad_value = values.isna() | ~np.isfinite(values) | (values < 0)
    if bad_value.any():
        row = raw[bad_value].iloc[0]
        raise DataError(f"第 {int(row['line'])} 行: 读数无效: {row['value']!r}")

    codes = raw["code"].astype(np.int64).to_numpy()
    return pd.DataFrame({
        "line": raw["line"].to_numpy(),
        "meter_id": raw["meter_id"].to_numpy(),
        "day": codes // 100,
        "half_hour": codes % 100,
        "value": values.to_numpy(dtype=float),
    })


def read_groups(path: str | Path | None) -> dict[str, MeterGroup]:
    """读取 `meter_id,group` 分组文件"""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise DataError(f"分组文件不存在: {path}")
    frame = pd.read_csv(path, header=None, names=["meter_id", "group"], dtype=str, skipinitialspace=True)
    if len(frame) and frame.iloc[0]["meter_id"].strip().lower() == "meter_id":
        frame = frame.iloc[1:]
    return {str(m).strip(): MeterGroup.parse(g) for m, g in zip(frame["meter_id"], frame["group"])}


def read_holidays(path: str | Path | None) -> set[date]:
    """读取节假日文件，每行一个 ISO 日期"""
    if path is None:
        return set()
    path = Path(path)
    if not path.exists():
        raise DataError(f"节假日文件不存在: {path}")
    out = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                out.add(date.fromisoformat(line))
            except ValueError as e:
                raise DataError(f"节假日文件第 {lineno} 行日期无效: {line!r}") from e
    return out


# ==================== 数据集构建 ====================

def build_dataset(
    raw: pd.DataFrame,
    groups: dict[str, MeterGroup] | None = None,
    holidays: Iterable[date] = (),
    dst_start_dates: Iterable[date] = (),
    dst_end_dates: Iterable[date] = (),
) -> tuple[MeterDataset, RejectionReport]:
    """
    原始记录 -> MeterDataset
    步骤: 过滤电表 -> 夏令时修复 -> 3 小时降采样 -> 对齐到连续的时段表
    """
    groups = groups or {}
    kept, report = filter_meters(raw)
    if kept.empty:
        raise DataError("过滤后没有剩余数据")

    report.drop("半小时序号为 0", int((kept["half_hour"] == 0).sum()))
    kept = kept[kept["half_hour"] > 0]

    days = kept["day"].to_numpy()
    unique_days = np.unique(days)
    start, end = set(dst_start_dates), set(dst_end_dates)
    kinds = {int(day): day_kind(day_to_date(day), start, end).value for day in unique_days}
    kept = kept.assign(kind=[kinds[int(d)] for d in days])

    repaired, rejected = _repair_frame(kept[["meter_id", "day", "half_hour", "value", "kind"]])
    report.drop("非夏令时结束日的半小时序号 > 48", len(rejected))
    slots_frame = _downsample_frame(repaired)

    first_day, last_day = int(unique_days.min()), int(unique_days.max())
    n_days = last_day - first_day + 1
    slots = calendar_slots(day_to_date(first_day), n_days, holidays)

    meter_ids = sorted(slots_frame["meter_id"].astype(str).unique())
    col_of = pd.Index(meter_ids)
    rows = (slots_frame["day"].to_numpy() - first_day) * SLOTS_PER_DAY + slots_frame["slot"].to_numpy()
    cols = col_of.get_indexer(slots_frame["meter_id"].astype(str))

    Y = np.zeros((len(slots), len(meter_ids)))
    M = np.zeros_like(Y, dtype=bool)
    Y[rows, cols] = slots_frame["value"].to_numpy()
    M[rows, cols] = True

    dataset = MeterDataset(
        meter_ids=meter_ids,
        groups=[groups.get(m, MeterGroup.OTHERS) for m in meter_ids],
        slots=slots,
        observations=ObservationMatrix(Y, M),
    )
    logger.info(f"数据集已构建: {dataset.n_meters} 个电表, {dataset.n_slots} 个时段 ({n_days} 天)")
    return dataset, report


def make_split(
    dataset: MeterDataset | int,
    train_days: int,
    validation_fraction: float,
    seed: int,
) -> SplitSpec:
    """
    前 train_days 天的时段按种子均匀抽取验证集（所有电表相同），其余为训练集；之后的时段为测试集
    """
    n_slots = dataset if isinstance(dataset, int) else dataset.n_slots
    count = train_days * SLOTS_PER_DAY
    if train_days < 1 or count > n_slots:
        raise ConfigError(f"训练天数 {train_days} 超出数据集范围 ({n_slots // SLOTS_PER_DAY} 天)")
    if not 0.0 <= validation_fraction < 1.0:
        raise ConfigError(f"验证集比例必须在 [0, 1) 内: {validation_fraction}")

    n_val = int(math.floor(validation_fraction * count + 0.5))
    rng = np.random.default_rng(seed)
    validation = np.sort(rng.choice(count, size=n_val, replace=False)).astype(np.int64)
    train = np.setdiff1d(np.arange(count, dtype=np.int64), validation)
    test = np.arange(count, n_slots, dtype=np.int64)
    if test.size == 0:
        logger.warning("测试集为空：训练天数覆盖了全部数据")
    return SplitSpec(train=train, validation=validation, test=test, seed=seed,
                     train_days=train_days, validation_fraction=validation_fraction)


# ==================== 数据集文件 ====================

def write_dataset(dataset: MeterDataset, out_dir: str | Path, float_format: str = "%.6f") -> Path:
    """写出 slots.csv / meters.csv / observations.csv"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    dataset.slots.to_csv(out / SLOTS_FILE, index=False, lineterminator="\n")
    pd.DataFrame({
        "meter_id": dataset.meter_ids,
        "group": [g.value for g in dataset.groups],
    }).to_csv(out / METERS_FILE, index=False, lineterminator="\n")

    obs = dataset.observations
    rows, cols = np.nonzero(obs.M)
    slot_index = dataset.slots["slot_index"].to_numpy()
    pd.DataFrame({
        "slot_index": slot_index[rows],
        "meter_id": np.asarray(dataset.meter_ids, dtype=object)[cols],
        "value": obs.Y[rows, cols],
    }).to_csv(out / OBSERVATIONS_FILE, index=False, float_format=float_format, lineterminator="\n")
    logger.info(f"数据集已写出: {out} ({rows.size} 条观测)")
    return out


def read_dataset(in_dir: str | Path) -> MeterDataset:
    """读取处理后的数据集目录"""
    root = Path(in_dir)
    for name in (SLOTS_FILE, METERS_FILE, OBSERVATIONS_FILE):
        if not (root / name).exists():
            raise DataError(f"数据集文件缺失: {root / name}")

    slots = pd.read_csv(root / SLOTS_FILE, dtype={"date": str})
    meters = pd.read_csv(root / METERS_FILE, dtype=str, keep_default_na=False)
    obs = pd.read_csv(root / OBSERVATIONS_FILE, dtype={"meter_id": str}, keep_default_na=False)

    meter_ids = meters["meter_id"].tolist()
    rows = pd.Index(slots["slot_index"]).get_indexer(obs["slot_index"])
    cols = pd.Index(meter_ids).get_indexer(obs["meter_id"])
    if (rows < 0).any():
        raise DataError(f"observations.csv 含有未知的 slot_index: {obs['slot_index'][rows < 0].iloc[0]}")
    if (cols < 0).any():
        raise DataError(f"observations.csv 含有未知的电表: {obs['meter_id'][cols < 0].iloc[0]}")

    Y = np.zeros((len(slots), len(meter_ids)))
    M = np.zeros_like(Y, dtype=bool)
    if np.unique(rows.astype(np.int64) * len(meter_ids) + cols).size != len(obs):
        raise DataError("observations.csv 含有重复的 (slot_index, meter_id)")
    Y[rows, cols] = pd.to_numeric(obs["value"], errors="coerce").to_numpy(dtype=float)
    M[rows, cols] = True

    return MeterDataset(
        meter_ids=meter_ids,
        groups=[MeterGroup.parse(g) for g in meters["group"]],
        slots=slots,
        observations=ObservationMatrix(Y, M),
    )


def dataset_digest(in_dir: str | Path) -> str:
    """三个数据集文件的 SHA-256 摘要"""
    h = hashlib.sha256()
    for name in (SLOTS_FILE, METERS_FILE, OBSERVATIONS_FILE):
        h.update(name.encode())
        h.update((Path(in_dir) / name).read_bytes())
    return h.hexdigest()

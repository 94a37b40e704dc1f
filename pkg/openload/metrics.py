"""
OpenLoad 预测精度评估
按时段计算分组聚合 MAPE 与 NMAE，并在测试期内汇总均值与标准差
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

logger = logging.getLogger(__name__)

ALL_GROUP = "all"
GROUP_ORDER = [ALL_GROUP, "Residential", "SME", "Others"]
METRICS = ["NMAE", "MAPE"]
REPORT_COLUMNS = ["group", "metric", "mean", "std", "evaluated_slots", "skipped_slots"]

# 表格中分组的显示名
GROUP_TITLES = {ALL_GROUP: "Overall", "Residential": "Residential", "SME": "SME", "Others": "Others"}


def _group_sums(Y: np.ndarray, M: np.ndarray, F: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """逐时段的 Σy、Σf、Σ|y-f| 与观测电表数，只计入 M = 1 的位置"""
    M = np.asarray(M, dtype=bool)
    Y = np.where(M, Y, 0.0)
    F = np.where(M, F, 0.0)
    return Y.sum(axis=1), F.sum(axis=1), np.abs(Y - F).sum(axis=1), M.sum(axis=1)


def slot_metrics(Y: np.ndarray, M: np.ndarray, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    所有时段的 (MAPE, NMAE)，未定义的时段为 NaN
    输入为 时段 × 分组电表 的矩阵
    """
    sum_y, sum_f, abs_err, n_obs = _group_sums(Y, M, F)
    defined = (n_obs > 0) & (sum_y != 0)
    denom = np.where(defined, sum_y, 1.0)
    mape = np.where(defined, 100.0 * np.abs(sum_y - sum_f) / denom, np.nan)
    nmae = np.where(defined, abs_err / denom, np.nan)
    return mape, nmae


def slot_mape(i: int, group: Sequence[int], Y: np.ndarray, M: np.ndarray, F: np.ndarray) -> Optional[float]:
    """第 i 个时段、给定电表列上的聚合 MAPE；分组无观测或需求和为 0 时返回 None"""
    cols = np.asarray(group, dtype=np.int64)
    mape, _ = slot_metrics(Y[i:i + 1, cols], M[i:i + 1, cols], F[i:i + 1, cols])
    return None if np.isnan(mape[0]) else float(mape[0])


def slot_nmae(i: int, group: Sequence[int], Y: np.ndarray, M: np.ndarray, F: np.ndarray) -> Optional[float]:
    """第 i 个时段、给定电表列上的 NMAE；未定义条件同 slot_mape"""
    cols = np.asarray(group, dtype=np.int64)
    _, nmae = slot_metrics(Y[i:i + 1, cols], M[i:i + 1, cols], F[i:i + 1, cols])
    return None if np.isnan(nmae[0]) else float(nmae[0])


@dataclass
class MetricRow:
    group: str
    metric: str
    mean: Optional[float]
    std: Optional[float]
    evaluated_slots: int
    skipped_slots: int

    @property
    def available(self) -> bool:
        return self.evaluated_slots > 0


def summarize(values: Iterable[Optional[float]], group: str = ALL_GROUP, metric: str = "NMAE") -> MetricRow:
    """已定义时段上的均值与总体标准差；None/NaN 计为跳过"""
    arr = np.array([np.nan if v is None else v for v in values], dtype=float)
    defined = arr[~np.isnan(arr)]
    skipped = int(arr.size - defined.size)
    if defined.size == 0:
        return MetricRow(group, metric, None, None, 0, skipped)
    return MetricRow(group, metric, float(defined.mean()), float(defined.std(ddof=0)), int(defined.size), skipped)


@dataclass
class MetricsReport:
    """(分组, 指标) -> 汇总行"""
    rows: list[MetricRow] = field(default_factory=list)

    def get(self, group: str, metric: str) -> MetricRow:
        for row in self.rows:
            if row.group == group and row.metric == metric:
                return row
        raise KeyError(f"报告中没有 {group}/{metric}")

    @property
    def groups(self) -> list[str]:
        return list(dict.fromkeys(row.group for row in self.rows))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(row) for row in self.rows], columns=REPORT_COLUMNS)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, na_rep="NA", float_format="%.6f", lineterminator="\n")
        return path

    def to_table(self, title: str = "预测精度") -> Table:
        table = Table(title=title)
        table.add_column("Group")
        for metric in METRICS:
            table.add_column(f"{metric} mean", justify="right")
            table.add_column(f"{metric} std", justify="right")
        table.add_column("slots (eval/skip)", justify="right")
        for group in self.groups:
            cells = [GROUP_TITLES.get(group, group)]
            counts = ""
            for metric in METRICS:
                row = self.get(group, metric)
                cells += [_fmt(row.mean), _fmt(row.std)]
                counts = f"{row.evaluated_slots}/{row.skipped_slots}"
            table.add_row(*cells, counts)
        return table


def _fmt(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.4f}"


def evaluate_forecast(
    Y: np.ndarray,
    M: np.ndarray,
    F: np.ndarray,
    meter_groups: Sequence[str],
    groups: Optional[Iterable[str]] = None,
) -> MetricsReport:
    """
    对每个分组 ∈ {all, Residential, SME, Others} ∩ groups 计算两项指标
    Y/M/F 只包含需要评估的时段行；meter_groups 给出每一列的分组名
    """
    requested = GROUP_ORDER if not groups else [g for g in GROUP_ORDER if g.lower() in {x.lower() for x in groups}]
    labels = np.asarray([str(g) for g in meter_groups], dtype=object)
    report = MetricsReport()
    for group in requested:
        cols = np.arange(labels.size) if group == ALL_GROUP else np.flatnonzero(labels == group)
        if cols.size == 0:
            logger.info(f"分组 {group} 没有电表，跳过")
            continue
        mape, nmae = slot_metrics(Y[:, cols], M[:, cols], F[:, cols])
        report.rows.append(summarize(nmae, group, "NMAE"))
        report.rows.append(summarize(mape, group, "MAPE"))
    return report


def render_comparison(reports: Mapping[tuple[str, str], MetricsReport], console: Optional[Console] = None,
                      families: Optional[Mapping[tuple[str, str], str]] = None) -> None:
    """
    每个分组一张表，列为 Method | Kernel | NMAE/MAPE 的均值与标准差
    reports 的键为 (方法, 核标签)；给出 families 时同一族的行放在同一节
    """
    console = console or Console()
    groups = list(dict.fromkeys(g for rep in reports.values() for g in rep.groups))
    for group in groups:
        table = Table(title=f"{GROUP_TITLES.get(group, group)} accuracy")
        table.add_column("Method")
        table.add_column("Kernel")
        for metric in METRICS:
            table.add_column(f"{metric} mean", justify="right")
            table.add_column(f"{metric} std", justify="right")
        family = None
        for (method, kernel), rep in reports.items():
            if group not in rep.groups:
                continue
            if families:
                current = families.get((method, kernel))
                if family is not None and current != family:
                    table.add_section()
                family = current
            cells = [method, kernel]
            for metric in METRICS:
                row = rep.get(group, metric)
                cells += [_fmt(row.mean), _fmt(row.std)]
            table.add_row(*cells)
        console.print(table)

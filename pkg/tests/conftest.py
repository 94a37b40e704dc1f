"""
测试共用夹具
"""

from __future__ import annotations

import numpy as np
import pytest

from openload.data import build_dataset, read_raw
from openload.kernels import CalendarArrays
from openload.synth import synth_gen


def random_points(n: int, seed: int = 0, n_classes: int = 7) -> CalendarArrays:
    """随机日历点，t 取 3 小时时段中点"""
    rng = np.random.default_rng(seed)
    return CalendarArrays(
        t=rng.integers(0, 8, size=n) * 3.0 + 1.5,
        d=rng.integers(1, 367, size=n).astype(float),
        c=rng.integers(0, n_classes, size=n),
    )


def write_raw(path, records, sep=" ") -> None:
    """写原始读数文件，records 为 (meter_id, day, half_hour, value)"""
    with open(path, "w", encoding="utf-8") as f:
        for meter, day, hh, value in records:
            f.write(f"{meter}{sep}{day:03d}{hh:02d}{sep}{value}\n")


def raw_fixture_records() -> list[tuple[str, int, int, float]]:
    """
    三个电表、2009-10-24 .. 2009-10-26 三天（第 297..299 天，第 298 天为夏令时结束日）
    电表 1002 在第 297 天缺少前 12 个半小时；电表 1003 含有序号 51，应被移除
    """
    records = []
    for meter in ("1001", "1002", "1003"):
        for day in (297, 298, 299):
            n = 50 if day == 298 else 48
            for hh in range(1, n + 1):
                if meter == "1002" and day == 297 and hh <= 12:
                    continue
                records.append((meter, day, hh, round(0.1 * hh + (day - 297), 3)))
    records.append(("1003", 299, 51, 0.5))
    return records


@pytest.fixture
def raw_file(tmp_path):
    path = tmp_path / "raw.txt"
    write_raw(path, raw_fixture_records())
    return path


@pytest.fixture
def groups_file(tmp_path):
    path = tmp_path / "groups.csv"
    path.write_text("meter_id,group\n1001,Residential\n1002,SME\n1003,Others\n", encoding="utf-8")
    return path


@pytest.fixture
def raw_dataset(raw_file, groups_file):
    from openload.config import IRELAND_DST_END, IRELAND_DST_START
    from openload.data import read_groups

    dataset, report = build_dataset(
        read_raw(raw_file), groups=read_groups(groups_file),
        dst_start_dates=IRELAND_DST_START, dst_end_dates=IRELAND_DST_END,
    )
    return dataset, report


@pytest.fixture
def small_dataset():
    """10 个电表、40 天的合成数据集"""
    return synth_gen(
        {"Residential": 4, "SME": 3, "Others": 3},
        n_days=40, rank_r=2, noise_sigma=0.02, missing_rate=0.1, seed=1,
    )

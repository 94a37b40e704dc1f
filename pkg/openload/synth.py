"""
OpenLoad 合成数据生成
r 个潜在负荷曲线 g_k(t, d, c) = 日内形状 × 年内形状 × 日类型水平，
各电表以非负权重混合，加高斯噪声后截断为非负，并按比例随机置缺失
"""

from __future__ import annotations

import logging
from datetime import date
from typing import Iterable, Mapping

import numpy as np

from openload.data import (
    EPOCH,
    MeterDataset,
    MeterGroup,
    ObservationMatrix,
    calendar_slots,
)
from openload.errors import ConfigError
from openload.kernels import DAY_PERIOD, HOURS_PER_DAY, N_WEEKDAYS

logger = logging.getLogger(__name__)

# 2009-07-14，CER 数据的第 195 天
DEFAULT_START = date(2009, 7, 14)

# 各分组的平均负荷尺度（kWh / 3 小时时段）
GROUP_SCALE = {
    MeterGroup.RESIDENTIAL: 1.0,
    MeterGroup.SME: 3.0,
    MeterGroup.OTHERS: 1.5,
}

_ID_PREFIX = {MeterGroup.RESIDENTIAL: "R", MeterGroup.SME: "S", MeterGroup.OTHERS: "O"}


def _latent_profiles(rng: np.random.Generator, rank_r: int, t: np.ndarray, d: np.ndarray,
                     c: np.ndarray) -> np.ndarray:
    """ℓ×r 潜在曲线矩阵，所有取值为正"""
    n_classes = N_WEEKDAYS + 1
    profiles = np.empty((t.size, rank_r))
    for k in range(rank_r):
        a, b = rng.uniform(0.2, 0.5), rng.uniform(0.1, 0.3)
        phase_a, phase_b = rng.uniform(0, HOURS_PER_DAY, size=2)
        daily = (1.0 + a * np.cos(2 * np.pi * (t - phase_a) / HOURS_PER_DAY)
                 + b * np.cos(4 * np.pi * (t - phase_b) / HOURS_PER_DAY))

        amp, phase_d = rng.uniform(0.1, 0.4), rng.uniform(1, DAY_PERIOD)
        yearly = 1.0 + amp * np.cos(2 * np.pi * (d - phase_d) / DAY_PERIOD)

        # 工作日 (0..4) 水平为 1，周末与节假日较低
        level = np.ones(n_classes)
        level[5:] = rng.uniform(0.6, 0.85, size=n_classes - 5)
        profiles[:, k] = daily * yearly * level[c]
    return profiles


def synth_gen(
    m_per_group: Mapping[str | MeterGroup, int],
    n_days: int,
    rank_r: int,
    noise_sigma: float,
    missing_rate: float,
    seed: int,
    start_date: date = DEFAULT_START,
    holidays: Iterable[date] = (),
    weight_jitter: float = 0.3,
) -> MeterDataset:
    """
    生成合成数据集，给定种子时结果确定
    同一分组的电表共享一组基础权重，再乘以 exp(weight_jitter · N(0,1)) 的个体扰动
    """
    counts = {MeterGroup.parse(g) if not isinstance(g, MeterGroup) else g: int(n) for g, n in m_per_group.items()}
    if any(n < 0 for n in counts.values()):
        raise ConfigError(f"各分组电表数必须非负: {dict(m_per_group)}")
    if n_days < 1:
        raise ConfigError(f"天数必须为正数: {n_days}")
    if rank_r < 1:
        raise ConfigError(f"潜在曲线个数必须为正数: {rank_r}")
    if not 0.0 <= missing_rate < 1.0:
        raise ConfigError(f"缺失比例必须在 [0, 1) 内: {missing_rate}")
    if noise_sigma < 0 or weight_jitter < 0:
        raise ConfigError("noise_sigma 与 weight_jitter 必须非负")
    if start_date < EPOCH:
        raise ConfigError(f"起始日期不能早于 {EPOCH}")

    rng = np.random.default_rng(seed)
    slots = calendar_slots(start_date, n_days, holidays)
    G = _latent_profiles(
        rng, rank_r,
        slots["t"].to_numpy(dtype=float), slots["d"].to_numpy(dtype=float), slots["c"].to_numpy(dtype=np.int64),
    )

    meter_ids: list[str] = []
    groups: list[MeterGroup] = []
    weights: list[np.ndarray] = []
    for g in MeterGroup:
        n = counts.get(g, 0)
        if n == 0:
            continue
        base = rng.gamma(2.0, 0.5, size=rank_r) * GROUP_SCALE[g] / rank_r
        jitter = np.exp(weight_jitter * rng.standard_normal((n, rank_r)))
        weights.append(base * jitter)
        meter_ids += [f"{_ID_PREFIX[g]}{j + 1:04d}" for j in range(n)]
        groups += [g] * n

    W = np.vstack(weights) if weights else np.zeros((0, rank_r))
    Y = G @ W.T
    if noise_sigma > 0:
        Y = Y + noise_sigma * rng.standard_normal(Y.shape)
    Y = np.maximum(Y, 0.0)
    M = rng.random(Y.shape) >= missing_rate

    dataset = MeterDataset(meter_ids=meter_ids, groups=groups, slots=slots, observations=ObservationMatrix(Y, M))
    logger.info(
        f"合成数据集: {dataset.n_meters} 个电表, {dataset.n_slots} 个时段, 秩 {rank_r}, "
        f"缺失 {100 * dataset.observations.sparsity:.2f}%"
    )
    return dataset

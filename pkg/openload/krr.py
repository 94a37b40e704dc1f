"""
OpenLoad 独立核岭回归
每个电表单独求解 (K_ΩΩ + λI) c = y，即输出核 L = I 的单任务基线
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import linalg

from openload.data import ObservationMatrix
from openload.errors import ConfigError, NumericError
from openload.kernels import CalendarArrays, KernelExpr, Points, as_arrays, gram

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class KrrModel:
    """
    每个任务 j 保存其观测时段 Ω_j（共享时段列表的下标）与系数 c_j
    预测: f_j(x) = Σ_{i∈Ω_j} c_j[i] K(slots[i], x)
    """
    kernel: KernelExpr
    lam: float
    slots: CalendarArrays
    task_ids: list[str]
    support: list[np.ndarray]
    coefs: list[np.ndarray]
    empty_tasks: list[str] = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    @property
    def param_count(self) -> int:
        """Σ_j |Ω_j|"""
        return int(sum(c.size for c in self.coefs))


def observation_patterns(M: np.ndarray) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """按观测模式对任务分组，产出 (观测行下标, 任务列下标)"""
    M = np.asarray(M, dtype=bool)
    if M.shape[1] == 0:
        return
    packed = np.packbits(M.T, axis=1)
    _, first, inverse = np.unique(packed, axis=0, return_index=True, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for k in np.argsort(first):
        cols = np.flatnonzero(inverse == k)
        yield np.flatnonzero(M[:, cols[0]]), cols


def fit_krr(
    kernel: KernelExpr,
    slots: Points,
    Y: ObservationMatrix,
    lam: float,
    task_ids: Optional[Sequence[str]] = None,
    K: Optional[np.ndarray] = None,
) -> KrrModel:
    """
    独立核岭回归拟合
    观测模式相同的任务共用一次 Cholesky 分解；无观测的任务系数为空，预测为 0
    """
    if lam <= 0:
        raise ConfigError(f"lambda 必须为正数: {lam}")
    slots = as_arrays(slots)
    if K is None:
        K = gram(kernel, slots)
    if K.shape != (len(slots), len(slots)) or Y.n_slots != len(slots):
        raise ConfigError(f"维度不匹配: K {K.shape}, Y {Y.Y.shape}, 时段 {len(slots)}")
    m = Y.n_tasks
    task_ids = list(task_ids) if task_ids is not None else [str(j) for j in range(m)]

    support: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * m
    coefs: list[np.ndarray] = [np.empty(0)] * m
    empty: list[str] = []

    for idx, cols in observation_patterns(Y.M):
        if idx.size == 0:
            empty.extend(task_ids[j] for j in cols)
            continue
        system = K[np.ix_(idx, idx)].copy()
        system[np.diag_indices_from(system)] += lam
        try:
            factor = linalg.cho_factor(system, lower=True)
        except linalg.LinAlgError as e:
            raise NumericError(f"核岭回归方程组分解失败 (lambda={lam}): {e}") from e
        C = linalg.cho_solve(factor, Y.Y[np.ix_(idx, cols)])
        for k, j in enumerate(cols):
            support[j] = idx
            coefs[j] = np.ascontiguousarray(C[:, k])

    if empty:
        logger.warning(f"{len(empty)} 个任务没有任何观测，预测将为 0")
    logger.debug(f"核岭回归已拟合: {m} 个任务, lambda={lam:g}, 参数 {sum(c.size for c in coefs)} 个")
    return KrrModel(kernel=kernel, lam=lam, slots=slots, task_ids=task_ids,
                    support=support, coefs=coefs, empty_tasks=empty)


def predict_krr(model: KrrModel, query: Points, Kq: Optional[np.ndarray] = None) -> np.ndarray:
    """预测 ℓ'×m 矩阵，第 j 列为 K(query, slots[Ω_j]) c_j"""
    if Kq is None:
        Kq = gram(model.kernel, query, model.slots)
    out = np.zeros((Kq.shape[0], model.n_tasks))
    patterns: dict[bytes, list[int]] = {}
    for j, idx in enumerate(model.support):
        if idx.size:
            patterns.setdefault(idx.tobytes(), []).append(j)
    for cols in patterns.values():
        idx = model.support[cols[0]]
        C = np.column_stack([model.coefs[j] for j in cols])
        out[:, cols] = Kq[:, idx] @ C
    return out

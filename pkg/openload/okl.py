"""
OpenLoad 低秩输出核学习 (OKL)
联合学习各任务预测函数与任务相似度矩阵 L = B B^T (秩 <= p)

目标函数（L = B B^T, A = C B 代入后）:
    J(A, B) = Σ_{M=1} (Y - K A B^T)^2 + λ tr(A^T K A) + λ ||B||_F^2
其中 ||f||^2_{H_L} = tr(L C^T K C) = tr(A^T K A)，tr(L) = ||B||_F^2

交替最小化:
    A 步: 用当前预测填补缺失值 Ỹ，求解 K A (B^T B) + λ A = Ỹ B（Sylvester 型，K 的特征分解只做一次）
    B 步: 每个任务在自己的观测行上做岭回归，G = K A
填补步骤构成 J 的上界替代函数，因此每轮 J 单调不增
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from openload.data import ObservationMatrix
from openload.errors import ConfigError, NumericError
from openload.kernels import CalendarArrays, KernelExpr, Points, as_arrays, gram
from openload.krr import observation_patterns
from openload.numlin import clamp_psd, ridge_solve, solve_sylvester_ridge, sym_eig

logger = logging.getLogger(__name__)

__all__ = [
    "ObservationMatrix",
    "OklOptions",
    "OklModel",
    "okl_objective",
    "fit_okl",
    "predict_okl",
    "output_kernel",
    "latent_profiles",
]

# 目标函数上升超过该相对量视为内部错误
MONOTONE_RTOL = 1e-8


@dataclass(frozen=True)
class OklOptions:
    max_iters: int = 100
    rel_tol: float = 1e-6
    seed: int = 0


@dataclass(eq=False)
class OklModel:
    """f_j(x) = Σ_k B[j,k] g_k(x)，g_k(x) = Σ_i A[i,k] K(slots[i], x)"""
    kernel: KernelExpr
    lam: float
    rank_p: int
    slots: CalendarArrays
    A: np.ndarray
    B: np.ndarray
    task_ids: list[str]
    trace: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def n_tasks(self) -> int:
        return self.B.shape[0]

    @property
    def param_count(self) -> int:
        """(ℓ + m) p"""
        return int(self.A.size + self.B.size)


def okl_objective(A: np.ndarray, B: np.ndarray, K: np.ndarray, Y: np.ndarray, M: np.ndarray, lam: float) -> float:
    """J = Σ_{M=1} (Y - K A B^T)^2 + λ tr(A^T K A) + λ tr(B^T B)"""
    if lam <= 0:
        raise ConfigError(f"lambda 必须为正数: {lam}")
    KA = K @ A
    resid = np.where(M, Y - KA @ B.T, 0.0)
    value = float(np.sum(resid ** 2) + lam * np.sum(A * KA) + lam * np.sum(B ** 2))
    if not np.isfinite(value):
        raise NumericError("OKL 目标函数出现非有限值")
    return value


def _update_B(G: np.ndarray, obs: ObservationMatrix, lam: float) -> np.ndarray:
    """每个任务在其观测行上做岭回归；观测模式相同的任务一起求解"""
    B = np.zeros((obs.n_tasks, G.shape[1]))
    for idx, cols in observation_patterns(obs.M):
        if idx.size == 0:
            continue
        B[cols] = ridge_solve(G[idx], obs.Y[np.ix_(idx, cols)], lam).T
    return B


def fit_okl(
    kernel: KernelExpr,
    slots: Points,
    obs: ObservationMatrix,
    lam: float,
    rank_p: int,
    options: Optional[OklOptions] = None,
    task_ids: Optional[Sequence[str]] = None,
    K: Optional[np.ndarray] = None,
    init_B: Optional[np.ndarray] = None,
    fix_B: bool = False,
) -> OklModel:
    """
    块坐标下降拟合低秩 OKL
    init_B 覆盖随机初始化，fix_B=True 时跳过 B 步（用于 L = I 的等价性诊断）
    """
    options = options or OklOptions()
    if lam <= 0:
        raise ConfigError(f"lambda 必须为正数: {lam}")
    slots = as_arrays(slots)
    ell, m = obs.n_slots, obs.n_tasks
    if not 1 <= rank_p <= m:
        raise ConfigError(f"秩 p 必须在 [1, {m}] 内: {rank_p}")
    if K is None:
        K = gram(kernel, slots)
    if K.shape != (ell, ell) or len(slots) != ell:
        raise ConfigError(f"维度不匹配: K {K.shape}, Y {obs.Y.shape}, 时段 {len(slots)}")
    task_ids = list(task_ids) if task_ids is not None else [str(j) for j in range(m)]

    if init_B is not None:
        B = np.array(init_B, dtype=float)
        if B.shape != (m, rank_p):
            raise ConfigError(f"init_B 形状应为 {(m, rank_p)}，实际 {B.shape}")
    else:
        rng = np.random.default_rng(options.seed)
        B = rng.standard_normal((m, rank_p)) / np.sqrt(rank_p)
    A = np.zeros((ell, rank_p))

    Keig = clamp_psd(sym_eig(K))
    prev = okl_objective(A, B, K, obs.Y, obs.M, lam)
    trace: list[float] = []
    converged = False

    for it in range(1, options.max_iters + 1):
        # A 步
        Y_tilde = np.where(obs.M, obs.Y, (K @ A) @ B.T)
        BtB = B.T @ B
        Seig = sym_eig((BtB + BtB.T) / 2)
        A = solve_sylvester_ridge(Keig, Seig, lam, Y_tilde @ B)

        # B 步
        if not fix_B:
            B = _update_B(K @ A, obs, lam)

        value = okl_objective(A, B, K, obs.Y, obs.M, lam)
        if value > prev + MONOTONE_RTOL * abs(prev):
            raise NumericError(f"OKL 目标函数在第 {it} 轮上升: {prev:.10g} -> {value:.10g}")
        trace.append(value)
        logger.debug(f"OKL 第 {it} 轮: J = {value:.10g}")

        decrease = prev - value
        prev = value
        if decrease <= options.rel_tol * abs(value if value else 1.0):
            converged = True
            break

    logger.info(
        f"OKL 拟合完成: {m} 个任务, 秩 {rank_p}, lambda={lam:g}, {len(trace)} 轮, "
        f"J = {prev:.6g}{'' if converged else '（未达到收敛阈值）'}"
    )
    return OklModel(kernel=kernel, lam=lam, rank_p=rank_p, slots=slots, A=A, B=B,
                    task_ids=task_ids, trace=trace, converged=converged)


def latent_profiles(model: OklModel, query: Points, Kq: Optional[np.ndarray] = None) -> np.ndarray:
    """共享潜在函数 g_k 在查询点处的值: K(query, slots) A"""
    if Kq is None:
        Kq = gram(model.kernel, query, model.slots)
    return Kq @ model.A


def predict_okl(model: OklModel, query: Points, Kq: Optional[np.ndarray] = None) -> np.ndarray:
    """K(query, slots) A B^T"""
    return latent_profiles(model, query, Kq) @ model.B.T


def output_kernel(model: OklModel) -> np.ndarray:
    """L = B B^T"""
    return model.B @ model.B.T

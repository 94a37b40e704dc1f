"""
OpenLoad 稠密对称线性代数
对称特征分解、岭回归方程、OKL 中的 Sylvester 型更新
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from openload.errors import NumericError

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-12
# 相对最大特征值的截断阈值
PSD_CLAMP_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class SymEig:
    """S = Q diag(lam) Q^T，特征值升序"""
    Q: np.ndarray
    lam: np.ndarray

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.Q * self.lam) @ self.Q.T


def sym_eig(S: np.ndarray) -> SymEig:
    """对称矩阵特征分解"""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"需要方阵，实际形状 {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NumericError("输入矩阵含有非有限值")
    # 相对不对称度；全零矩阵的 scale 为 0，此时只接受严格对称
    scale = float(np.max(np.abs(S))) if S.size else 0.0
    if S.size and np.max(np.abs(S - S.T)) > SYMMETRY_RTOL * scale:
        raise ValueError("输入矩阵不对称")
    try:
        lam, Q = linalg.eigh(S)
    except linalg.LinAlgError as e:
        raise NumericError(f"特征分解不收敛: {e}") from e
    return SymEig(Q=Q, lam=lam)


def clamp_psd(eig: SymEig) -> SymEig:
    """把半正定矩阵因舍入产生的负特征值置零"""
    lam = eig.lam
    if lam.size == 0:
        return eig
    top = max(float(lam.max()), 0.0)
    if lam.min() < -PSD_CLAMP_RTOL * top:
        logger.warning(f"矩阵不是半正定的: 最小特征值 {lam.min():.3e}，最大特征值 {top:.3e}，已截断为 0")
    return SymEig(Q=eig.Q, lam=np.maximum(lam, 0.0))


def ridge_solve(G: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """
    求 b = argmin ||y - G b||^2 + lam ||b||^2，即 (G^T G + lam I) b = G^T y
    y 可以是多列右端项
    """
    if lam <= 0:
        raise ValueError(f"lam 必须为正数: {lam}")
    G = np.asarray(G, dtype=float)
    y = np.asarray(y, dtype=float)
    if G.shape[0] != y.shape[0]:
        raise ValueError(f"维度不匹配: G {G.shape}, y {y.shape}")
    H = G.T @ G
    H[np.diag_indices_from(H)] += lam
    return linalg.solve(H, G.T @ y, assume_a="pos")


def solve_sylvester_ridge(Keig: SymEig, Seig: SymEig, lam: float, R: np.ndarray) -> np.ndarray:
    """
    求解 K A S + lam A = R
    A = Q_K [ (Q_K^T R Q_S)_ij / (lam + mu_i nu_j) ] Q_S^T
    """
    if lam <= 0:
        raise ValueError(f"lam 必须为正数: {lam}")
    R = np.asarray(R, dtype=float)
    if R.shape != (Keig.n, Seig.n):
        raise ValueError(f"维度不匹配: R {R.shape}, K {Keig.n}x{Keig.n}, S {Seig.n}x{Seig.n}")
    Keig, Seig = clamp_psd(Keig), clamp_psd(Seig)
    denom = lam + np.outer(Keig.lam, Seig.lam)
    return Keig.Q @ ((Keig.Q.T @ R @ Seig.Q) / denom) @ Seig.Q.T

"""
OpenLoad 实验流程
协调数据、模型与评估：lambda 选择 -> 重新拟合 -> 预测 -> 评估，以及多模型对比
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from openload.artifacts import Model, ModelArtifact
from openload.config import AppConfig
from openload.data import SLOTS_PER_DAY, MeterDataset, ObservationMatrix, SplitSpec, make_split
from openload.errors import ConfigError, DataError
from openload.kernels import (
    PRESET_FAMILIES,
    PRESET_LABELS,
    CalendarArrays,
    KernelExpr,
    gram,
    parse_kernel_expr,
    preset_expr,
)
from openload.krr import fit_krr, predict_krr
from openload.metrics import ALL_GROUP, MetricsReport, evaluate_forecast, slot_metrics
from openload.okl import OklModel, OklOptions, fit_okl, latent_profiles, output_kernel, predict_okl

logger = logging.getLogger(__name__)

TOTAL_METER = "TOTAL"
FORECAST_COLUMNS = ["slot_index", "meter_id", "forecast"]
# 验证 NMAE 相对差小于该值时视为平局，取较大的 lambda
TIE_RTOL = 1e-12

FitFn = Callable[..., Model]


# ==================== 方法注册 ====================

def _fit_krr(kernel, slots, obs, lam, task_ids, K, rank_p, options):
    return fit_krr(kernel, slots, obs, lam, task_ids=task_ids, K=K)


def _fit_okl(kernel, slots, obs, lam, task_ids, K, rank_p, options):
    return fit_okl(kernel, slots, obs, lam, rank_p, options=options, task_ids=task_ids, K=K)


def create_fitter(method: str) -> FitFn:
    """根据方法名返回拟合函数"""
    methods = {
        "krr": _fit_krr,
        "okl": _fit_okl,
    }
    fit = methods.get(method.lower())
    if not fit:
        raise ConfigError(f"不支持的方法: {method}，可选: {list(methods.keys())}")
    return fit


def predict_model(model: Model, query, Kq: Optional[np.ndarray] = None) -> np.ndarray:
    if isinstance(model, OklModel):
        return predict_okl(model, query, Kq)
    return predict_krr(model, query, Kq)


def resolve_kernel(config: AppConfig, kernel: Optional[str] = None, preset: Optional[str] = None) -> KernelExpr:
    """--preset 优先于 --kernel，二者都未给出时使用配置中的表达式"""
    sigma_t, sigma_d = config.kernel.sigma_t, config.kernel.sigma_d
    if preset:
        return preset_expr(preset, sigma_t, sigma_d)
    return parse_kernel_expr(kernel or config.experiment.kernel, sigma_t, sigma_d)


# ==================== lambda 选择 ====================

@dataclass
class Selection:
    """lambda 网格搜索结果"""
    lam: float
    log: list[dict] = field(default_factory=list)
    rule: str = "min validation NMAE, ties -> larger lambda"


def select_lambda(
    method: str,
    kernel: KernelExpr,
    points: CalendarArrays,
    obs: ObservationMatrix,
    split: SplitSpec,
    grid: list[float],
    rank_p: Optional[int] = None,
    options: Optional[OklOptions] = None,
    task_ids: Optional[list[str]] = None,
    K_fit: Optional[np.ndarray] = None,
) -> Selection:
    """
    在训练时段上对每个 lambda 拟合，按验证时段上整组的平均 NMAE 选择
    K_fit 为训练 ∪ 验证时段上的 Gram 矩阵，只构造一次，各 lambda 共用其子块
    """
    if not grid:
        raise ConfigError("lambda 网格不能为空")
    grid = sorted(float(lam) for lam in grid)
    if len(grid) == 1:
        return Selection(lam=grid[0], log=[{"lambda": grid[0], "validation_nmae": None}])
    if split.validation.size == 0:
        raise ConfigError("验证集为空，无法在多个 lambda 中选择")

    fit_idx = split.fit
    if K_fit is None:
        K_fit = gram(kernel, points.take(fit_idx))
    tr = np.searchsorted(fit_idx, split.train)
    va = np.searchsorted(fit_idx, split.validation)
    K_tr = K_fit[np.ix_(tr, tr)]
    K_va = K_fit[np.ix_(va, tr)]
    obs_tr = obs.take_rows(split.train)
    obs_va = obs.take_rows(split.validation)
    fit = create_fitter(method)

    log: list[dict] = []
    for lam in grid:
        model = fit(kernel, points.take(split.train), obs_tr, lam, task_ids, K_tr, rank_p, options)
        F = predict_model(model, points.take(split.validation), K_va)
        _, nmae = slot_metrics(obs_va.Y, obs_va.M, F)
        score = float(np.nanmean(nmae)) if np.any(~np.isnan(nmae)) else None
        log.append({"lambda": lam, "validation_nmae": score})
        logger.debug(f"lambda={lam:g}: 验证 NMAE = {score}")

    scored = [(e["lambda"], e["validation_nmae"]) for e in log if e["validation_nmae"] is not None]
    if not scored:
        raise DataError("验证时段上没有可计算 NMAE 的观测")
    best_score = min(score for _, score in scored)
    lam = max(lam for lam, score in scored if score <= best_score * (1 + TIE_RTOL))
    logger.info(f"选定 lambda={lam:g}，验证 NMAE={best_score:.6f}")
    return Selection(lam=lam, log=log)


# ==================== 实验主流程 ====================

@dataclass
class BenchEntry:
    method: str
    kernel: str
    family: str
    report: MetricsReport
    param_count: int
    lambdas: list[float]

    @property
    def name(self) -> str:
        return f"{self.method} {self.kernel}"


class Experiment:
    """
    实验流程
    训练: 选分组 -> 划分 -> 选 lambda -> 在训练 ∪ 验证上重新拟合 -> 生成模型工件
    """

    def __init__(self, config: AppConfig):
        self.config = config

    @property
    def options(self) -> OklOptions:
        s = self.config.solver
        return OklOptions(max_iters=s.max_iters, rel_tol=s.rel_tol, seed=s.seed)

    def make_split(self, dataset: MeterDataset) -> SplitSpec:
        s = self.config.split
        return make_split(dataset, s.train_days, s.validation_fraction, s.seed)

    def train(
        self,
        dataset: MeterDataset,
        kernel: KernelExpr,
        method: Optional[str] = None,
        rank_p: Optional[int] = None,
        groups: Optional[list[str]] = None,
        digest: Optional[str] = None,
        K_fit: Optional[np.ndarray] = None,
    ) -> ModelArtifact:
        exp = self.config.experiment
        method = (method or exp.method).lower()
        rank_p = rank_p if rank_p is not None else exp.rank_p
        groups = list(groups if groups is not None else exp.groups)
        create_fitter(method)
        if method == "okl" and rank_p is None:
            raise ConfigError("method=okl 时必须指定秩 --rank")

        # 1. 选择电表
        sub = dataset.select_meters(dataset.group_columns(groups))
        if sub.n_meters == 0:
            raise DataError(f"分组 {groups} 中没有电表")
        if method == "okl" and not 1 <= rank_p <= sub.n_meters:
            raise ConfigError(f"秩 p 必须在 [1, {sub.n_meters}] 内: {rank_p}")

        # 2. 划分时段
        split = self.make_split(sub)
        points = sub.points
        obs = sub.observations
        logger.info(
            f"开始训练: {method}, 核 {kernel}, {sub.n_meters} 个电表, "
            f"训练/验证/测试 = {split.train.size}/{split.validation.size}/{split.test.size} 个时段"
        )

        # 3. 选择 lambda
        fit_idx = split.fit
        if K_fit is None:
            K_fit = gram(kernel, points.take(fit_idx))
        selection = select_lambda(method, kernel, points, obs, split, exp.lambda_grid, rank_p,
                                  self.options, sub.meter_ids, K_fit)

        # 4. 重新拟合
        model = create_fitter(method)(kernel, points.take(fit_idx), obs.take_rows(fit_idx), selection.lam,
                                      sub.meter_ids, K_fit, rank_p, self.options)
        logger.info(f"模型已在训练 ∪ 验证上重新拟合: lambda={selection.lam:g}, {model.param_count} 个参数")

        return ModelArtifact(
            model=model,
            meter_groups=[g.value for g in sub.groups],
            groups=groups,
            seed=self.config.solver.seed,
            split=split.to_dict(),
            selection=[dict(entry, rule=selection.rule) for entry in selection.log],
            refit=True,
            dataset_digest=digest,
        )

    # ==================== 预测 ====================

    @staticmethod
    def query_rows(artifact: ModelArtifact, dataset: MeterDataset, part: str = "test") -> np.ndarray:
        """按工件记录的划分参数取 train/validation/test/all 时段行"""
        if part == "all":
            return np.arange(dataset.n_slots)
        sp = artifact.split
        if not sp:
            raise DataError("模型工件没有记录数据划分")
        split = make_split(dataset, int(sp["train_days"]), float(sp["validation_fraction"]), int(sp["seed"]))
        rows = {"train": split.train, "validation": split.validation, "test": split.test}.get(part)
        if rows is None:
            raise ConfigError(f"未知的时段划分: {part}")
        return rows

    @staticmethod
    def forecast(artifact: ModelArtifact, slots: pd.DataFrame, aggregate: bool = False) -> pd.DataFrame:
        """长格式预测表 slot_index, meter_id, forecast；aggregate 时追加每个时段的合计行"""
        if len(slots) == 0:
            raise DataError("没有需要预测的时段")
        query = _slot_points(slots)
        F = artifact.predict(query)
        slot_index = slots["slot_index"].to_numpy(dtype=np.int64)
        ids = np.asarray(artifact.task_ids, dtype=object)
        frame = pd.DataFrame({
            "slot_index": np.repeat(slot_index, ids.size),
            "meter_id": np.tile(ids, slot_index.size),
            "forecast": F.reshape(-1),
        })
        if aggregate:
            total = pd.DataFrame({"slot_index": slot_index, "meter_id": TOTAL_METER, "forecast": F.sum(axis=1)})
            frame = pd.concat([frame, total], ignore_index=True)
        return frame

    @staticmethod
    def profiles(artifact: ModelArtifact, slots: pd.DataFrame) -> pd.DataFrame:
        """OKL 潜在曲线 g_k 在各时段的取值"""
        if not isinstance(artifact.model, OklModel):
            raise ConfigError("只有 OKL 模型有潜在曲线")
        G = latent_profiles(artifact.model, _slot_points(slots))
        out = slots[["slot_index", "t", "d", "c"]].reset_index(drop=True).copy()
        for k in range(G.shape[1]):
            out[f"g{k + 1}"] = G[:, k]
        return out

    @staticmethod
    def output_kernel(artifact: ModelArtifact) -> pd.DataFrame:
        """输出核 L = B B^T，行列均为电表 ID"""
        if not isinstance(artifact.model, OklModel):
            raise ConfigError("只有 OKL 模型有输出核")
        ids = artifact.task_ids
        return pd.DataFrame(output_kernel(artifact.model), index=pd.Index(ids, name="meter_id"), columns=ids)

    # ==================== 评估 ====================

    def evaluate(
        self,
        forecast: pd.DataFrame,
        dataset: MeterDataset,
        groups: Optional[list[str]] = None,
        rows: Optional[np.ndarray] = None,
    ) -> MetricsReport:
        """
        在请求分组的全部电表上评估；rows 缺省时取配置中 split.train_days 之后的测试时段
        预测缺少任何已观测的 (时段, 电表) 组合时报错，范围之外的预测行忽略
        """
        fc = forecast[forecast["meter_id"].astype(str) != TOTAL_METER]
        fc_meters = fc["meter_id"].astype(str).to_numpy()
        named = pd.unique(fc_meters)
        known = pd.Index(dataset.meter_ids).get_indexer(named)
        if (known < 0).any():
            unknown = [m for m, c in zip(named, known) if c < 0]
            raise DataError(f"预测中含有数据集里不存在的电表: {unknown[:10]}")

        slot_of = pd.Index(dataset.slots["slot_index"])
        r = slot_of.get_indexer(fc["slot_index"])
        if (r < 0).any():
            raise DataError("预测中含有数据集里不存在的时段")
        if rows is None:
            rows = horizon_rows(dataset, self.config.split.train_days)
        rows = np.asarray(rows, dtype=np.int64)

        wanted = [g for g in (groups or []) if g.lower() != ALL_GROUP]
        whole = not groups or len(wanted) < len(groups)
        cols = np.arange(dataset.n_meters) if whole else dataset.group_columns(wanted)
        meters = [dataset.meter_ids[j] for j in cols]

        pos = pd.Index(rows).get_indexer(r)
        c = pd.Index(meters).get_indexer(fc_meters)
        keep = (pos >= 0) & (c >= 0)
        F = np.zeros((rows.size, cols.size))
        have = np.zeros_like(F, dtype=bool)
        F[pos[keep], c[keep]] = pd.to_numeric(fc["forecast"], errors="coerce").to_numpy(dtype=float)[keep]
        have[pos[keep], c[keep]] = True
        if not np.all(np.isfinite(F[have])):
            raise DataError("预测中含有非有限值")

        obs = dataset.observations.take_cols(cols).take_rows(rows)
        gaps = obs.M & ~have
        if gaps.any():
            slot_index = dataset.slots["slot_index"].to_numpy()[rows]
            listed = [f"({slot_index[i]}, {meters[j]})" for i, j in np.argwhere(gaps)[:10]]
            raise DataError(f"预测缺少 {int(gaps.sum())} 个已观测位置: {', '.join(listed)}")
        logger.info(f"评估 {rows.size} 个测试时段 × {cols.size} 个电表")

        groups_of = [dataset.groups[j].value for j in cols]
        return evaluate_forecast(obs.Y, obs.M, F, groups_of, groups)

    # ==================== 对比实验 ====================

    def bench(self, dataset: MeterDataset, digest: Optional[str] = None) -> list[BenchEntry]:
        """
        各预置核的独立 KRR + 按分组划分的 OKL，在测试时段上评估
        OKL 的各分区预测拼成整体预测后统一评估
        """
        cfg = self.config
        sub = dataset.select_meters(dataset.group_columns(cfg.experiment.groups))
        if sub.n_meters == 0:
            raise DataError(f"分组 {cfg.experiment.groups} 中没有电表")
        split = self.make_split(sub)
        if split.test.size == 0:
            raise ConfigError("测试集为空，无法进行对比实验")
        points = sub.points
        test_points = points.take(split.test)
        obs_test = sub.observations.take_rows(split.test)
        labels = [g.value for g in sub.groups]
        sigma_t, sigma_d = cfg.kernel.sigma_t, cfg.kernel.sigma_d

        entries: list[BenchEntry] = []
        for name in cfg.bench.presets:
            kernel = preset_expr(name, sigma_t, sigma_d)
            artifact = self.train(sub, kernel, method="krr", groups=[], digest=digest)
            F = artifact.predict(test_points)
            entries.append(BenchEntry(
                method="KRR",
                kernel=PRESET_LABELS[name.lower()],
                family=PRESET_FAMILIES[name.lower()],
                report=evaluate_forecast(obs_test.Y, obs_test.M, F, labels),
                param_count=artifact.param_count,
                lambdas=[artifact.model.lam],
            ))

        okl_name = cfg.bench.okl_kernel
        kernel = preset_expr(okl_name, sigma_t, sigma_d) if okl_name.lower() in PRESET_LABELS \
            else parse_kernel_expr(okl_name, sigma_t, sigma_d)
        K_fit = gram(kernel, points.take(split.fit))
        F = np.zeros(obs_test.Y.shape)
        covered = np.zeros(sub.n_meters, dtype=bool)
        params, lambdas = 0, []
        for part in cfg.bench.okl_partitions:
            cols = sub.group_columns(part.groups)
            if cols.size == 0:
                logger.warning(f"OKL 分区 {part.groups} 中没有电表，跳过")
                continue
            rank_p = part.rank_p
            if rank_p > cols.size:
                logger.warning(f"OKL 分区 {part.groups} 的秩 {rank_p} 超过电表数 {cols.size}，已截断")
                rank_p = int(cols.size)
            artifact = self.train(sub.select_meters(cols), kernel, method="okl", rank_p=rank_p,
                                  groups=[], digest=digest, K_fit=K_fit)
            F[:, cols] = artifact.predict(test_points)
            covered[cols] = True
            params += artifact.param_count
            lambdas.append(artifact.model.lam)

        if covered.any():
            if not covered.all():
                logger.warning(f"{int((~covered).sum())} 个电表不属于任何 OKL 分区，不参与 OKL 评估")
            keep = np.flatnonzero(covered)
            entries.append(BenchEntry(
                method="OKL",
                kernel=PRESET_LABELS.get(okl_name.lower(), okl_name),
                family="Output Kernel Learning",
                report=evaluate_forecast(obs_test.Y[:, keep], obs_test.M[:, keep], F[:, keep],
                                         [labels[j] for j in keep]),
                param_count=params,
                lambdas=lambdas,
            ))
        return entries


def bench_frame(entries: list[BenchEntry]) -> pd.DataFrame:
    frames = []
    for e in entries:
        frame = e.report.to_frame()
        frame.insert(0, "family", e.family)
        frame.insert(0, "kernel", e.kernel)
        frame.insert(0, "method", e.method)
        frame["param_count"] = e.param_count
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def _slot_points(slots: pd.DataFrame) -> CalendarArrays:
    for col in ("slot_index", "t", "d", "c"):
        if col not in slots.columns:
            raise DataError(f"时段表缺少列: {col}")
    points = CalendarArrays(
        t=slots["t"].to_numpy(dtype=float),
        d=slots["d"].to_numpy(dtype=float),
        c=slots["c"].to_numpy(dtype=np.int64),
    )
    bad = (points.t < 0) | (points.t >= 24) | (points.d < 1) | (points.d > 366) | (points.c < 0) | (points.c > 7)
    if bad.any():
        raise DataError(f"时段表第 {int(np.flatnonzero(bad)[0]) + 1} 行的日历特征无效")
    return points


def read_slots(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"时段文件不存在: {path}")
    slots = pd.read_csv(path, dtype={"date": str})
    _slot_points(slots)
    return slots


def read_forecast(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"预测文件不存在: {path}")
    frame = pd.read_csv(path, dtype={"meter_id": str}, keep_default_na=False)
    missing = [c for c in FORECAST_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"预测文件缺少列: {missing}")
    return frame


def horizon_rows(dataset: MeterDataset, train_days: int) -> np.ndarray:
    """train_days 天之后的全部时段"""
    return np.arange(min(train_days * SLOTS_PER_DAY, dataset.n_slots), dataset.n_slots)

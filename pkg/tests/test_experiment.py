"""
测试实验流程: lambda 选择、训练、预测、评估与对比
"""

import numpy as np
import pandas as pd
import pytest

import openload.experiment as experiment
from openload.config import AppConfig, OklPartition
from openload.data import SLOTS_PER_DAY, make_split
from openload.errors import ConfigError, DataError
from openload.experiment import (
    TOTAL_METER,
    Experiment,
    bench_frame,
    create_fitter,
    horizon_rows,
    resolve_kernel,
    select_lambda,
)
from openload.kernels import gram, parse_kernel_expr
from openload.krr import KrrModel
from openload.synth import synth_gen

MM2 = parse_kernel_expr("kd * kt * kc")


@pytest.fixture
def config():
    cfg = AppConfig()
    cfg.split.train_days = 30
    cfg.split.seed = 0
    cfg.solver.seed = 0
    cfg.experiment.lambda_grid = [0.01, 0.1, 1.0]
    return cfg


@pytest.fixture
def exp(config):
    return Experiment(config)


def _truth_forecast(dataset, rows, values=None) -> pd.DataFrame:
    """用数据集读数（或给定值）构造长格式预测"""
    Y = dataset.observations.Y[rows] if values is None else values
    slot_index = dataset.slots["slot_index"].to_numpy()[rows]
    return pd.DataFrame({
        "slot_index": np.repeat(slot_index, dataset.n_meters),
        "meter_id": np.tile(np.asarray(dataset.meter_ids, dtype=object), rows.size),
        "forecast": Y.reshape(-1),
    })


# ==================== 方法与核 ====================

def test_create_fitter():
    """测试方法注册表"""
    assert create_fitter("KRR") is not None
    assert create_fitter("okl") is not None
    with pytest.raises(ConfigError, match="不支持的方法"):
        create_fitter("svm")


def test_resolve_kernel(config):
    """测试预置模型与表达式的解析"""
    assert resolve_kernel(config, preset="am1") == parse_kernel_expr("kd + kt")
    assert resolve_kernel(config, kernel="kt * kc") == parse_kernel_expr("kt * kc")
    assert resolve_kernel(config) == MM2
    config.kernel.sigma_t = 2.0
    assert resolve_kernel(config, preset="mm1") == parse_kernel_expr("kd * kt(sigma=2)")


# ==================== lambda 选择 ====================

def test_select_lambda_tie_prefers_larger(small_dataset, monkeypatch):
    """测试验证 NMAE 相同时选较大的 lambda"""
    split = make_split(small_dataset, 30, 0.2, seed=0)

    def flat(Y, M, F):
        n = Y.shape[0]
        return np.ones(n), np.full(n, 0.3)

    monkeypatch.setattr(experiment, "slot_metrics", flat)
    selection = select_lambda("krr", MM2, small_dataset.points, small_dataset.observations, split,
                              [1.0, 0.01, 0.1])
    assert selection.lam == 1.0
    assert [e["lambda"] for e in selection.log] == [0.01, 0.1, 1.0]
    assert "larger" in selection.rule


def test_select_lambda_picks_minimum(small_dataset, monkeypatch):
    """测试选取验证 NMAE 最小的 lambda"""
    split = make_split(small_dataset, 30, 0.2, seed=0)
    scores = iter([0.5, 0.2, 0.4])

    def scripted(Y, M, F):
        n = Y.shape[0]
        return np.ones(n), np.full(n, next(scores))

    monkeypatch.setattr(experiment, "slot_metrics", scripted)
    selection = select_lambda("krr", MM2, small_dataset.points, small_dataset.observations, split,
                              [0.01, 0.1, 1.0])
    assert selection.lam == 0.1
    assert [e["validation_nmae"] for e in selection.log] == [0.5, 0.2, 0.4]


def test_select_lambda_edge_cases(small_dataset):
    """测试单点网格、空验证集与空网格"""
    obs, points = small_dataset.observations, small_dataset.points
    no_val = make_split(small_dataset, 30, 0.0, seed=0)
    single = select_lambda("krr", MM2, points, obs, no_val, [0.3])
    assert single.lam == 0.3
    assert single.log[0]["validation_nmae"] is None

    with pytest.raises(ConfigError, match="验证集为空"):
        select_lambda("krr", MM2, points, obs, no_val, [0.1, 1.0])
    with pytest.raises(ConfigError, match="网格不能为空"):
        select_lambda("krr", MM2, points, obs, no_val, [])


def test_select_lambda_with_precomputed_gram(small_dataset):
    """测试传入训练 ∪ 验证 Gram 矩阵时结果不变"""
    split = make_split(small_dataset, 30, 0.2, seed=0)
    obs, points = small_dataset.observations, small_dataset.points
    a = select_lambda("krr", MM2, points, obs, split, [0.01, 1.0])
    b = select_lambda("krr", MM2, points, obs, split, [0.01, 1.0], K_fit=gram(MM2, points.take(split.fit)))
    assert a.lam == b.lam
    for ea, eb in zip(a.log, b.log):
        assert ea["validation_nmae"] == pytest.approx(eb["validation_nmae"], rel=1e-10)


# ==================== 训练 ====================

def test_train_krr(exp, small_dataset):
    """测试 KRR 训练: 在训练 ∪ 验证上重新拟合"""
    artifact = exp.train(small_dataset, MM2, method="krr", digest="d1")
    assert artifact.method == "krr"
    assert isinstance(artifact.model, KrrModel)
    fit_rows = np.arange(30 * SLOTS_PER_DAY)
    assert artifact.param_count == int(small_dataset.observations.M[fit_rows].sum())
    assert len(artifact.model.slots) == 30 * SLOTS_PER_DAY
    assert artifact.split["n_test"] == 10 * SLOTS_PER_DAY
    assert artifact.model.lam in (0.01, 0.1, 1.0)
    assert len(artifact.selection) == 3
    assert all("rule" in entry for entry in artifact.selection)
    assert artifact.refit and artifact.dataset_digest == "d1"


def test_train_okl_param_count(exp, small_dataset):
    """测试 OKL 参数个数为 (ℓ+m)p"""
    artifact = exp.train(small_dataset, MM2, method="okl", rank_p=2)
    assert artifact.param_count == (30 * SLOTS_PER_DAY + 10) * 2
    trace = np.asarray(artifact.model.trace)
    assert np.all(trace[1:] <= trace[:-1] * (1 + 1e-10))


def test_train_group_filter(exp, small_dataset):
    """测试只训练指定分组"""
    artifact = exp.train(small_dataset, MM2, method="okl", rank_p=1, groups=["SME"])
    assert artifact.task_ids == ["S0001", "S0002", "S0003"]
    assert artifact.meter_groups == ["SME"] * 3
    assert artifact.groups == ["SME"]


def test_train_validation(exp, small_dataset):
    """测试训练参数校验"""
    with pytest.raises(ConfigError, match="秩 p"):
        exp.train(small_dataset, MM2, method="okl", rank_p=11)
    with pytest.raises(ConfigError, match="--rank"):
        exp.train(small_dataset, MM2, method="okl")
    with pytest.raises(ConfigError, match="不支持的方法"):
        exp.train(small_dataset, MM2, method="gp")


# ==================== 预测与评估 ====================

def test_forecast_long_format(exp, small_dataset):
    """测试长格式预测与合计行"""
    artifact = exp.train(small_dataset, MM2, method="krr")
    rows = Experiment.query_rows(artifact, small_dataset, "test")
    np.testing.assert_array_equal(rows, horizon_rows(small_dataset, 30))

    slots = small_dataset.slots.iloc[rows]
    frame = Experiment.forecast(artifact, slots, aggregate=True)
    assert list(frame.columns) == ["slot_index", "meter_id", "forecast"]
    assert len(frame) == rows.size * (small_dataset.n_meters + 1)

    body = frame[frame["meter_id"] != TOTAL_METER]
    totals = frame[frame["meter_id"] == TOTAL_METER].set_index("slot_index")["forecast"]
    sums = body.groupby("slot_index")["forecast"].sum()
    np.testing.assert_allclose(totals.loc[sums.index].to_numpy(), sums.to_numpy(), rtol=1e-12)

    F = artifact.predict(small_dataset.points.take(rows))
    np.testing.assert_array_equal(body["forecast"].to_numpy(), F.reshape(-1))


def test_model_beats_constant_baseline(exp, small_dataset):
    """测试测试期 NMAE 低于各电表常数均值预测"""
    artifact = exp.train(small_dataset, MM2, method="krr")
    rows = horizon_rows(small_dataset, 30)
    model_report = exp.evaluate(Experiment.forecast(artifact, small_dataset.slots.iloc[rows]),
                                small_dataset, rows=rows)

    obs = small_dataset.observations
    fit = np.arange(30 * SLOTS_PER_DAY)
    means = (obs.Y[fit] * obs.M[fit]).sum(axis=0) / obs.M[fit].sum(axis=0)
    baseline = _truth_forecast(small_dataset, rows, np.tile(means, (rows.size, 1)))
    base_report = exp.evaluate(baseline, small_dataset, rows=rows)
    assert model_report.get("all", "NMAE").mean < base_report.get("all", "NMAE").mean


def test_evaluate_perfect_and_zero(exp, small_dataset):
    """测试完美预测指标为 0，零预测 NMAE 为 1"""
    rows = horizon_rows(small_dataset, 30)
    perfect = exp.evaluate(_truth_forecast(small_dataset, rows), small_dataset)
    assert perfect.groups == ["all", "Residential", "SME", "Others"]
    for row in perfect.rows:
        assert row.mean == pytest.approx(0.0, abs=1e-12)

    zeros = np.zeros((rows.size, small_dataset.n_meters))
    report = exp.evaluate(_truth_forecast(small_dataset, rows, zeros), small_dataset, groups=["SME"])
    assert report.groups == ["SME"]
    assert report.get("SME", "NMAE").mean == pytest.approx(1.0)


def test_evaluate_defaults_to_test_period(exp, small_dataset):
    """测试缺省只评估配置划分的测试时段，训练时段上的预测行被忽略"""
    everything = np.arange(small_dataset.n_slots)
    frame = _truth_forecast(small_dataset, everything)
    rows = horizon_rows(small_dataset, 30)
    wrong = frame["slot_index"].isin(small_dataset.slots["slot_index"].to_numpy()[: 30 * SLOTS_PER_DAY])
    frame.loc[wrong, "forecast"] = 0.0

    report = exp.evaluate(frame, small_dataset)
    row = report.get("all", "NMAE")
    assert row.mean == pytest.approx(0.0, abs=1e-12)
    assert row.evaluated_slots + row.skipped_slots == rows.size


def test_evaluate_gaps_and_unknown_meters(exp, small_dataset):
    """测试预测缺失已观测位置或含有未知电表"""
    rows = horizon_rows(small_dataset, 30)
    frame = _truth_forecast(small_dataset, rows)
    target = int(np.flatnonzero(small_dataset.observations.M[rows, 0])[0])
    slot = small_dataset.slots["slot_index"].iloc[rows[target]]
    gap = frame[~((frame["slot_index"] == slot) & (frame["meter_id"] == "R0001"))]
    with pytest.raises(DataError, match="预测缺少 1 个已观测位置"):
        exp.evaluate(gap, small_dataset, rows=rows)

    bad = frame.copy()
    bad.loc[0, "meter_id"] = "X9999"
    with pytest.raises(DataError, match="不存在的电表"):
        exp.evaluate(bad, small_dataset)


def test_evaluate_missing_meters_and_slots(exp, small_dataset):
    """测试预测只覆盖部分电表与部分测试时段时报错"""
    rows = horizon_rows(small_dataset, 30)
    frame = _truth_forecast(small_dataset, rows)
    kept_slots = small_dataset.slots["slot_index"].to_numpy()[rows[: rows.size // 2]]
    partial = frame[(frame["meter_id"] == "R0001") & frame["slot_index"].isin(kept_slots)]
    M = small_dataset.observations.M
    expected = int(M[rows].sum() - M[rows[: rows.size // 2], 0].sum())
    with pytest.raises(DataError, match=f"预测缺少 {expected} 个已观测位置"):
        exp.evaluate(partial, small_dataset)

    # 只请求 SME 时，其他分组的电表不要求覆盖
    sme = frame[frame["meter_id"].str.startswith("S")]
    report = exp.evaluate(sme, small_dataset, groups=["SME"])
    assert report.get("SME", "NMAE").mean == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DataError, match="预测缺少"):
        exp.evaluate(sme, small_dataset, groups=["all", "SME"])


def test_profiles_and_output_kernel(exp, small_dataset):
    """测试潜在曲线与输出核导出"""
    okl = exp.train(small_dataset, MM2, method="okl", rank_p=2)
    slots = small_dataset.slots.iloc[:16]
    profiles = Experiment.profiles(okl, slots)
    assert list(profiles.columns) == ["slot_index", "t", "d", "c", "g1", "g2"]
    assert len(profiles) == 16

    L = Experiment.output_kernel(okl)
    assert list(L.index) == small_dataset.meter_ids
    np.testing.assert_allclose(L.to_numpy(), L.to_numpy().T, atol=1e-12)

    krr = exp.train(small_dataset, MM2, method="krr")
    with pytest.raises(ConfigError):
        Experiment.profiles(krr, slots)
    with pytest.raises(ConfigError):
        Experiment.output_kernel(krr)


# ==================== 对比实验 ====================

def test_bench(config, small_dataset, caplog):
    """测试对比实验的结构，乘法核优于加法核"""
    config.bench.presets = ["am1", "mm2"]
    config.bench.okl_partitions = [
        OklPartition(groups=["Residential", "Others"], rank_p=200),
        OklPartition(groups=["SME"], rank_p=2),
    ]
    config.experiment.lambda_grid = [0.01, 0.1]
    entries = Experiment(config).bench(small_dataset)

    assert [e.name for e in entries] == ["KRR K^d+K^t", "KRR K^d·K^t·K^c", "OKL K^d·K^t·K^c"]
    assert entries[-1].family == "Output Kernel Learning"
    fit_slots = 30 * SLOTS_PER_DAY
    assert entries[-1].param_count == (fit_slots + 7) * 7 + (fit_slots + 3) * 2
    assert len(entries[-1].lambdas) == 2
    assert "已截断" in caplog.text

    am1, mm2 = entries[0].report, entries[1].report
    assert mm2.get("all", "NMAE").mean < am1.get("all", "NMAE").mean

    frame = bench_frame(entries)
    assert list(frame.columns[:3]) == ["method", "kernel", "family"]
    assert frame.loc[0, "method"] == "KRR" and frame.loc[0, "kernel"] == "K^d+K^t"
    assert "param_count" in frame.columns
    assert len(frame) == 3 * 4 * 2


def test_bench_requires_test_period(config, small_dataset):
    """测试测试期为空时报错"""
    config.split.train_days = 40
    with pytest.raises(ConfigError, match="测试集为空"):
        Experiment(config).bench(small_dataset)


@pytest.mark.slow
def test_bench_ranking_on_full_synthetic():
    """测试 60 个电表、420/120 天的合成数据上: 乘法 < 半加法 < 加法，OKL 平均不差于 KRR"""
    ordered, okl_nmae, krr_nmae = 0, [], []
    for seed in range(5):
        dataset = synth_gen(
            {"Residential": 20, "SME": 20, "Others": 20},
            n_days=540, rank_r=3, noise_sigma=0.05, missing_rate=0.1, seed=seed,
        )
        cfg = AppConfig()
        cfg.split.train_days = 420
        cfg.split.seed = seed
        cfg.solver.seed = seed
        cfg.experiment.lambda_grid = [0.01, 0.1, 1.0]
        entries = Experiment(cfg).bench(dataset)
        nmae = {e.name: e.report.get("all", "NMAE").mean for e in entries}

        additive = [nmae["KRR K^d+K^t"], nmae["KRR K^d+K^t+K^c"]]
        semi = [nmae["KRR K^d+K^t·K^c"], nmae["KRR (K^d+K^t)·K^c"]]
        mm2 = nmae["KRR K^d·K^t·K^c"]
        ordered += mm2 < min(semi) and max(semi) < min(additive)
        okl_nmae.append(nmae["OKL K^d·K^t·K^c"])
        krr_nmae.append(mm2)

    assert ordered >= 4
    assert np.mean(okl_nmae) <= np.mean(krr_nmae)

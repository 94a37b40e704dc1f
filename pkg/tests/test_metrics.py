"""
测试聚合 MAPE / NMAE 与汇总
"""

import numpy as np
import pandas as pd
import pytest
from rich.console import Console

from openload.metrics import (
    REPORT_COLUMNS,
    evaluate_forecast,
    render_comparison,
    slot_mape,
    slot_metrics,
    slot_nmae,
    summarize,
)


def _row(*values):
    return np.array([values], dtype=float)


def test_slot_mape_example():
    """测试单电表 y=100, f=90 的 MAPE"""
    Y, F, M = _row(100), _row(90), np.ones((1, 1), dtype=bool)
    assert slot_mape(0, [0], Y, M, F) == pytest.approx(10.0)


def test_slot_nmae_example():
    """测试两个电表 y=(10,30), f=(12,27) 的 NMAE"""
    Y, F, M = _row(10, 30), _row(12, 27), np.ones((1, 2), dtype=bool)
    assert slot_nmae(0, [0, 1], Y, M, F) == pytest.approx(0.125)
    # 聚合后 |40 - 39| / 40
    assert slot_mape(0, [0, 1], Y, M, F) == pytest.approx(2.5)


def test_perfect_and_zero_forecast():
    """测试完美预测为 0，零预测的 NMAE 恰为 1"""
    rng = np.random.default_rng(0)
    Y = rng.uniform(0.1, 5.0, size=(30, 6))
    M = rng.random((30, 6)) > 0.2
    M[:, 0] = True
    mape, nmae = slot_metrics(Y, M, Y.copy())
    assert np.all(mape == 0) and np.all(nmae == 0)

    _, nmae = slot_metrics(Y, M, np.zeros_like(Y))
    np.testing.assert_array_equal(nmae, 1.0)


def test_unobserved_cells_are_ignored():
    """测试未观测位置的预测不影响指标"""
    Y = _row(10, 999)
    M = np.array([[True, False]])
    assert slot_nmae(0, [0, 1], Y, M, _row(10, -5)) == 0.0


def test_undefined_slots():
    """测试分组无观测或需求和为 0 时未定义"""
    Y = np.array([[0.0, 0.0], [1.0, 2.0]])
    M = np.array([[True, True], [False, False]])
    F = np.ones_like(Y)
    assert slot_mape(0, [0, 1], Y, M, F) is None
    assert slot_nmae(0, [0, 1], Y, M, F) is None
    assert slot_nmae(1, [0, 1], Y, M, F) is None
    mape, nmae = slot_metrics(Y, M, F)
    assert np.isnan(mape).all() and np.isnan(nmae).all()


def test_scale_invariance():
    """测试 Y 与 F 同乘正数时指标不变"""
    rng = np.random.default_rng(1)
    Y = rng.uniform(0.1, 3.0, size=(20, 5))
    F = rng.uniform(0.1, 3.0, size=(20, 5))
    M = rng.random((20, 5)) > 0.1
    M[:, 0] = True
    a = slot_metrics(Y, M, F)
    b = slot_metrics(7.5 * Y, M, 7.5 * F)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12)


def test_single_meter_mape_is_100_nmae():
    """测试单电表分组 MAPE = 100 × NMAE"""
    rng = np.random.default_rng(2)
    Y = rng.uniform(0.1, 3.0, size=(15, 1))
    F = rng.uniform(0.1, 3.0, size=(15, 1))
    mape, nmae = slot_metrics(Y, np.ones_like(Y, dtype=bool), F)
    np.testing.assert_allclose(mape, 100 * nmae, rtol=1e-12)


def test_summarize():
    """测试均值与总体标准差"""
    row = summarize([4.0, 6.0])
    assert row.mean == 5.0 and row.std == 1.0
    assert row.evaluated_slots == 2 and row.skipped_slots == 0

    row = summarize([3.0])
    assert row.mean == 3.0 and row.std == 0.0

    row = summarize([2.0, None, float("nan"), 2.0], group="SME", metric="MAPE")
    assert row.evaluated_slots == 2 and row.skipped_slots == 2
    assert row.group == "SME" and row.metric == "MAPE"


def test_summarize_all_undefined():
    """测试全部未定义时为 NA 行"""
    row = summarize([None, None])
    assert not row.available
    assert row.mean is None and row.std is None
    assert row.skipped_slots == 2


def test_evaluate_forecast_groups(tmp_path):
    """测试按分组评估与 CSV 输出"""
    Y = np.array([[1.0, 2.0, 4.0], [2.0, 2.0, 0.0]])
    M = np.ones_like(Y, dtype=bool)
    report = evaluate_forecast(Y, M, np.zeros_like(Y), ["Residential", "Residential", "SME"])
    assert report.groups == ["all", "Residential", "SME"]
    assert report.get("all", "NMAE").mean == 1.0
    sme = report.get("SME", "NMAE")
    assert sme.evaluated_slots == 1 and sme.skipped_slots == 1
    assert report.get("Residential", "MAPE").mean == 100.0

    only = evaluate_forecast(Y, M, Y, ["Residential", "Residential", "SME"], groups=["sme"])
    assert only.groups == ["SME"]
    assert only.get("SME", "MAPE").mean == 0.0

    path = report.to_csv(tmp_path / "report.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == REPORT_COLUMNS
    assert len(frame) == 6
    with pytest.raises(KeyError):
        report.get("Others", "NMAE")


def test_na_row_in_csv(tmp_path):
    """测试不可用的行在 CSV 中写作 NA"""
    Y = np.zeros((3, 1))
    report = evaluate_forecast(Y, np.ones_like(Y, dtype=bool), Y, ["Others"])
    text = (report.to_csv(tmp_path / "r.csv")).read_text(encoding="utf-8")
    assert "all,NMAE,NA,NA,0,3" in text


def test_render_comparison():
    """测试对比表输出"""
    Y = np.array([[1.0, 2.0]])
    M = np.ones_like(Y, dtype=bool)
    reports = {
        ("KRR", "K^d·K^t·K^c"): evaluate_forecast(Y, M, Y, ["SME", "Others"]),
        ("KRR", "K^d+K^t"): evaluate_forecast(Y, M, np.zeros_like(Y), ["SME", "Others"]),
        ("OKL", "K^d·K^t·K^c"): evaluate_forecast(Y, M, Y, ["SME", "Others"]),
    }
    families = {
        ("KRR", "K^d·K^t·K^c"): "Multiplicative Models",
        ("KRR", "K^d+K^t"): "Additive Models",
        ("OKL", "K^d·K^t·K^c"): "Output Kernel Learning",
    }
    console = Console(record=True, width=160)
    render_comparison(reports, console, families=families)
    text = console.export_text()
    header = next(line for line in text.splitlines() if "Method" in line)
    assert header.index("Method") < header.index("Kernel") < header.index("NMAE mean")
    assert "Family" not in text
    assert "K^d+K^t" in text
    assert "Overall accuracy" in text
    assert "SME accuracy" in text
    assert "1.0000" in text

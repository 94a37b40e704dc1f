"""
OpenLoad CLI 命令行入口
"""

from __future__ import annotations

import functools
import logging
import sys
from datetime import date
from pathlib import Path

import click

from openload import __version__
from openload.errors import ConfigError, OpenLoadError

logger = logging.getLogger(__name__)

USAGE_EXIT = 1


def setup_logging(level: str = "INFO") -> None:
    """配置日志"""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


class OpenLoadGroup(click.Group):
    """把库异常映射为退出码: 1 用法/配置, 2 数据, 3 数值"""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except OpenLoadError as e:
            logger.error(str(e))
            click.echo(f"❌ {e}", err=True)
            ctx.exit(e.exit_code)
        except ValueError as e:
            logger.error(str(e))
            click.echo(f"❌ {e}", err=True)
            ctx.exit(USAGE_EXIT)

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        if not standalone_mode:
            return super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            sys.exit(USAGE_EXIT)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(USAGE_EXIT)
        sys.exit(rv if isinstance(rv, int) else 0)


@click.group(cls=OpenLoadGroup)
@click.version_option(version=__version__)
def main():
    """⚡ OpenLoad - 多任务电力负荷预测

    基于日历特征核的独立核岭回归 (KRR) 与低秩输出核学习 (OKL)
    """
    pass


def common_options(func):
    """--config / --debug"""

    @click.option("--config", "-c", default=None, help="配置文件路径 (YAML)")
    @click.option("--debug", is_flag=True, help="调试模式")
    @functools.wraps(func)
    def wrapper(*args, config, debug, **kwargs):
        from openload.config import AppConfig

        app_config = AppConfig.load(config)
        if debug:
            app_config.debug = True
        setup_logging("DEBUG" if app_config.debug else app_config.log_level)
        return func(app_config, *args, **kwargs)

    return wrapper


def experiment_options(func):
    """训练与对比实验共用的参数覆盖项"""
    options = [
        click.option("--lambda-grid", default=None, help="逗号分隔的 lambda 网格"),
        click.option("--group", "groups", multiple=True, help="只使用该分组的电表（可重复）"),
        click.option("--train-days", type=int, default=None, help="训练期天数"),
        click.option("--val-frac", type=float, default=None, help="验证集比例"),
        click.option("--seed", type=int, default=None, help="随机种子（划分与初始化）"),
        click.option("--max-iters", type=int, default=None, help="OKL 最大迭代轮数"),
        click.option("--tol", type=float, default=None, help="OKL 相对收敛阈值"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _parse_grid(text: str) -> list[float]:
    try:
        grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(f"lambda 网格无效: {text!r}") from e
    if not grid or any(lam <= 0 for lam in grid):
        raise ConfigError(f"lambda 网格必须非空且全部为正数: {text!r}")
    return grid


def _apply_overrides(app_config, lambda_grid, groups, train_days, val_frac, seed, max_iters, tol) -> None:
    """命令行参数覆盖配置"""
    if lambda_grid:
        app_config.experiment.lambda_grid = _parse_grid(lambda_grid)
    if groups:
        app_config.experiment.groups = list(groups)
    if train_days is not None:
        app_config.split.train_days = train_days
    if val_frac is not None:
        app_config.split.validation_fraction = val_frac
    if seed is not None:
        app_config.split.seed = seed
        app_config.solver.seed = seed
    if max_iters is not None:
        if max_iters < 1:
            raise ConfigError(f"--max-iters 必须为正数: {max_iters}")
        app_config.solver.max_iters = max_iters
    if tol is not None:
        app_config.solver.rel_tol = tol


def _print_summary(dataset) -> None:
    """各分组电表数与缺失比例"""
    from rich.console import Console
    from rich.table import Table

    table = Table(title=f"数据集: {dataset.n_slots} 个时段 ({dataset.n_days} 天)")
    table.add_column("Group")
    table.add_column("Meters", justify="right")
    table.add_column("Sparsity (%)", justify="right")
    for row in dataset.summary().itertuples(index=False):
        table.add_row(row.group, str(row.meters), f"{row.sparsity_pct:.3f}")
    Console().print(table)


# ==================== 数据 ====================

@main.command()
@click.argument("raw_file", type=click.Path(dir_okay=False))
@click.option("--groups", "groups_file", default=None, help="电表分组文件 (meter_id,group)")
@click.option("--holidays", "holidays_file", default=None, help="节假日文件，每行一个 ISO 日期")
@click.option("--out", "-o", "out_dir", required=True, help="输出数据集目录")
@common_options
def preprocess(app_config, raw_file: str, groups_file: str | None, holidays_file: str | None, out_dir: str):
    """🧹 预处理原始读数文件：夏令时修复、降采样、电表过滤

    RAW_FILE: 原始读数文件（meter_id 时间戳 读数）
    """
    from openload.data import build_dataset, read_groups, read_holidays, read_raw, write_dataset

    cfg = app_config.data
    raw = read_raw(raw_file)
    dataset, report = build_dataset(
        raw,
        groups=read_groups(groups_file),
        holidays=read_holidays(holidays_file or cfg.holidays_file),
        dst_start_dates=cfg.dst_start_dates,
        dst_end_dates=cfg.dst_end_dates,
    )
    write_dataset(dataset, out_dir, cfg.float_format)

    for line in report.lines():
        click.echo(f"  ⚠️ {line}")
    _print_summary(dataset)
    click.echo(f"✅ 数据集已写出: {out_dir}")


@main.command()
@click.option("--out", "-o", "out_dir", required=True, help="输出数据集目录")
@click.option("--residential", type=int, default=20, help="Residential 电表数")
@click.option("--sme", type=int, default=20, help="SME 电表数")
@click.option("--others", type=int, default=20, help="Others 电表数")
@click.option("--days", type=int, default=540, help="天数")
@click.option("--rank", "rank_r", type=int, default=3, help="潜在曲线个数")
@click.option("--noise", type=float, default=0.05, help="高斯噪声标准差")
@click.option("--missing-rate", type=float, default=0.1, help="缺失比例")
@click.option("--seed", type=int, default=0, help="随机种子")
@click.option("--start-date", default="2009-07-14", help="起始日期 (ISO)")
@click.option("--holidays", "holidays_file", default=None, help="节假日文件")
@common_options
def synth(app_config, out_dir: str, residential: int, sme: int, others: int, days: int, rank_r: int,
          noise: float, missing_rate: float, seed: int, start_date: str, holidays_file: str | None):
    """🧪 生成合成数据集（与预处理输出格式相同）"""
    from openload.data import read_holidays, write_dataset
    from openload.synth import synth_gen

    try:
        start = date.fromisoformat(start_date)
    except ValueError as e:
        raise ConfigError(f"起始日期无效: {start_date!r}") from e

    dataset = synth_gen(
        {"Residential": residential, "SME": sme, "Others": others},
        n_days=days, rank_r=rank_r, noise_sigma=noise, missing_rate=missing_rate, seed=seed,
        start_date=start, holidays=read_holidays(holidays_file or app_config.data.holidays_file),
    )
    write_dataset(dataset, out_dir, app_config.data.float_format)
    _print_summary(dataset)
    click.echo(f"✅ 合成数据集已写出: {out_dir}")


# ==================== 训练与预测 ====================

@main.command()
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.option("--out", "-o", "out_model", required=True, help="模型输出目录")
@click.option("--kernel", "-k", default=None, help="核表达式，如 'kd * kt * kc'")
@click.option("--preset", "-p", default=None, help="预置模型 am1|am2|sam1|sam2|mm1|mm2")
@click.option("--method", type=click.Choice(["krr", "okl"]), default=None, help="训练方法")
@click.option("--rank", "rank_p", type=int, default=None, help="OKL 秩 p")
@experiment_options
@common_options
def train(app_config, dataset_dir: str, out_model: str, kernel: str | None, preset: str | None,
          method: str | None, rank_p: int | None, **overrides):
    """🏋️ 训练模型：验证集选择 lambda，在训练 ∪ 验证上重新拟合

    DATASET_DIR: 处理后的数据集目录
    """
    from openload.data import dataset_digest, read_dataset
    from openload.experiment import Experiment, resolve_kernel

    if kernel and preset:
        raise ConfigError("--kernel 与 --preset 只能指定一个")
    _apply_overrides(app_config, **overrides)
    if method:
        app_config.experiment.method = method
    if rank_p is not None:
        app_config.experiment.rank_p = rank_p
    if app_config.experiment.method == "krr" and app_config.experiment.rank_p is not None:
        raise ConfigError("--rank 只适用于 --method okl")

    dataset = read_dataset(dataset_dir)
    expr = resolve_kernel(app_config, kernel, preset)
    artifact = Experiment(app_config).train(dataset, expr, digest=dataset_digest(dataset_dir))
    artifact.save(out_model)

    click.echo(f"\n📈 lambda 选择（{artifact.selection[0]['rule'] if artifact.selection else ''}）:")
    for entry in artifact.selection:
        score = entry["validation_nmae"]
        mark = " ⬅" if entry["lambda"] == artifact.model.lam else ""
        click.echo(f"  lambda={entry['lambda']:<10g} NMAE={'NA' if score is None else f'{score:.6f}'}{mark}")
    if getattr(artifact.model, "empty_tasks", None):
        click.echo(f"  ⚠️ {len(artifact.model.empty_tasks)} 个电表没有训练观测")
    click.echo(f"🔢 参数个数: {artifact.param_count}")
    click.echo(f"✅ 模型已保存: {out_model}")


@main.command()
@click.argument("model_dir", type=click.Path(file_okay=False))
@click.option("--dataset", "dataset_dir", default=None, help="数据集目录（与 --part 一起使用）")
@click.option("--part", type=click.Choice(["test", "validation", "train", "all"]), default="test",
              help="预测数据集的哪一部分时段")
@click.option("--slots", "slots_file", default=None, help="查询时段文件 (slot_index,t,d,c)")
@click.option("--out", "-o", "out_csv", required=True, help="预测输出 CSV")
@click.option("--aggregate", is_flag=True, help="追加每个时段的合计行 (meter_id=TOTAL)")
@click.option("--profiles", "profiles_csv", default=None, help="OKL 潜在曲线输出 CSV")
@click.option("--output-kernel", "kernel_csv", default=None, help="OKL 输出核输出 CSV")
@common_options
def forecast(app_config, model_dir: str, dataset_dir: str | None, part: str, slots_file: str | None,
             out_csv: str, aggregate: bool, profiles_csv: str | None, kernel_csv: str | None):
    """🔮 用已保存的模型生成预测

    MODEL_DIR: train 输出的模型目录
    """
    from openload.artifacts import ModelArtifact
    from openload.data import dataset_digest, read_dataset
    from openload.errors import DataError
    from openload.experiment import Experiment, read_slots

    if (dataset_dir is None) == (slots_file is None):
        raise ConfigError("必须且只能指定 --dataset 或 --slots 之一")

    artifact = ModelArtifact.load(model_dir)
    if slots_file:
        slots = read_slots(slots_file)
    else:
        dataset = read_dataset(dataset_dir)
        missing = sorted(set(artifact.task_ids) - set(dataset.meter_ids))
        if missing:
            raise DataError(f"模型中的电表不在数据集中: {missing[:10]}")
        if artifact.dataset_digest and artifact.dataset_digest != dataset_digest(dataset_dir):
            logger.warning("数据集摘要与训练时不同")
        rows = Experiment.query_rows(artifact, dataset, part)
        slots = dataset.slots.iloc[rows].reset_index(drop=True)

    frame = Experiment.forecast(artifact, slots, aggregate=aggregate)
    Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_csv, index=False, lineterminator="\n")
    click.echo(f"✅ 预测已写出: {out_csv} ({len(slots)} 个时段 × {len(artifact.task_ids)} 个电表)")

    if profiles_csv:
        Experiment.profiles(artifact, slots).to_csv(profiles_csv, index=False, lineterminator="\n")
        click.echo(f"📉 潜在曲线已写出: {profiles_csv}")
    if kernel_csv:
        Experiment.output_kernel(artifact).to_csv(kernel_csv, lineterminator="\n")
        click.echo(f"🧩 输出核已写出: {kernel_csv}")


# ==================== 评估 ====================

@main.command()
@click.argument("forecast_csv", type=click.Path(dir_okay=False))
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.option("--group", "groups", multiple=True, help="评估的分组 all|Residential|SME|Others（可重复）")
@click.option("--train-days", type=int, default=None, help="测试期起点天数（默认取配置 split.train_days）")
@click.option("--out", "-o", "out_report", default=None, help="报告输出 CSV")
@common_options
def evaluate(app_config, forecast_csv: str, dataset_dir: str, groups: tuple, train_days: int | None,
             out_report: str | None):
    """📊 计算分组聚合 MAPE 与 NMAE

    FORECAST_CSV: forecast 输出的预测文件
    DATASET_DIR: 处理后的数据集目录
    """
    from rich.console import Console

    from openload.data import read_dataset
    from openload.experiment import Experiment, horizon_rows, read_forecast

    dataset = read_dataset(dataset_dir)
    rows = horizon_rows(dataset, train_days) if train_days is not None else None
    report = Experiment(app_config).evaluate(read_forecast(forecast_csv), dataset, list(groups) or None, rows)
    Console().print(report.to_table())
    if out_report:
        report.to_csv(out_report)
        click.echo(f"✅ 报告已写出: {out_report}")


@main.command()
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.option("--out", "-o", "out_report", default=None, help="合并报告输出 CSV")
@click.option("--preset", "presets", multiple=True, help="参与对比的 KRR 预置模型（可重复，默认全部六个）")
@click.option("--okl-kernel", default=None, help="OKL 使用的核（预置名或表达式）")
@experiment_options
@common_options
def bench(app_config, dataset_dir: str, out_report: str | None, presets: tuple, okl_kernel: str | None,
          **overrides):
    """🏁 对比实验：六种核的独立 KRR 与分组 OKL

    DATASET_DIR: 处理后的数据集目录
    """
    from rich.console import Console

    from openload.data import dataset_digest, read_dataset
    from openload.experiment import Experiment, bench_frame
    from openload.metrics import render_comparison

    _apply_overrides(app_config, **overrides)
    if presets:
        app_config.bench.presets = list(presets)
    if okl_kernel:
        app_config.bench.okl_kernel = okl_kernel

    dataset = read_dataset(dataset_dir)
    entries = Experiment(app_config).bench(dataset, digest=dataset_digest(dataset_dir))

    console = Console()
    render_comparison({(e.method, e.kernel): e.report for e in entries}, console,
                      {(e.method, e.kernel): e.family for e in entries})
    for e in entries:
        click.echo(f"  🔢 {e.name}: {e.param_count} 个参数, lambda={', '.join(f'{lam:g}' for lam in e.lambdas)}")
    if out_report:
        Path(out_report).parent.mkdir(parents=True, exist_ok=True)
        bench_frame(entries).to_csv(out_report, index=False, na_rep="NA", float_format="%.6f", lineterminator="\n")
        click.echo(f"✅ 对比报告已写出: {out_report}")


if __name__ == "__main__":
    main()

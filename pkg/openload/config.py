"""
OpenLoad 配置管理模块
支持环境变量、YAML配置文件、命令行参数覆盖
"""

from __future__ import annotations

import os
from datetime import date
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from openload.errors import ConfigError

# 1e-4 ... 1e2，每半个数量级一个点，共 13 个
DEFAULT_LAMBDA_GRID = [10.0 ** (e / 2) for e in range(-8, 5)]

# 爱尔兰 2009–2010 夏令时切换日期
IRELAND_DST_START = [date(2009, 3, 29), date(2010, 3, 28)]
IRELAND_DST_END = [date(2009, 10, 25), date(2010, 10, 31)]


class _Section(BaseSettings):
    """配置段基类：环境变量优先于构造参数（YAML）"""

    model_config = SettingsConfigDict(populate_by_name=True, extra="forbid")

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings, dotenv_settings,
                                   file_secret_settings):
        return env_settings, init_settings, dotenv_settings, file_secret_settings


class KernelConfig(_Section):
    """核函数参数"""
    model_config = SettingsConfigDict(populate_by_name=True, extra="forbid", env_prefix="OPENLOAD_")

    sigma_t: float = Field(default=4.0, gt=0)  # 小时
    sigma_d: float = Field(default=120.0, gt=0)  # 天


class SolverConfig(_Section):
    """OKL 交替最小化参数"""
    model_config = SettingsConfigDict(populate_by_name=True, extra="forbid", env_prefix="OPENLOAD_SOLVER_")

    max_iters: int = Field(default=100, ge=1)
    rel_tol: float = Field(default=1e-6, ge=0)
    seed: int = Field(default=0, alias="OPENLOAD_SEED")


class SplitConfig(_Section):
    """训练/验证/测试划分"""
    model_config = SettingsConfigDict(populate_by_name=True, extra="forbid", env_prefix="OPENLOAD_SPLIT_")

    train_days: int = Field(default=365, ge=1)
    validation_fraction: float = Field(default=0.2, ge=0, lt=1)
    seed: int = Field(default=0, alias="OPENLOAD_SEED")


class DataConfig(_Section):
    """数据预处理配置"""
    model_config = SettingsConfigDict(populate_by_name=True, extra="forbid", env_prefix="OPENLOAD_DATA_")

    dst_start_dates: list[date] = Field(default_factory=lambda: list(IRELAND_DST_START))
    dst_end_dates: list[date] = Field(default_factory=lambda: list(IRELAND_DST_END))
    holidays_file: Optional[str] = None
    float_format: str = "%.6f"


class ExperimentConfig(_Section):
    """单次训练实验配置"""
    model_config = SettingsConfigDict(populate_by_name=True, extra="forbid", env_prefix="OPENLOAD_EXPERIMENT_")

    kernel: str = "kd * kt * kc"
    method: Literal["krr", "okl"] = "krr"
    rank_p: Optional[int] = Field(default=None, ge=1)
    lambda_grid: list[float] = Field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    groups: list[str] = Field(default_factory=list)  # 空 = 全部电表

    @field_validator("lambda_grid")
    @classmethod
    def _check_grid(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("lambda 网格不能为空")
        if any(lam <= 0 for lam in v):
            raise ValueError(f"lambda 网格必须全部为正数: {v}")
        return v

    @model_validator(mode="after")
    def _check_rank(self) -> "ExperimentConfig":
        if self.method == "okl" and self.rank_p is None:
            raise ValueError("method=okl 时必须指定 rank_p")
        if self.method == "krr" and self.rank_p is not None:
            raise ValueError("rank_p 只适用于 method=okl")
        return self


class OklPartition(BaseModel):
    """bench 中一个 OKL 模型覆盖的电表分组及其秩"""
    groups: list[str]
    rank_p: int = Field(ge=1)


class BenchConfig(_Section):
    """对比实验配置"""
    model_config = SettingsConfigDict(populate_by_name=True, extra="forbid", env_prefix="OPENLOAD_BENCH_")

    presets: list[str] = Field(default_factory=lambda: ["am1", "am2", "sam1", "sam2", "mm1", "mm2"])
    okl_kernel: str = "mm2"
    okl_partitions: list[OklPartition] = Field(default_factory=lambda: [
        OklPartition(groups=["Residential", "Others"], rank_p=200),
        OklPartition(groups=["SME"], rank_p=485),
    ])


class AppConfig(BaseSettings):
    """应用总配置"""
    model_config = SettingsConfigDict(populate_by_name=True, env_prefix="OPENLOAD_")

    kernel: KernelConfig = Field(default_factory=KernelConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    debug: bool = False
    log_level: str = "INFO"

    @classmethod
    def load(cls, config_path: Optional[str] = None) -> "AppConfig":
        """
        加载配置，优先级：环境变量 > YAML配置文件 > 默认值
        """
        yaml_data = {}
        if config_path:
            if not Path(config_path).exists():
                raise ConfigError(f"配置文件不存在: {config_path}")
            yaml_data = _read_yaml(Path(config_path))
        else:
            # 尝试从默认路径加载
            for p in ["openload.yaml", "openload.yml", "config.yaml"]:
                if Path(p).exists():
                    yaml_data = _read_yaml(Path(p))
                    break

        sections = {
            "kernel": KernelConfig,
            "solver": SolverConfig,
            "split": SplitConfig,
            "data": DataConfig,
            "experiment": ExperimentConfig,
            "bench": BenchConfig,
        }
        try:
            config = cls()
            for name, section_cls in sections.items():
                if name in yaml_data:
                    setattr(config, name, section_cls(**(yaml_data[name] or {})))
        except ValidationError as e:
            raise ConfigError(f"配置无效: {e}") from e

        if "debug" in yaml_data and not os.environ.get("OPENLOAD_DEBUG"):
            config.debug = bool(yaml_data["debug"])
        if "log_level" in yaml_data and not os.environ.get("OPENLOAD_LOG_LEVEL"):
            config.log_level = yaml_data["log_level"]

        return config


def _read_yaml(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件顶层必须是映射: {path}")
    return data

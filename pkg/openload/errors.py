"""
OpenLoad 异常定义
每类错误对应一个命令行退出码：1=用法/配置错误，2=数据错误，3=数值计算失败
"""

from __future__ import annotations


class OpenLoadError(Exception):
    """所有 OpenLoad 错误的基类"""

    exit_code: int = 1


class ConfigError(OpenLoadError, ValueError):
    """配置或参数错误"""

    exit_code = 1


class KernelExprError(ConfigError):
    """核函数表达式错误（语法、未知原子、非法参数）"""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (位置 {position})"
        super().__init__(message)


class DataError(OpenLoadError, ValueError):
    """输入数据错误：无法解析的行、缺失文件、非法读数、预测缺口"""

    exit_code = 2


class NumericError(OpenLoadError, ArithmeticError):
    """数值计算失败：不收敛、出现非有限值、目标函数上升"""

    exit_code = 3

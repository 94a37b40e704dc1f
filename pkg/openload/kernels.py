"""
OpenLoad 核函数模块
日历特征 (t, d, c) 上的核原子、组合表达式语言、Gram 矩阵构造
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

from openload.errors import KernelExprError

logger = logging.getLogger(__name__)

HOURS_PER_DAY = 24.0
# d ∈ {1..366}，周期取 366 使第 366 天与第 1 天相邻
DAY_PERIOD = 366.0
DEFAULT_SIGMA_T = 4.0
DEFAULT_SIGMA_D = 120.0

N_WEEKDAYS = 7
HOLIDAY_CLASS = 7
MAX_DAY_TYPES = 8


@dataclass(frozen=True)
class CalendarPoint:
    """一个输入点：时刻 t（小时）、年内日序 d、日类型 c"""
    t: float
    d: float
    c: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.t < HOURS_PER_DAY:
            raise ValueError(f"时刻 t 必须在 [0, 24) 内: {self.t}")
        if not 1.0 <= self.d <= DAY_PERIOD:
            raise ValueError(f"日序 d 必须在 [1, 366] 内: {self.d}")
        if not 0 <= self.c < MAX_DAY_TYPES:
            raise ValueError(f"日类型 c 必须在 [0, {MAX_DAY_TYPES}) 内: {self.c}")


@dataclass(frozen=True, eq=False)
class CalendarArrays:
    """一组 CalendarPoint 的列式表示"""
    t: np.ndarray
    d: np.ndarray
    c: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def take(self, idx) -> "CalendarArrays":
        return CalendarArrays(self.t[idx], self.d[idx], self.c[idx])

    def to_points(self) -> list[CalendarPoint]:
        return [CalendarPoint(float(t), float(d), int(c)) for t, d, c in zip(self.t, self.d, self.c)]


Points = Union[Sequence[CalendarPoint], CalendarArrays]


def as_arrays(points: Points) -> CalendarArrays:
    """把点列表转换为列式数组"""
    if isinstance(points, CalendarArrays):
        return points
    n = len(points)
    return CalendarArrays(
        t=np.fromiter((p.t for p in points), dtype=float, count=n),
        d=np.fromiter((p.d for p in points), dtype=float, count=n),
        c=np.fromiter((p.c for p in points), dtype=np.int64, count=n),
    )


def periodic_distance(x: float, period: float) -> float:
    """h_P(x) = min(x, P - x)，要求 0 <= x <= P"""
    if period <= 0:
        raise ValueError(f"周期必须为正数: {period}")
    if not 0.0 <= x <= period:
        raise ValueError(f"距离 {x} 超出 [0, {period}]，请先对周期取模")
    return min(x, period - x)


def _periodic_matrix(a: np.ndarray, b: np.ndarray, period: float) -> np.ndarray:
    diff = np.abs(a[:, None] - b[None, :])
    return np.minimum(diff, period - diff)


# ==================== 表达式树 ====================

class KernelExpr:
    """核表达式基类，支持 + 与 * 组合"""

    def evaluate(self, x1: CalendarPoint, x2: CalendarPoint) -> float:
        raise NotImplementedError

    def matrix(self, rows: CalendarArrays, cols: CalendarArrays) -> np.ndarray:
        raise NotImplementedError

    def to_string(self) -> str:
        raise NotImplementedError

    def __str__(self) -> str:
        return self.to_string()

    def __add__(self, other: "KernelExpr") -> "KernelExpr":
        return Sum(_flatten(Sum, (self, other)))

    def __mul__(self, other: "KernelExpr") -> "KernelExpr":
        return Product(_flatten(Product, (self, other)))


@dataclass(frozen=True, eq=True)
class Kt(KernelExpr):
    """时刻核 exp(-h_24(|t1-t2|) / sigma_t)"""
    sigma: float = DEFAULT_SIGMA_T

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise KernelExprError(f"sigma 必须为正数: kt(sigma={self.sigma})")

    def evaluate(self, x1: CalendarPoint, x2: CalendarPoint) -> float:
        return math.exp(-periodic_distance(abs(x1.t - x2.t), HOURS_PER_DAY) / self.sigma)

    def matrix(self, rows: CalendarArrays, cols: CalendarArrays) -> np.ndarray:
        return np.exp(-_periodic_matrix(rows.t, cols.t, HOURS_PER_DAY) / self.sigma)

    def to_string(self) -> str:
        return f"kt(sigma={float(self.sigma)!r})"


@dataclass(frozen=True, eq=True)
class Kd(KernelExpr):
    """年内日序核 exp(-h_366(|d1-d2|) / sigma_d)"""
    sigma: float = DEFAULT_SIGMA_D

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise KernelExprError(f"sigma 必须为正数: kd(sigma={self.sigma})")

    def evaluate(self, x1: CalendarPoint, x2: CalendarPoint) -> float:
        return math.exp(-periodic_distance(abs(x1.d - x2.d), DAY_PERIOD) / self.sigma)

    def matrix(self, rows: CalendarArrays, cols: CalendarArrays) -> np.ndarray:
        return np.exp(-_periodic_matrix(rows.d, cols.d, DAY_PERIOD) / self.sigma)

    def to_string(self) -> str:
        return f"kd(sigma={float(self.sigma)!r})"


@dataclass(frozen=True, eq=True)
class Kc(KernelExpr):
    """日类型 delta 核"""

    def evaluate(self, x1: CalendarPoint, x2: CalendarPoint) -> float:
        return 1.0 if x1.c == x2.c else 0.0

    def matrix(self, rows: CalendarArrays, cols: CalendarArrays) -> np.ndarray:
        return (rows.c[:, None] == cols.c[None, :]).astype(float)

    def to_string(self) -> str:
        return "kc"


@dataclass(frozen=True, eq=True)
class Sum(KernelExpr):
    children: tuple[KernelExpr, ...]

    def evaluate(self, x1: CalendarPoint, x2: CalendarPoint) -> float:
        return sum(child.evaluate(x1, x2) for child in self.children)

    def matrix(self, rows: CalendarArrays, cols: CalendarArrays) -> np.ndarray:
        out = self.children[0].matrix(rows, cols)
        for child in self.children[1:]:
            out = out + child.matrix(rows, cols)
        return out

    def to_string(self) -> str:
        return " + ".join(child.to_string() for child in self.children)


@dataclass(frozen=True, eq=True)
class Product(KernelExpr):
    children: tuple[KernelExpr, ...]

    def evaluate(self, x1: CalendarPoint, x2: CalendarPoint) -> float:
        value = 1.0
        for child in self.children:
            value *= child.evaluate(x1, x2)
        return value

    def matrix(self, rows: CalendarArrays, cols: CalendarArrays) -> np.ndarray:
        out = self.children[0].matrix(rows, cols)
        for child in self.children[1:]:
            out = out * child.matrix(rows, cols)
        return out

    def to_string(self) -> str:
        parts = []
        for child in self.children:
            text = child.to_string()
            parts.append(f"({text})" if isinstance(child, Sum) else text)
        return " * ".join(parts)


ATOM_TYPES = (Kt, Kd, Kc)


def _flatten(kind: type, items) -> tuple[KernelExpr, ...]:
    out: list[KernelExpr] = []
    for item in items:
        if isinstance(item, kind):
            out.extend(item.children)
        else:
            out.append(item)
    return tuple(out)


def eval_atom(atom: KernelExpr, x1: CalendarPoint, x2: CalendarPoint) -> float:
    """计算单个核原子在 (x1, x2) 处的值"""
    if not isinstance(atom, ATOM_TYPES):
        raise TypeError(f"不是核原子: {atom!r}")
    return atom.evaluate(x1, x2)


def evaluate(expr: KernelExpr, x1: CalendarPoint, x2: CalendarPoint) -> float:
    """递归计算表达式在 (x1, x2) 处的值"""
    return expr.evaluate(x1, x2)


def gram(expr: KernelExpr, rows: Points, cols: Points | None = None) -> np.ndarray:
    """
    构造 Gram 矩阵，(i, j) 元素为 expr(rows[i], cols[j])
    cols 省略或与 rows 为同一对象时，只计算上三角并镜像，保证严格对称
    """
    symmetric = cols is None or cols is rows
    r = as_arrays(rows)
    if len(r) == 0:
        raise ValueError("Gram 矩阵的点列表不能为空")
    if symmetric:
        values = expr.matrix(r, r)
        upper = np.triu(values)
        values = upper + np.triu(values, 1).T
    else:
        c = as_arrays(cols)
        if len(c) == 0:
            raise ValueError("Gram 矩阵的点列表不能为空")
        values = expr.matrix(r, c)
    if not np.all(np.isfinite(values)):
        raise ValueError("Gram 矩阵含有非有限值")
    return values


# ==================== 表达式解析 ====================

_TOKEN_RE = re.compile(r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*()=]))")


class _Token(NamedTuple):
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise KernelExprError(f"无法识别的字符 {text[pos:].lstrip()[0]!r}", pos)
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    """
    递归下降解析:
        expr   := term ('+' term)*
        term   := factor ('*' factor)*
        factor := atom | '(' expr ')'
        atom   := 'kt' ['(' 'sigma' '=' number ')'] | 'kd' [...] | 'kc'
    """

    def __init__(self, text: str, sigma_t: float, sigma_d: float):
        self.tokens = _tokenize(text)
        self.i = 0
        self.defaults = {"kt": sigma_t, "kd": sigma_d}

    @property
    def current(self) -> _Token:
        return self.tokens[self.i]

    def _advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def _expect(self, text: str) -> _Token:
        tok = self.current
        if tok.text != text:
            found = tok.text or "结尾"
            raise KernelExprError(f"期望 {text!r}，实际为 {found!r}", tok.pos)
        return self._advance()

    def parse(self) -> KernelExpr:
        expr = self._expr()
        if self.current.kind != "end":
            raise KernelExprError(f"多余的内容 {self.current.text!r}", self.current.pos)
        return expr

    def _expr(self) -> KernelExpr:
        terms = [self._term()]
        while self.current.text == "+":
            self._advance()
            terms.append(self._term())
        return terms[0] if len(terms) == 1 else Sum(_flatten(Sum, terms))

    def _term(self) -> KernelExpr:
        factors = [self._factor()]
        while self.current.text == "*":
            self._advance()
            factors.append(self._factor())
        return factors[0] if len(factors) == 1 else Product(_flatten(Product, factors))

    def _factor(self) -> KernelExpr:
        tok = self.current
        if tok.text == "(":
            self._advance()
            expr = self._expr()
            self._expect(")")
            return expr
        if tok.kind == "name":
            return self._atom()
        found = tok.text or "结尾"
        raise KernelExprError(f"期望核原子或 '('，实际为 {found!r}", tok.pos)

    def _atom(self) -> KernelExpr:
        tok = self._advance()
        name = tok.text
        if name == "kc":
            return Kc()
        if name not in self.defaults:
            raise KernelExprError(f"未知的核函数原子: {name!r}", tok.pos)
        sigma = self.defaults[name]
        if self.current.text == "(":
            self._advance()
            key = self._advance()
            if key.text != "sigma":
                raise KernelExprError(f"期望参数 'sigma'，实际为 {key.text or '结尾'!r}", key.pos)
            self._expect("=")
            sigma = self._number()
            self._expect(")")
        if not sigma > 0:
            raise KernelExprError(f"sigma 必须为正数: {name}(sigma={sigma:g})", tok.pos)
        return Kt(sigma) if name == "kt" else Kd(sigma)

    def _number(self) -> float:
        sign = 1.0
        if self.current.text == "-":
            self._advance()
            sign = -1.0
        tok = self._advance()
        if tok.kind != "num":
            raise KernelExprError(f"期望数值，实际为 {tok.text or '结尾'!r}", tok.pos)
        return sign * float(tok.text)


def parse_kernel_expr(text: str, sigma_t: float = DEFAULT_SIGMA_T, sigma_d: float = DEFAULT_SIGMA_D) -> KernelExpr:
    """解析核表达式字符串，省略的 sigma 取默认值"""
    expr = _Parser(text, sigma_t, sigma_d).parse()
    logger.debug(f"核表达式已解析: {text!r} -> {expr}")
    return expr


# ==================== 预置模型 ====================

PRESETS: dict[str, str] = {
    "am1": "kd + kt",
    "am2": "kd + kt + kc",
    "sam1": "kd + kt * kc",
    "sam2": "(kd + kt) * kc",
    "mm1": "kd * kt",
    "mm2": "kd * kt * kc",
}

PRESET_LABELS: dict[str, str] = {
    "am1": "K^d+K^t",
    "am2": "K^d+K^t+K^c",
    "sam1": "K^d+K^t·K^c",
    "sam2": "(K^d+K^t)·K^c",
    "mm1": "K^d·K^t",
    "mm2": "K^d·K^t·K^c",
}

PRESET_FAMILIES: dict[str, str] = {
    "am1": "Additive Models",
    "am2": "Additive Models",
    "sam1": "Semi-Additive Models",
    "sam2": "Semi-Additive Models",
    "mm1": "Multiplicative Models",
    "mm2": "Multiplicative Models",
}


def preset_expr(name: str, sigma_t: float = DEFAULT_SIGMA_T, sigma_d: float = DEFAULT_SIGMA_D) -> KernelExpr:
    """根据预置名构造核表达式"""
    text = PRESETS.get(name.lower())
    if text is None:
        raise KernelExprError(f"未知的预置模型: {name}，可选: {list(PRESETS.keys())}")
    return parse_kernel_expr(text, sigma_t, sigma_d)

"""
OpenLoad 模型持久化
每个模型保存为一个目录：manifest.json 记录元信息，数值参数以小端 float64/int64 行主序写入旁路文件

目录结构:
model_dir/
├── manifest.json     # 方法、核表达式、lambda、时段、任务、选择日志、划分、数据集摘要
├── A.f64             # OKL: ℓ×p
├── B.f64             # OKL: m×p
├── support.i64       # KRR: 各任务观测时段下标首尾相接
├── offsets.i64       # KRR: 长度 m+1 的分段偏移
└── coefs.f64         # KRR: 各任务系数首尾相接
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

import numpy as np

from openload.errors import DataError
from openload.kernels import CalendarArrays, Points, parse_kernel_expr
from openload.krr import KrrModel, predict_krr
from openload.okl import OklModel, predict_okl

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
F64 = np.dtype("<f8")
I64 = np.dtype("<i8")

Model = Union[KrrModel, OklModel]


def _write_array(path: Path, arr: np.ndarray, dtype: np.dtype) -> None:
    np.ascontiguousarray(arr, dtype=dtype).tofile(path)


def _read_array(path: Path, dtype: np.dtype, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise DataError(f"模型文件缺失: {path}")
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != int(np.prod(shape)):
        raise DataError(f"{path.name} 大小不符: {arr.size} 个元素，期望形状 {shape}")
    return arr.reshape(shape).astype(dtype.newbyteorder("="))


@dataclass(eq=False)
class ModelArtifact:
    """训练好的模型及其可复现元信息"""
    model: Model
    meter_groups: list[str]
    groups: list[str] = field(default_factory=list)
    seed: int = 0
    split: dict = field(default_factory=dict)
    selection: list[dict] = field(default_factory=list)
    refit: bool = True
    dataset_digest: Optional[str] = None
    created_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))

    @property
    def method(self) -> str:
        return "okl" if isinstance(self.model, OklModel) else "krr"

    @property
    def task_ids(self) -> list[str]:
        return self.model.task_ids

    @property
    def param_count(self) -> int:
        return self.model.param_count

    def predict(self, query: Points, Kq: Optional[np.ndarray] = None) -> np.ndarray:
        if isinstance(self.model, OklModel):
            return predict_okl(self.model, query, Kq)
        return predict_krr(self.model, query, Kq)

    # ==================== 保存 ====================

    def _manifest(self) -> dict:
        m = self.model
        slots = m.slots
        manifest = {
            "format_version": FORMAT_VERSION,
            "method": self.method,
            "kernel": m.kernel.to_string(),
            "lambda": m.lam,
            "rank_p": m.rank_p if isinstance(m, OklModel) else None,
            "seed": self.seed,
            "slots": [[float(t), float(d), int(c)] for t, d, c in zip(slots.t, slots.d, slots.c)],
            "task_ids": list(m.task_ids),
            "meter_groups": list(self.meter_groups),
            "groups": list(self.groups),
            "trace": list(m.trace) if isinstance(m, OklModel) else [],
            "converged": bool(m.converged) if isinstance(m, OklModel) else None,
            "empty_tasks": list(m.empty_tasks) if isinstance(m, KrrModel) else [],
            "param_count": self.param_count,
            "selection": self.selection,
            "split": self.split,
            "refit": self.refit,
            "dataset_digest": self.dataset_digest,
            "created_at": self.created_at,
        }
        return manifest

    def save(self, path: str | Path) -> Path:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        m = self.model
        if isinstance(m, OklModel):
            _write_array(root / "A.f64", m.A, F64)
            _write_array(root / "B.f64", m.B, F64)
        else:
            offsets = np.zeros(m.n_tasks + 1, dtype=np.int64)
            offsets[1:] = np.cumsum([idx.size for idx in m.support])
            support = np.concatenate(m.support) if m.support else np.empty(0, dtype=np.int64)
            coefs = np.concatenate(m.coefs) if m.coefs else np.empty(0)
            _write_array(root / "support.i64", support, I64)
            _write_array(root / "offsets.i64", offsets, I64)
            _write_array(root / "coefs.f64", coefs, F64)

        with open(root / MANIFEST_FILE, "w", encoding="utf-8") as f:
            json.dump(self._manifest(), f, ensure_ascii=False, indent=2)
        logger.info(f"模型已保存: {root} ({self.method}, {self.param_count} 个参数)")
        return root

    # ==================== 读取 ====================

    @classmethod
    def load(cls, path: str | Path) -> "ModelArtifact":
        root = Path(path)
        manifest_path = root / MANIFEST_FILE
        if not manifest_path.exists():
            raise DataError(f"模型清单不存在: {manifest_path}")
        with open(manifest_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        if meta.get("format_version") != FORMAT_VERSION:
            raise DataError(f"不支持的模型格式版本: {meta.get('format_version')}")

        kernel = parse_kernel_expr(meta["kernel"])
        raw_slots = np.asarray(meta["slots"], dtype=float).reshape(-1, 3)
        slots = CalendarArrays(t=raw_slots[:, 0], d=raw_slots[:, 1], c=raw_slots[:, 2].astype(np.int64))
        task_ids = [str(t) for t in meta["task_ids"]]
        ell, m = len(slots), len(task_ids)

        if meta["method"] == "okl":
            p = int(meta["rank_p"])
            model: Model = OklModel(
                kernel=kernel, lam=float(meta["lambda"]), rank_p=p, slots=slots,
                A=_read_array(root / "A.f64", F64, (ell, p)),
                B=_read_array(root / "B.f64", F64, (m, p)),
                task_ids=task_ids, trace=[float(v) for v in meta.get("trace", [])],
                converged=bool(meta.get("converged")),
            )
        elif meta["method"] == "krr":
            offsets = _read_array(root / "offsets.i64", I64, (m + 1,))
            total = int(offsets[-1])
            support = _read_array(root / "support.i64", I64, (total,))
            coefs = _read_array(root / "coefs.f64", F64, (total,))
            model = KrrModel(
                kernel=kernel, lam=float(meta["lambda"]), slots=slots, task_ids=task_ids,
                support=[support[offsets[j]:offsets[j + 1]] for j in range(m)],
                coefs=[coefs[offsets[j]:offsets[j + 1]] for j in range(m)],
                empty_tasks=list(meta.get("empty_tasks", [])),
            )
        else:
            raise DataError(f"未知的模型方法: {meta['method']}")

        if model.param_count != meta.get("param_count", model.param_count):
            raise DataError(f"参数个数不符: 清单 {meta['param_count']}，实际 {model.param_count}")

        return cls(
            model=model,
            meter_groups=list(meta.get("meter_groups", [])),
            groups=list(meta.get("groups", [])),
            seed=int(meta.get("seed", 0)),
            split=dict(meta.get("split", {})),
            selection=list(meta.get("selection", [])),
            refit=bool(meta.get("refit", True)),
            dataset_digest=meta.get("dataset_digest"),
            created_at=meta.get("created_at", ""),
        )

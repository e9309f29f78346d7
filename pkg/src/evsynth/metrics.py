"""Per-pixel image quality metrics and per-frame-index degradation curves.

All metrics take a ground-truth image ``gt`` and a prediction ``pred`` of the
same shape with values in [0, 1] and are computed in float64 over every
element jointly (all channels share one mean).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .tensor import ssim_map

EPS = 1e-4
PSNR_CAP = 100.0
METRIC_NAMES = ("l1", "l2", "abs_rel", "sqr_rel", "rmse_lin", "rmse_log", "rmse_scl",
                "delta1", "delta2", "delta3", "psnr", "ssim")


def _pair(gt, pred):
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
    if gt.size == 0:
        raise ValueError("empty images")
    return gt, pred


def l1(gt, pred) -> float:
    gt, pred = _pair(gt, pred)
    return float(np.mean(np.abs(gt - pred)))


def l2(gt, pred) -> float:
    """Mean squared difference (the squared-norm average, not its root)."""
    gt, pred = _pair(gt, pred)
    return float(np.mean((gt - pred) ** 2))


def abs_rel(gt, pred, eps: float = EPS) -> float:
    gt, pred = _pair(gt, pred)
    return float(np.mean(np.abs(gt - pred) / np.maximum(gt, eps)))


def sqr_rel(gt, pred, eps: float = EPS) -> float:
    gt, pred = _pair(gt, pred)
    return float(np.mean((gt - pred) ** 2 / np.maximum(gt, eps)))


def rmse_lin(gt, pred) -> float:
    return math.sqrt(l2(gt, pred))


def rmse_log(gt, pred, eps: float = EPS) -> float:
    gt, pred = _pair(gt, pred)
    return float(np.sqrt(np.mean((np.log(gt + eps) - np.log(pred + eps)) ** 2)))


def rmse_scl(gt, pred, eps: float = EPS, root: bool = False) -> float:
    """Variance of the log difference; ``root=True`` returns its square root."""
    gt, pred = _pair(gt, pred)
    d = np.log(gt + eps) - np.log(pred + eps)
    n = d.size
    val = float(np.sum(d * d) / n - np.sum(d) ** 2 / n ** 2)
    return math.sqrt(max(val, 0.0)) if root else val


def delta_thresholds(gt, pred, eps: float = EPS) -> tuple:
    gt, pred = _pair(gt, pred)
    a = np.maximum(gt, eps)
    b = np.maximum(pred, eps)
    ratio = np.maximum(a / b, b / a)
    return tuple(float(np.mean(ratio < 1.25 ** i)) for i in (1, 2, 3))


def psnr(gt, pred, m: float = 1.0) -> float:
    err = l2(gt, pred)
    if err == 0:
        return PSNR_CAP
    return 10.0 * math.log10(m / err)


def ssim_value(gt, pred, window: int = 11, L: float = 1.0) -> float:
    gt, pred = _pair(gt, pred)
    s, _ = ssim_map(gt, pred, window, L)
    return float(s.mean())


@dataclass
class MetricReport:
    l1: float
    l2: float
    abs_rel: float
    sqr_rel: float
    rmse_lin: float
    rmse_log: float
    rmse_scl: float
    delta1: float
    delta2: float
    delta3: float
    psnr: float
    ssim: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.as_dict().items())

    @classmethod
    def loads(cls, text: str) -> "MetricReport":
        vals = {}
        for line in text.splitlines():
            if line.strip() and not line.startswith("#"):
                k, _, v = line.partition("=")
                vals[k.strip()] = float(v)
        return cls(**{k: vals[k] for k in METRIC_NAMES})


def frame_metrics(gt, pred, eps: float = EPS, scl_root: bool = False) -> MetricReport:
    d1, d2, d3 = delta_thresholds(gt, pred, eps)
    return MetricReport(
        l1=l1(gt, pred), l2=l2(gt, pred), abs_rel=abs_rel(gt, pred, eps),
        sqr_rel=sqr_rel(gt, pred, eps), rmse_lin=rmse_lin(gt, pred),
        rmse_log=rmse_log(gt, pred, eps), rmse_scl=rmse_scl(gt, pred, eps, scl_root),
        delta1=d1, delta2=d2, delta3=d3, psnr=psnr(gt, pred), ssim=ssim_value(gt, pred))


@dataclass
class FrameIndexCurve:
    metric: str
    values: list  # values[i - 1] is the metric at the i-th frame after the key-frame

    def __len__(self):
        return len(self.values)


def evaluate_sequences(preds: Sequence[Sequence], gts: Sequence[Sequence], **kw):
    """Report and curves over a set of equally long sequences.

    Curves hold, for each index i, the mean over sequences of the metric at
    frame i; the report is the mean over every evaluated frame.
    """
    if len(preds) != len(gts) or not preds:
        raise ValueError("need the same non-zero number of predicted and reference sequences")
    length = len(preds[0])
    per_index = [[] for _ in range(length)]
    for p_seq, g_seq in zip(preds, gts):
        if len(p_seq) != len(g_seq) or len(p_seq) != length:
            raise ValueError("sequence length mismatch")
        for i, (p, g) in enumerate(zip(p_seq, g_seq)):
            per_index[i].append(frame_metrics(g, p, **kw))
    curves = {name: FrameIndexCurve(name, [math.fsum(getattr(r, name) for r in rs) / len(rs)
                                           for rs in per_index]) for name in METRIC_NAMES}
    flat = [r for rs in per_index for r in rs]
    report = MetricReport(**{name: math.fsum(getattr(r, name) for r in flat) / len(flat)
                             for name in METRIC_NAMES})
    return report, curves


def evaluate_sequence(pred_frames: Sequence, gt_frames: Sequence, **kw):
    """Metrics for one synthesized sequence against its reference frames."""
    if len(pred_frames) != len(gt_frames):
        raise ValueError(f"length mismatch: {len(pred_frames)} vs {len(gt_frames)}")
    if not pred_frames:
        raise ValueError("empty sequence")
    return evaluate_sequences([pred_frames], [gt_frames], **kw)


def curves_csv(curves: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_index", "metric", "value"])
    for name in METRIC_NAMES:
        if name in curves:
            for i, v in enumerate(curves[name].values, 1):
                w.writerow([i, name, repr(v)])
    return buf.getvalue()

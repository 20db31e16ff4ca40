"""PSNR and SSIM evaluation metrics, plus the per-sample report."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import ssim_value
from .tensor import Tensor, ShapeError


def _clamped(x: Tensor, max_val: float = 1.0) -> Tensor:
    return T.Tensor(np.clip(x.data, 0.0, max_val))


def psnr(pred: Tensor, tgt: Tensor, max_val: float = 1.0) -> float:
    if pred.shape != tgt.shape:
        raise ShapeError(f"psnr: shape mismatch {pred.shape} vs {tgt.shape}")
    p = np.clip(pred.data.astype(np.float64), 0.0, max_val)
    t = np.clip(tgt.data.astype(np.float64), 0.0, max_val)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def ssim_metric(pred: Tensor, tgt: Tensor) -> float:
    """Same formula as the SSIM loss term, on clamped images, without a graph."""
    with T.no_grad():
        return ssim_value(_clamped(pred), _clamped(tgt)).item()


@dataclass
class MetricsReport:
    sample_ids: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, sample_id: str, psnr_db: float, ssim_val: float) -> None:
        self.sample_ids.append(sample_id)
        self.psnr.append(psnr_db)
        self.ssim.append(ssim_val)

    @property
    def count(self) -> int:
        return len(self.sample_ids)

    @property
    def infinite_psnr(self) -> int:
        return sum(math.isinf(v) for v in self.psnr)

    @property
    def mean_psnr(self) -> float:
        """Mean over finite values; +inf only when every sample is exact."""
        finite = [v for v in self.psnr if not math.isinf(v)]
        if not finite:
            return math.inf if self.psnr else math.nan
        return math.fsum(finite) / len(finite)

    @property
    def mean_ssim(self) -> float:
        return math.fsum(self.ssim) / len(self.ssim) if self.ssim else math.nan

    def lines(self) -> str:
        """Machine-readable ``sample_id<TAB>psnr<TAB>ssim`` rows."""
        return "".join(f"{sid}\t{p:.6f}\t{s:.6f}\n"
                       for sid, p, s in zip(self.sample_ids, self.psnr, self.ssim))

    def table(self) -> str:
        width = max([len("sample")] + [len(s) for s in self.sample_ids])
        rows = [f"{'sample':<{width}}  {'PSNR(dB)':>10}  {'SSIM':>8}"]
        rows += [f"{sid:<{width}}  {p:>10.4f}  {s:>8.4f}"
                 for sid, p, s in zip(self.sample_ids, self.psnr, self.ssim)]
        rows.append(f"{'mean':<{width}}  {self.mean_psnr:>10.4f}  {self.mean_ssim:>8.4f}")
        if self.infinite_psnr:
            rows.append(f"({self.infinite_psnr} of {self.count} samples have infinite PSNR "
                        "and are excluded from the PSNR mean)")
        return "\n".join(rows) + "\n"

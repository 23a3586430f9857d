"""Inverse-depth evaluation metrics: thresholded accuracy, iMAE, iRMSE.

All metrics operate in inverse-depth units (1/m).  Pixel validity is
value-driven: the ratio metrics need both prediction and label > 0, while
iMAE/iRMSE need only a labelled pixel — a prediction of 0 (dropped
geometry) counts against the model.  Pooling is global over all pixels of
a split, never per-image averaging.
"""

from dataclasses import dataclass

import numpy as np

from .net import refine

DELTA_THRESHOLDS = (1.05, 1.15, 1.25, 1.25**2, 1.25**3)


class MetricsError(ValueError):
    pass


def _ratio_mask(d_star, d_hq, mask):
    return np.asarray(mask, dtype=bool) & (d_star > 0) & (d_hq > 0)


def thresholded_accuracy(d_star, d_hq, mask, thr: float) -> float:
    """Fraction of valid pixels with max(label/pred, pred/label) < thr."""
    if thr <= 1.0:
        raise MetricsError(f"threshold must exceed 1, got {thr}")
    d_star = np.asarray(d_star, dtype=np.float64)
    d_hq = np.asarray(d_hq, dtype=np.float64)
    valid = _ratio_mask(d_star, d_hq, mask)
    n = int(valid.sum())
    if n == 0:
        raise MetricsError("thresholded accuracy undefined: no valid pixels")
    ratio = np.maximum(
        np.divide(d_hq, d_star, out=np.zeros_like(d_hq), where=valid),
        np.divide(d_star, d_hq, out=np.zeros_like(d_hq), where=valid),
    )
    return float((ratio[valid] < thr).sum() / n)


def _abs_errors(d_star, d_hq, mask):
    d_star = np.asarray(d_star, dtype=np.float64)
    d_hq = np.asarray(d_hq, dtype=np.float64)
    valid = np.asarray(mask, dtype=bool) & (d_hq > 0)
    if not valid.any():
        raise MetricsError("error metric undefined: no labelled pixels")
    return np.abs(d_star - d_hq)[valid]


def imae(d_star, d_hq, mask) -> float:
    """Mean absolute inverse-depth error over labelled pixels."""
    return float(_abs_errors(d_star, d_hq, mask).mean())


def irmse(d_star, d_hq, mask) -> float:
    """Root-mean-square inverse-depth error over labelled pixels."""
    e = _abs_errors(d_star, d_hq, mask)
    return float(np.sqrt(np.mean(e * e)))


@dataclass
class MetricsReport:
    delta: dict  # threshold -> accuracy in [0, 1]
    imae: float
    irmse: float
    n_pixels: int  # labelled pixels behind imae/irmse

    def row(self) -> str:
        cells = [f"{self.delta[t]:.4f}" for t in DELTA_THRESHOLDS]
        cells += [f"{self.imae:.6f}", f"{self.irmse:.6f}"]
        return " ".join(cells)

    def __str__(self):
        return self.row()

    def to_dict(self) -> dict:
        return {
            "delta": {str(t): self.delta[t] for t in DELTA_THRESHOLDS},
            "imae": self.imae,
            "irmse": self.irmse,
            "n_pixels": self.n_pixels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        delta = {float(k): float(v) for k, v in d["delta"].items()}
        return cls(
            delta={t: delta[t] for t in DELTA_THRESHOLDS},
            imae=float(d["imae"]),
            irmse=float(d["irmse"]),
            n_pixels=int(d["n_pixels"]),
        )


def _header(width: int = 8) -> str:
    return f"{'mode':{width}s} δ1.05  δ1.15  δ1.25  δ1.56  δ1.95  iMAE     iRMSE"


HEADER = _header()


def report_table(reports: dict) -> str:
    """Flat text table, one row per mode, fixed column order."""
    width = max([8] + [len(mode) for mode in reports])
    lines = [_header(width)]
    for mode, report in reports.items():
        lines.append(f"{mode:{width}s} {report.row()}")
    return "\n".join(lines) + "\n"


class MetricsAccumulator:
    """Global numerator/denominator pooling across many view planes."""

    def __init__(self):
        self._delta_hits = {t: 0 for t in DELTA_THRESHOLDS}
        self._delta_n = 0
        self._abs_sum = 0.0
        self._sq_sum = 0.0
        self._n = 0

    def add(self, d_star, d_hq, mask=None) -> None:
        d_star = np.asarray(d_star, dtype=np.float64)
        d_hq = np.asarray(d_hq, dtype=np.float64)
        mask = np.ones(d_hq.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        ratio_valid = _ratio_mask(d_star, d_hq, mask)
        if ratio_valid.any():
            ratio = np.maximum(d_hq[ratio_valid] / d_star[ratio_valid],
                               d_star[ratio_valid] / d_hq[ratio_valid])
            for t in DELTA_THRESHOLDS:
                self._delta_hits[t] += int((ratio < t).sum())
            self._delta_n += int(ratio_valid.sum())
        labelled = mask & (d_hq > 0)
        if labelled.any():
            e = np.abs(d_star - d_hq)[labelled]
            self._abs_sum += float(e.sum())
            self._sq_sum += float((e * e).sum())
            self._n += int(labelled.sum())

    def report(self) -> MetricsReport:
        if self._n == 0 or self._delta_n == 0:
            raise MetricsError("metrics undefined: no valid pixels accumulated")
        return MetricsReport(
            delta={t: self._delta_hits[t] / self._delta_n for t in DELTA_THRESHOLDS},
            imae=self._abs_sum / self._n,
            irmse=float(np.sqrt(self._sq_sum / self._n)),
            n_pixels=self._n,
        )


def evaluate(pairs, params, config) -> dict:
    """Metrics for a split: the unrefined input floor and the refined output.

    ``pairs`` iterates over (bundle, d_hq) with d_hq shaped (V, H, W);
    pooling is global across every view of every bundle.
    """
    acc = {"input": MetricsAccumulator(), "refined": MetricsAccumulator()}
    for bundle, d_hq in pairs:
        refined = refine(bundle, params, config)
        for t in range(d_hq.shape[0]):
            acc["input"].add(bundle.idepth_lq[t], d_hq[t])
            acc["refined"].add(refined[t], d_hq[t])
    return {mode: a.report() for mode, a in acc.items()}

"""Symmetric per-tensor INT8 quantization and its error statistics.

One positive scale per tensor, codes clamped to [-127, 127] (never -128, so
negating a tensor negates its codes exactly). Rounding is half-to-even.
`fake_quant` is the differentiable training-time form: quantize-dequantize
in the forward pass, identity straight-through in the backward pass.

The stored scale is nudged by at most 1 ulp onto a value that survives the
float32 round trip s -> 127*s -> /127 unchanged; without this, repeated
fake quantization could drift the scale by 1 ulp and break bitwise
idempotence. For almost all inputs (including max|w|=1 -> scale 1/127) the
nudge is a no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .errors import ContractError, NumericFaultError

_F32_127 = np.float32(127.0)


@dataclass
class QuantizedTensor:
    """INT8 codes plus one real scale; dequantized value is code * scale."""

    values: np.ndarray  # int8, in [-127, 127]
    scale: float        # > 0, float32-representable
    shape: tuple[int, ...]


@dataclass
class QuantErrorStats:
    """Pooled per-entry quantization error statistics over an INT8 weight set."""

    mean: float
    std: float
    pearson_r: float
    qq_points: list[tuple[float, float]]          # (theoretical, empirical) quantiles
    magnitude_bins: list[tuple[float, float]]     # (bin center of |w|, mean |error|)
    n_values: int

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "pearson_r": self.pearson_r,
            "qq_points": [[t, e] for t, e in self.qq_points],
            "magnitude_bins": [[c, m] for c, m in self.magnitude_bins],
            "n_values": self.n_values,
        }


def _stable_scale(raw: np.float32) -> np.float32:
    """Nudge a scale onto the fixed point of s -> f32(f32(127*s)/127)."""
    snapped = np.float32(np.float32(raw * _F32_127) / _F32_127)
    if not np.isfinite(snapped) or snapped <= 0:
        return raw
    return snapped


def quantize_symmetric(w) -> QuantizedTensor:
    """Quantize to INT8 with scale max|w|/127 (1.0 for an all-zero tensor)."""
    arr = w.data if isinstance(w, Tensor) else np.asarray(w)
    if not np.isfinite(arr).all():
        raise NumericFaultError("quantize_symmetric: non-finite input")
    amax = np.abs(arr).max() if arr.size else 0.0
    if amax == 0.0:
        scale = np.float32(1.0)
    else:
        scale = _stable_scale(np.float32(np.float32(amax) / _F32_127))
    codes = np.clip(np.rint(arr / scale), -127, 127).astype(np.int8)
    return QuantizedTensor(values=codes, scale=float(scale), shape=arr.shape)


def dequantize(q: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    return (q.values.astype(dtype) * dtype(q.scale)).reshape(q.shape)


def fake_quant(w: Tensor) -> Tensor:
    """Quantize-dequantize as a graph node with identity straight-through gradient.

    Under per-tensor symmetric scaling nothing saturates (|w| <= max|w| by
    definition), so the straight-through estimator passes the upstream
    gradient unchanged to every entry.
    """
    q = quantize_symmetric(w.data)
    out = dequantize(q, dtype=w.data.dtype.type)

    def backward(g):
        return (g,)

    return autodiff._node(out, (w,), backward, "fake_quant")


def quant_error_report(fp_weights: dict[str, np.ndarray], int8_names) -> QuantErrorStats:
    """Pooled error statistics e = w - dequantize(quantize(w)) over the INT8 set.

    Returns mean/std of the pooled error, Pearson r between original and
    dequantized values, 99 quantile pairs against a normal fitted to the
    errors, and mean |e| over 10 equal-width bins of |w|.
    """
    names = [n for n in int8_names if n in fp_weights]
    if not names:
        raise ContractError("quant_error_report: empty INT8 set")
    missing = set(int8_names) - set(fp_weights)
    if missing:
        raise ContractError(f"quant_error_report: names not in weight map: {sorted(missing)}")

    originals = []
    deqs = []
    for name in sorted(names):
        w = np.asarray(fp_weights[name], dtype=np.float64)
        q = quantize_symmetric(w)
        originals.append(w.reshape(-1))
        deqs.append(dequantize(q, dtype=np.float64).reshape(-1))
    w_all = np.concatenate(originals)
    dq_all = np.concatenate(deqs)
    err = w_all - dq_all

    mean = float(err.mean())
    std = float(err.std())

    if w_all.std() == 0.0 or dq_all.std() == 0.0:
        pearson = 1.0 if np.array_equal(w_all, dq_all) else 0.0
    else:
        pearson = float(np.corrcoef(w_all, dq_all)[0, 1])

    from scipy.stats import norm

    ps = np.arange(1, 100) / 100.0
    theoretical = norm.ppf(ps, loc=mean, scale=std) if std > 0 else np.full(99, mean)
    empirical = np.quantile(err, ps)
    qq = [(float(t), float(e)) for t, e in zip(theoretical, empirical)]

    mags = np.abs(w_all)
    edges = np.linspace(0.0, float(mags.max()) if mags.max() > 0 else 1.0, 11)
    centers = 0.5 * (edges[:-1] + edges[1:])
    bins = []
    idx = np.clip(np.digitize(mags, edges[1:-1]), 0, 9)
    for b in range(10):
        sel = idx == b
        bins.append((float(centers[b]), float(np.abs(err[sel]).mean()) if sel.any() else 0.0))

    return QuantErrorStats(
        mean=mean,
        std=std,
        pearson_r=pearson,
        qq_points=qq,
        magnitude_bins=bins,
        n_values=int(err.size),
    )

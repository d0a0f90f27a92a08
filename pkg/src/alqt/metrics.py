"""Training losses and segmentation evaluation metrics.

Losses (differentiable, built on the autodiff graph):
  stage-1 hybrid   BCE + soft Dice + lambda_ortho * orthogonality penalty
  QAT              BCE + soft Dice

Evaluation metrics (plain numpy, on hard 0.5-thresholded masks):
  Dice / IoU, normalized surface distance (NSD, 4-connectivity boundaries,
  tolerance in pixels), windowed SSIM maps (11x11 Gaussian, sigma 1.5) and
  their signed difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import autodiff
from .adapters import AdapterState, ortho_penalty
from .autodiff import Tensor
from .errors import ContractError, ShapeError

DICE_EPS = 1e-6

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

NSD_DEFAULT_TOL = 2.0  # pixels; MedSAM-protocol convention


# -- losses --------------------------------------------------------------------


def _check_binary_target(target: np.ndarray) -> None:
    if not np.all((target == 0) | (target == 1)):
        raise ContractError("target mask must be binary (0/1)")


def bce_dice_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixelwise BCE on sigmoid(logits) plus soft Dice loss.

    BCE uses the logit form mean(softplus(z) - z*t), which equals the
    cross-entropy of sigmoid(z) without overflow. Dice pools all pixels:
    1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps).
    """
    target = np.asarray(target)
    if logits.shape != target.shape:
        raise ShapeError(f"loss: logits {logits.shape} vs target {target.shape}")
    _check_binary_target(target)
    t = Tensor(target.astype(logits.dtype.type))

    bce = autodiff.tmean(autodiff.sub(autodiff.softplus(logits), autodiff.mul(logits, t)))

    p = autodiff.sigmoid(logits)
    inter = autodiff.tsum(autodiff.mul(p, t))
    denom = autodiff.add(autodiff.tsum(p), autodiff.tsum(t))
    dice = autodiff.sub(
        Tensor(np.asarray(1.0, dtype=logits.dtype.type)),
        autodiff.div(inter * 2.0 + DICE_EPS, denom + DICE_EPS),
    )
    return autodiff.add(bce, dice)


def stage1_loss(logits: Tensor, target: np.ndarray, adapter_states: list[AdapterState],
                lambda_ortho: float) -> Tensor:
    """Hybrid full-precision loss: BCE + Dice + lambda_ortho * sum of ortho penalties."""
    loss = bce_dice_loss(logits, target)
    if adapter_states and lambda_ortho != 0.0:
        penalty = ortho_penalty(adapter_states[0])
        for s in adapter_states[1:]:
            penalty = autodiff.add(penalty, ortho_penalty(s))
        loss = autodiff.add(loss, penalty * float(lambda_ortho))
    return loss


def qat_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Quantization-aware loss: BCE + Dice, no orthogonality term.

    Rank masks are plain arrays outside the graph, so no gradient with
    respect to them exists by construction.
    """
    return bce_dice_loss(logits, target)


# -- hard-mask metrics -----------------------------------------------------------


def dice_iou(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Dice and IoU of two binary masks; empty-vs-empty counts as perfect."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"dice_iou: {pred.shape} vs {target.shape}")
    _check_binary_target(pred)
    _check_binary_target(target)
    p = pred.astype(bool)
    t = target.astype(bool)
    inter = np.logical_and(p, t).sum()
    psum = p.sum()
    tsum = t.sum()
    union = psum + tsum - inter
    if psum + tsum == 0:
        return 1.0, 1.0
    dice = 2.0 * inter / (psum + tsum)
    iou = inter / union if union > 0 else 1.0
    return float(dice), float(iou)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels 4-adjacent to background (image border counts as background)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def nsd(pred: np.ndarray, target: np.ndarray, tol: float = NSD_DEFAULT_TOL) -> float:
    """Symmetric normalized surface distance at pixel tolerance `tol`.

    Fraction of each mask's boundary pixels within Euclidean distance `tol`
    of the other mask's boundary, averaged over the two directions. Both
    masks empty -> 1.0; exactly one empty -> 0.0.
    """
    if tol < 0:
        raise ContractError(f"nsd: tolerance must be >= 0, got {tol}")
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"nsd: {pred.shape} vs {target.shape}")
    p_empty = not pred.any()
    t_empty = not target.any()
    if p_empty and t_empty:
        return 1.0
    if p_empty or t_empty:
        return 0.0
    bp = boundary_pixels(pred)
    bt = boundary_pixels(target)
    # exact Euclidean distance to the other boundary via distance transform
    dist_to_bt = distance_transform_edt(~bt)
    dist_to_bp = distance_transform_edt(~bp)
    frac_p = (dist_to_bt[bp] <= tol).mean()
    frac_t = (dist_to_bp[bt] <= tol).mean()
    return float(0.5 * (frac_p + frac_t))


# -- SSIM -----------------------------------------------------------------------


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter2d(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable same-size filtering with reflect padding."""
    pad = len(k1d) // 2
    a = np.pad(img, ((pad, pad), (0, 0)), mode="reflect")
    rows = np.zeros_like(img, dtype=np.float64)
    for i, w in enumerate(k1d):
        rows += w * a[i:i + img.shape[0], :]
    a = np.pad(rows, ((0, 0), (pad, pad)), mode="reflect")
    out = np.zeros_like(rows)
    for j, w in enumerate(k1d):
        out += w * a[:, j:j + img.shape[1]]
    return out


def ssim_map(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-pixel SSIM map and its mean, for images in [0, 1].

    Standard windowed SSIM: 11x11 Gaussian window (sigma 1.5), dynamic
    range 1, C1 = 0.01^2, C2 = 0.03^2, reflect padding at the borders.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim_map: {a.shape} vs {b.shape}")
    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _filter2d(a, k)
    mu_b = _filter2d(b, k)
    var_a = _filter2d(a * a, k) - mu_a * mu_a
    var_b = _filter2d(b * b, k) - mu_b * mu_b
    cov = _filter2d(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    smap = num / den
    return smap, float(smap.mean())


def delta_ssim(map_qat: np.ndarray, map_base: np.ndarray) -> np.ndarray:
    """Signed per-pixel difference map_qat - map_base."""
    map_qat = np.asarray(map_qat)
    map_base = np.asarray(map_base)
    if map_qat.shape != map_base.shape:
        raise ShapeError(f"delta_ssim: {map_qat.shape} vs {map_base.shape}")
    return map_qat - map_base


# -- per-split report -------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-sample dice/iou/nsd plus mean and (population) std aggregates."""

    per_sample: list[dict]
    aggregate: dict[str, dict[str, float]]

    @classmethod
    def from_samples(cls, rows: list[dict]) -> "MetricsReport":
        agg = {}
        for key in ("dice", "iou", "nsd"):
            vals = np.array([r[key] for r in rows], dtype=np.float64)
            agg[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return cls(per_sample=rows, aggregate=agg)

    def to_dict(self) -> dict:
        return {"per_sample": self.per_sample, "aggregate": self.aggregate}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(per_sample=d["per_sample"], aggregate=d["aggregate"])

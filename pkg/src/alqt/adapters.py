"""SVD-parameterized low-rank adapters with budgeted rank pruning.

Each adapted layer carries a residual delta_W = P @ diag(lam * m) @ Q on top
of its frozen weight: P (d_out x r_max) and Q (r_max x d_in) are learnable
bases regularized toward orthogonality, lam holds learnable singular
values, and m is a binary component mask. The mask is a plain numpy vector,
never a graph node, so no gradient path to it can exist.

Component importance is |lam_i| * |dL/dlam_i| averaged between pruning
events; pruning ranks all active components across all layers and keeps the
top `budget` (masks only ever go 1 -> 0).

A fixed-rank LoRA state (delta_W = B @ A) is included as the ablation
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .errors import ContractError, ShapeError


@dataclass
class AdapterConfig:
    r_max: int = 8
    r_target: int = 4
    prune_epochs: tuple[int, ...] = (3, 7, 12)
    lambda_ortho: float = 0.003

    def __post_init__(self):
        if self.r_max <= 0 or self.r_target <= 0 or self.r_target > self.r_max:
            raise ContractError(
                f"adapter config needs 0 < r_target <= r_max, got {self.r_target}/{self.r_max}"
            )
        if list(self.prune_epochs) != sorted(set(self.prune_epochs)):
            raise ContractError(f"prune_epochs must be strictly increasing: {self.prune_epochs}")

    def to_dict(self) -> dict:
        return {
            "r_max": self.r_max,
            "r_target": self.r_target,
            "prune_epochs": list(self.prune_epochs),
            "lambda_ortho": self.lambda_ortho,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        return cls(
            r_max=d["r_max"],
            r_target=d["r_target"],
            prune_epochs=tuple(d["prune_epochs"]),
            lambda_ortho=d["lambda_ortho"],
        )


class AdapterState:
    """Per-layer adapter parameters plus the importance accumulator."""

    def __init__(self, layer_name: str, d_out: int, d_in: int, r_max: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.layer_name = layer_name
        self.r_max = r_max
        init = rng.normal(0.0, 0.02, size=(d_out, r_max))
        self.P = Tensor(init.astype(dtype), requires_grad=True, dtype=dtype)
        self.Q = Tensor(rng.normal(0.0, 0.02, size=(r_max, d_in)).astype(dtype),
                        requires_grad=True, dtype=dtype)
        # lam = 0 makes the adapted model exactly equal the frozen base at start
        self.lam = Tensor(np.zeros(r_max, dtype=dtype), requires_grad=True, dtype=dtype)
        self.mask = np.ones(r_max, dtype=dtype)
        self.importance_acc = np.zeros(r_max, dtype=np.float64)
        self._acc_steps = 0

    @property
    def active(self) -> int:
        return int(self.mask.sum())

    def trainable_params(self) -> dict[str, Tensor]:
        n = self.layer_name
        return {
            f"{n}.adapter.P": self.P,
            f"{n}.adapter.Q": self.Q,
            f"{n}.adapter.lambda": self.lam,
        }


def adapter_delta(s: AdapterState) -> Tensor:
    """Materialized residual P @ diag(lam * m) @ Q (test/inspection path)."""
    d_out, r = s.P.shape
    r2, d_in = s.Q.shape
    if r != s.r_max or r2 != s.r_max or s.lam.shape != (s.r_max,) or s.mask.shape != (s.r_max,):
        raise ContractError(
            f"{s.layer_name}: inconsistent adapter shapes P{s.P.shape} Q{s.Q.shape} "
            f"lam{s.lam.shape} m{s.mask.shape}"
        )
    gated = autodiff.mul(s.lam, Tensor(s.mask, dtype=s.mask.dtype))
    return autodiff.matmul(autodiff.mul(s.P, autodiff.reshape(gated, (1, s.r_max))), s.Q)


def adapted_forward(x: Tensor, w_frozen: Tensor, s: AdapterState,
                    bias: Tensor | None = None) -> Tensor:
    """x @ (W + delta_W)^T without materializing delta_W.

    Computed as x @ W^T + ((x @ Q^T) * (lam*m)) @ P^T; with the base weight
    frozen, gradients reach only the adapter parameters.
    """
    if x.shape[-1] != w_frozen.shape[1]:
        raise ShapeError(
            f"{s.layer_name}: input dim {x.shape[-1]} vs weight {w_frozen.shape}"
        )
    base = autodiff.matmul(x, autodiff.transpose(w_frozen, (1, 0)))
    gated = autodiff.mul(s.lam, Tensor(s.mask, dtype=s.mask.dtype))
    proj = autodiff.matmul(x, autodiff.transpose(s.Q, (1, 0)))
    out = autodiff.add(base, autodiff.matmul(autodiff.mul(proj, gated),
                                             autodiff.transpose(s.P, (1, 0))))
    if bias is not None:
        out = autodiff.add(out, bias)
    return out


def ortho_penalty(s: AdapterState) -> Tensor:
    """||P^T P - I||_F^2 + ||Q Q^T - I||_F^2 with I of size r_max."""
    eye = Tensor(np.eye(s.r_max, dtype=s.P.dtype.type))
    ptp = autodiff.matmul(autodiff.transpose(s.P, (1, 0)), s.P)
    qqt = autodiff.matmul(s.Q, autodiff.transpose(s.Q, (1, 0)))
    a = autodiff.sub(ptp, eye)
    b = autodiff.sub(qqt, eye)
    return autodiff.add(autodiff.tsum(autodiff.mul(a, a)), autodiff.tsum(autodiff.mul(b, b)))


def accumulate_importance(s: AdapterState, grad_lambda: np.ndarray) -> np.ndarray:
    """Fold |lam_i| * |g_i| into the running mean since the last prune.

    Masked components score exactly 0. Returns the updated accumulator.
    """
    g = np.asarray(grad_lambda)
    if g.shape != (s.r_max,):
        raise ContractError(
            f"{s.layer_name}: grad_lambda shape {g.shape}, expected ({s.r_max},)"
        )
    score = np.abs(s.lam.data.astype(np.float64)) * np.abs(g.astype(np.float64)) * s.mask
    s._acc_steps += 1
    s.importance_acc += (score - s.importance_acc) / s._acc_steps
    return s.importance_acc


def _reset_importance(s: AdapterState) -> None:
    s.importance_acc[:] = 0.0
    s._acc_steps = 0


def prune_global(states: list[AdapterState], budget: int) -> None:
    """Keep the `budget` highest-importance active components across layers.

    Ties break by (layer index, component index) ascending. Masks of dropped
    components go to 0 and never return; accumulators reset afterwards.
    """
    entries = []
    for li, s in enumerate(states):
        for ci in range(s.r_max):
            if s.mask[ci] == 1.0:
                entries.append((-s.importance_acc[ci], li, ci))
    active = len(entries)
    if budget > active:
        raise ContractError(f"prune budget {budget} exceeds active components {active}")
    entries.sort()
    for _, li, ci in entries[budget:]:
        states[li].mask[ci] = 0.0
    for s in states:
        _reset_importance(s)


def prune_per_layer_uniform(states: list[AdapterState], rank: int) -> None:
    """Alternative mode: keep the top `rank` components within every layer."""
    for s in states:
        active = [(-s.importance_acc[ci], ci) for ci in range(s.r_max) if s.mask[ci] == 1.0]
        if rank > len(active):
            raise ContractError(
                f"{s.layer_name}: per-layer rank {rank} exceeds active {len(active)}"
            )
        active.sort()
        for _, ci in active[rank:]:
            s.mask[ci] = 0.0
        _reset_importance(s)


def budget_schedule(n_layers: int, cfg: AdapterConfig) -> list[int]:
    """Total-active-component budgets at each prune event.

    Linear from n_layers*r_max down to n_layers*r_target, rounded, hitting
    the target exactly at the final event.
    """
    start = n_layers * cfg.r_max
    end = n_layers * cfg.r_target
    k = len(cfg.prune_epochs)
    return [int(round(start + (end - start) * (i + 1) / k)) for i in range(k)]


# -- fixed-rank LoRA baseline -------------------------------------------------


class FixedLoraState:
    """Classic two-factor adapter delta_W = B @ A with fixed rank r."""

    def __init__(self, layer_name: str, d_out: int, d_in: int, r: int,
                 rng: np.random.Generator, dtype=np.float32):
        if r <= 0:
            raise ContractError(f"fixed LoRA rank must be positive, got {r}")
        self.layer_name = layer_name
        self.r = r
        self.A = Tensor(rng.normal(0.0, 0.02, size=(r, d_in)).astype(dtype),
                        requires_grad=True, dtype=dtype)
        # zero-init B so delta_W = 0 at start
        self.B = Tensor(np.zeros((d_out, r), dtype=dtype), requires_grad=True, dtype=dtype)

    def trainable_params(self) -> dict[str, Tensor]:
        n = self.layer_name
        return {f"{n}.lora.A": self.A, f"{n}.lora.B": self.B}


def fixed_lora_delta(s: FixedLoraState) -> Tensor:
    if s.B.shape[1] != s.A.shape[0]:
        raise ShapeError(f"{s.layer_name}: B{s.B.shape} incompatible with A{s.A.shape}")
    return autodiff.matmul(s.B, s.A)


def fixed_lora_forward(x: Tensor, w_frozen: Tensor, s: FixedLoraState,
                       bias: Tensor | None = None) -> Tensor:
    base = autodiff.matmul(x, autodiff.transpose(w_frozen, (1, 0)))
    low = autodiff.matmul(autodiff.matmul(x, autodiff.transpose(s.A, (1, 0))),
                          autodiff.transpose(s.B, (1, 0)))
    out = autodiff.add(base, low)
    if bias is not None:
        out = autodiff.add(out, bias)
    return out

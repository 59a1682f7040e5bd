"""Per-cell objectness loss kernels with analytic derivatives.

Every kernel accepts scalars or numpy arrays for ``p`` and ``t`` and returns a
:class:`CellLoss` whose ``value`` and ``d_dp`` broadcast like the inputs.
Probabilities are clamped to ``[eps, 1 - eps]`` after conversion to ``p_t``;
inside the clamped regions the derivative is exactly zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from hardmine.errors import ConfigError, DomainError

DEFAULT_EPS = 1e-7


class Variant(str, enum.Enum):
    BCE = "bce"
    FOCAL = "focal"
    BALANCED_FOCAL = "balanced_focal"
    LRM = "lrm"
    COMBINED = "combined"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = str(name).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"default": "bce", "balancedfocal": "balanced_focal", "bal_focal": "balanced_focal"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown variant {name!r} (expected one of: {choices})") from None

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    Variant.BCE: "Default",
    Variant.FOCAL: "Focal Loss",
    Variant.BALANCED_FOCAL: "Bal. Focal Loss",
    Variant.LRM: "LRM",
    Variant.COMBINED: "Combined",
}


@dataclass(frozen=True)
class LossConfig:
    """Objectness loss hyperparameters.

    Defaults are the settings used for every row of the reported comparison:
    alpha=0.25, gamma=1.5, xi=30, rank_b=0.35.
    """

    variant: Variant = Variant.COMBINED
    alpha: float = 0.25
    gamma: float = 1.5
    xi: float = 30.0
    rank_b: float = 0.35
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not isinstance(self.variant, Variant):
            object.__setattr__(self, "variant", Variant.parse(self.variant))
        for name in ("alpha", "gamma", "xi", "rank_b", "eps"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"loss.{name} must be a number, got {value!r}")
            if not np.isfinite(value):
                raise ConfigError(f"loss.{name} must be finite")
            object.__setattr__(self, name, float(value))
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"loss.alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ConfigError(f"loss.gamma must be >= 0, got {self.gamma}")
        if self.xi <= 0.0:
            raise ConfigError(f"loss.xi must be > 0, got {self.xi}")
        if not 0.0 < self.rank_b <= 1.0:
            raise ConfigError(f"loss.rank_b must lie in (0, 1], got {self.rank_b}")
        if not 0.0 < self.eps < 0.5:
            raise ConfigError(f"loss.eps must lie in (0, 0.5), got {self.eps}")

    def with_variant(self, variant) -> "LossConfig":
        return replace(self, variant=Variant.parse(variant) if not isinstance(variant, Variant) else variant)


class CellLoss(NamedTuple):
    value: np.ndarray
    d_dp: np.ndarray


def _prepare(p, t, eps):
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t)
    if not np.all(np.isfinite(p)):
        raise DomainError("probability must be finite")
    if np.any((p < 0.0) | (p > 1.0)):
        raise DomainError("probability must lie in [0, 1]")
    if np.any((t != 0) & (t != 1)):
        raise DomainError("target must be 0 or 1")
    positive = t == 1
    p_t = np.where(positive, p, 1.0 - p)
    inside = (p_t >= eps) & (p_t <= 1.0 - eps)
    q = np.clip(p_t, eps, 1.0 - eps)
    sign = np.where(positive, 1.0, -1.0)
    return positive, q, inside, sign


def _finish(value, d_dq, inside, sign):
    d_dp = np.where(inside, d_dq * sign, 0.0)
    if value.ndim == 0:
        return CellLoss(float(value), float(d_dp))
    return CellLoss(value, d_dp)


def ce_loss(p, t, eps: float = DEFAULT_EPS) -> CellLoss:
    """Binary cross-entropy ``-log(p_t)``."""
    _, q, inside, sign = _prepare(p, t, eps)
    return _finish(-np.log(q), -1.0 / q, inside, sign)


def focal_loss(p, t, alpha: float, gamma: float, eps: float = DEFAULT_EPS) -> CellLoss:
    """Two-sided focal loss ``-alpha_t (1 - p_t)^gamma log(p_t)``.

    ``alpha_t`` is ``alpha`` on positive cells and ``1 - alpha`` on negatives.
    """
    positive, q, inside, sign = _prepare(p, t, eps)
    alpha_t = np.where(positive, alpha, 1.0 - alpha)
    log_q = np.log(q)
    one_minus = 1.0 - q
    modulator = one_minus**gamma
    value = -alpha_t * modulator * log_q
    if gamma == 0.0:
        d_dq = -alpha_t / q
    else:
        # q <= 1 - eps keeps the gamma < 1 power finite
        d_dq = alpha_t * (gamma * one_minus ** (gamma - 1.0) * log_q - modulator / q)
    return _finish(value, d_dq, inside, sign)


def balanced_focal_loss(p, t, cfg: LossConfig) -> CellLoss:
    """Focal loss scaled by the objectness weight ``cfg.xi``."""
    fl = focal_loss(p, t, cfg.alpha, cfg.gamma, cfg.eps)
    return CellLoss(cfg.xi * fl.value, cfg.xi * fl.d_dp)


Kernel = Callable[[np.ndarray, np.ndarray], CellLoss]


def kernel_for(cfg: LossConfig) -> Kernel:
    """Per-cell kernel that feeds the reduction of ``cfg.variant``."""
    if cfg.variant in (Variant.BCE, Variant.LRM):
        return lambda p, t: ce_loss(p, t, cfg.eps)
    if cfg.variant is Variant.FOCAL:
        return lambda p, t: focal_loss(p, t, cfg.alpha, cfg.gamma, cfg.eps)
    return lambda p, t: balanced_focal_loss(p, t, cfg)


def grad_check_cell(op: Callable[..., CellLoss], p: float, t: int, h: float = 1e-5, **kwargs) -> float:
    """Relative error of ``op``'s analytic derivative against a central difference.

    The error is ``|analytic - numeric| / max(1, |analytic|)``. Check points
    within ``2h`` of either end of [0, 1] are rejected.
    """
    p = float(p)
    if not 2.0 * h <= p <= 1.0 - 2.0 * h:
        raise DomainError(f"check point p={p} is within 2h={2 * h} of the clamp boundary")
    analytic = float(op(p, t, **kwargs).d_dp)
    numeric = (float(op(p + h, t, **kwargs).value) - float(op(p - h, t, **kwargs).value)) / (2.0 * h)
    return abs(analytic - numeric) / max(1.0, abs(analytic))

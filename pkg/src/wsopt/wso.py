"""Trainable window-setting layer.

An elementwise clamped affine map y = clamp(w*x + b, 0, U) applied to
full-range-normalized inputs; functionally a 1x1 convolution with a scalar
kernel and bias followed by a bounded ReLU. (w, b) live in the normalized
domain the layer actually sees; HU-domain reporting goes through
extract_window, which undoes the base normalization.

Gradient convention: with the interior indicator I = 1 where 0 < w*x+b < U
(0 at exact clamp boundaries),

    dx = w * g * I,   dw = sum(x * g * I),   db = sum(g * I).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .windowing import (
    InvalidWindowError,
    WindowSetting,
    learned_window_from_rebased,
    rebase_window,
)

log = logging.getLogger(__name__)

# An unfrozen update may not drive the gain this low; the learned window's
# width is base_width / w, which must stay finite.
W_FLOOR = 1e-6


@dataclass
class WsoParams:
    w: float
    b: float
    u: float = 1.0
    frozen: bool = False


def wso_init(target: WindowSetting, base: WindowSetting, u: float = 1.0) -> WsoParams:
    """Parameters that reproduce `target` when applied to base-normalized pixels."""
    w, b = rebase_window(target, base, u)
    return WsoParams(w=w, b=b, u=u, frozen=False)


def clamp_affine(x: np.ndarray, w: float, b: float, u: float) -> np.ndarray:
    return np.clip(w * x + b, x.dtype.type(0), x.dtype.type(u))


def clamp_affine_backward(x: np.ndarray, w: float, b: float, u: float, grad: np.ndarray):
    """Returns (dx, dw, db); saturated and exact-boundary points pass nothing."""
    pre = w * x + b
    interior = (pre > 0) & (pre < u)
    gi = np.where(interior, grad, grad.dtype.type(0))
    dx = (w * gi).astype(x.dtype, copy=False)
    dw = float(np.sum(x * gi, dtype=np.float64))
    db = float(np.sum(gi, dtype=np.float64))
    return dx, dw, db


def wso_forward(x: np.ndarray, p: WsoParams) -> np.ndarray:
    return clamp_affine(np.asarray(x), p.w, p.b, p.u)


def wso_backward(x: np.ndarray, p: WsoParams, upstream_grad: np.ndarray):
    return clamp_affine_backward(np.asarray(x), p.w, p.b, p.u, np.asarray(upstream_grad))


def set_frozen(p: WsoParams, flag: bool) -> WsoParams:
    p.frozen = bool(flag)
    return p


def extract_window(p: WsoParams, base: WindowSetting) -> WindowSetting:
    """Report the layer's parameters as an HU-domain window setting."""
    if not p.w > 0:
        raise InvalidWindowError(f"learned window undefined for w = {p.w}")
    return learned_window_from_rebased(p.w, p.b, base, p.u)


def enforce_w_floor(w: float) -> float:
    """Clamp the gain at W_FLOOR; logs when the floor engages."""
    if w <= W_FLOOR:
        log.warning("windowing gain floored: %g -> %g", w, W_FLOOR)
        return W_FLOOR
    return w

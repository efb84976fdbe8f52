"""CT window-setting algebra.

A window setting (width WW, level WL), both in Hounsfield units, defines the
linear clip-and-scale view of CT intensities used on radiology workstations:
the interval [WL - WW/2, WL + WW/2] is mapped onto (0, U) and everything
outside is clamped. The same map written as a clamped affine function is

    f(x) = clamp(w * x + b, 0, U),   w = U / WW,   b = (U / WW) * (WW / 2 - WL)

which is the form a trainable windowing layer uses. This module owns the
conversions between the two parameterizations, window application to pixel
grids, and the "rebase" algebra needed when a window acts on pixels that were
already normalized by another window (e.g. a learnable layer sitting on top
of full-range-normalized inputs).

All math here runs in double precision; round trips are exact to ~1e-15
relative, which the tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Recorded HU range of the slices this package works with. Values outside are
# clamped at ingestion (see clamp_hu_range), never treated as errors.
HU_MIN = -1024.0
HU_MAX = 1024.0


class InvalidWindowError(ValueError):
    """A window with non-positive width, or affine params with w <= 0."""


@dataclass(frozen=True)
class WindowSetting:
    """A (width, level) pair in HU. width must be > 0."""

    width: float
    level: float

    def __post_init__(self):
        if not self.width > 0:
            raise InvalidWindowError(f"window width must be > 0, got {self.width}")

    @property
    def lower(self) -> float:
        """HU value mapped to 0."""
        return self.level - self.width / 2.0

    @property
    def upper(self) -> float:
        """HU value mapped to U."""
        return self.level + self.width / 2.0


@dataclass(frozen=True)
class AffineWindowParams:
    """Parameters (w, b, U) of the clamped affine map clamp(w*x + b, 0, U)."""

    w: float
    b: float
    u: float = 1.0

    def __post_init__(self):
        if not self.w > 0:
            raise InvalidWindowError(f"affine gain w must be > 0, got {self.w}")
        if not self.u > 0:
            raise InvalidWindowError(f"upper bound U must be > 0, got {self.u}")


# Named window settings used throughout: the full recorded range, the
# emphysema window (maps [-1024, -900] HU onto [0, 1]), and the conventional
# radiological lung window.
FULL_RANGE = WindowSetting(2048.0, 0.0)
EMPHYSEMA = WindowSetting(124.0, -962.0)
LUNG = WindowSetting(1500.0, -700.0)

NAMED_WINDOWS = {
    "full-range": FULL_RANGE,
    "emphysema": EMPHYSEMA,
    "lung": LUNG,
}


def window_to_affine(ws: WindowSetting, u: float = 1.0) -> AffineWindowParams:
    """Convert (WW, WL) to the affine parameters (w, b) for upper bound U."""
    if not u > 0:
        raise InvalidWindowError(f"upper bound U must be > 0, got {u}")
    w = u / ws.width
    b = w * (ws.width / 2.0 - ws.level)
    return AffineWindowParams(w=w, b=b, u=u)


def affine_to_window(aw: AffineWindowParams) -> WindowSetting:
    """Exact inverse of window_to_affine."""
    ww = aw.u / aw.w
    wl = (aw.u / 2.0 - aw.b) / aw.w
    return WindowSetting(width=ww, level=wl)


def apply_window(pixels: np.ndarray, ws: WindowSetting, u: float = 1.0) -> np.ndarray:
    """Clip-and-scale a grid of HU values to [0, U] under the given window.

    Returns a float64 array of the same shape; the input is not modified.
    """
    aw = window_to_affine(ws, u)
    x = np.asarray(pixels, dtype=np.float64)
    if x.size == 0:
        raise ValueError("apply_window requires a non-empty image")
    return np.clip(aw.w * x + aw.b, 0.0, u)


def rebase_window(
    target: WindowSetting, base: WindowSetting, u: float = 1.0
) -> tuple[float, float]:
    """Express `target` as affine params acting on base-normalized pixels.

    If y = apply_window(x, base) then clamp(w*y + b, 0, U) equals
    apply_window(x, target) for every x strictly inside the target window
    (outside it both sides saturate to the same endpoint unless the base
    window clipped x first). Closed form:

        w = WW_base / WW_target
        b = U * ((WL_base - WW_base/2) - (WL_target - WW_target/2)) / WW_target
    """
    if not u > 0:
        raise InvalidWindowError(f"upper bound U must be > 0, got {u}")
    w = base.width / target.width
    b = u * (base.lower - target.lower) / target.width
    return w, b


def learned_window_from_rebased(
    w: float, b: float, base: WindowSetting, u: float = 1.0
) -> WindowSetting:
    """Exact inverse of rebase_window: recover the HU-domain window.

    This is how learned (w, b) values from a windowing layer that runs on
    base-normalized inputs are reported back as an (WW, WL) pair in HU.
    """
    if not w > 0:
        raise InvalidWindowError(f"rebased gain w must be > 0, got {w}")
    ww = base.width / w
    wl = base.lower + ww / 2.0 - b * ww / u
    return WindowSetting(width=ww, level=wl)


def clamp_hu_range(pixels: np.ndarray) -> tuple[np.ndarray, int]:
    """Clamp HU values into [HU_MIN, HU_MAX]; returns (clamped, n_clamped).

    Out-of-range values are a robustness concern (noise tails in synthetic
    data), not an error; callers log the count when it is nonzero.
    """
    x = np.asarray(pixels, dtype=np.float64)
    n_out = int(np.count_nonzero((x < HU_MIN) | (x > HU_MAX)))
    if n_out:
        x = np.clip(x, HU_MIN, HU_MAX)
    return x, n_out

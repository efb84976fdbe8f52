import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsopt.windowing import (
    EMPHYSEMA,
    FULL_RANGE,
    LUNG,
    AffineWindowParams,
    InvalidWindowError,
    WindowSetting,
    affine_to_window,
    apply_window,
    clamp_hu_range,
    learned_window_from_rebased,
    rebase_window,
    window_to_affine,
)

windows = st.builds(
    WindowSetting,
    width=st.floats(min_value=1.0, max_value=4096.0, exclude_min=True),
    level=st.floats(min_value=-1100.0, max_value=1100.0),
)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


class TestWindowToAffine:
    def test_emphysema(self):
        aw = window_to_affine(EMPHYSEMA, 1.0)
        assert aw.w == pytest.approx(1.0 / 124.0, rel=1e-15)
        assert aw.b == pytest.approx(1024.0 / 124.0, rel=1e-15)
        # endpoint mapping: -1024 HU -> 0, -900 HU -> 1
        assert aw.w * -1024.0 + aw.b == pytest.approx(0.0, abs=1e-13)
        assert aw.w * -900.0 + aw.b == pytest.approx(1.0, rel=1e-13)

    def test_full_range(self):
        aw = window_to_affine(FULL_RANGE, 1.0)
        assert aw.w == 0.00048828125
        assert aw.b == 0.5
        assert aw.w * -1024.0 + aw.b == 0.0
        assert aw.w * 1024.0 + aw.b == 1.0

    def test_scales_linearly_in_u(self):
        aw = window_to_affine(FULL_RANGE, 255.0)
        assert aw.w == 255.0 / 2048.0
        assert aw.b == 127.5

    def test_invalid(self):
        with pytest.raises(InvalidWindowError):
            WindowSetting(0.0, 0.0)
        with pytest.raises(InvalidWindowError):
            WindowSetting(-10.0, 0.0)
        with pytest.raises(InvalidWindowError):
            window_to_affine(FULL_RANGE, 0.0)


class TestAffineToWindow:
    def test_inverts_emphysema(self):
        ws = affine_to_window(AffineWindowParams(w=1.0 / 124.0, b=1024.0 / 124.0, u=1.0))
        assert ws.width == pytest.approx(124.0, rel=1e-13)
        assert ws.level == pytest.approx(-962.0, rel=1e-13)

    def test_inverts_full_range(self):
        ws = affine_to_window(AffineWindowParams(w=0.00048828125, b=0.5, u=1.0))
        assert ws.width == 2048.0
        assert ws.level == 0.0

    def test_unit_gain(self):
        ws = affine_to_window(AffineWindowParams(w=1.0, b=0.0, u=1.0))
        assert ws.width == 1.0
        assert ws.level == 0.5

    def test_invalid(self):
        with pytest.raises(InvalidWindowError):
            AffineWindowParams(w=0.0, b=0.0, u=1.0)

    @settings(max_examples=300)
    @given(ws=windows, u=st.sampled_from([1.0, 255.0]))
    def test_round_trip(self, ws, u):
        back = affine_to_window(window_to_affine(ws, u))
        assert rel_err(back.width, ws.width) < 1e-12
        assert abs(back.level - ws.level) / max(abs(ws.level), 1.0) < 1e-12


class TestApplyWindow:
    def test_clamp_floor(self):
        out = apply_window(np.array([[-1024.0]]), EMPHYSEMA)
        assert out[0, 0] == 0.0

    def test_center_maps_to_half(self):
        out = apply_window(np.array([[-962.0]]), EMPHYSEMA)
        assert out[0, 0] == pytest.approx(0.5, abs=1e-14)

    def test_interior_point(self):
        # (-931 - (-1024)) / 124 = 93 / 124
        out = apply_window(np.array([[-931.0]]), EMPHYSEMA)
        assert out[0, 0] == pytest.approx(93.0 / 124.0, rel=1e-14)

    def test_saturation_exact(self):
        ws = WindowSetting(200.0, -500.0)
        px = np.array([ws.lower - 50.0, ws.lower, ws.upper, ws.upper + 50.0])
        out = apply_window(px, ws)
        assert out[0] == 0.0 and out[1] == pytest.approx(0.0, abs=1e-12)
        assert out[2] == pytest.approx(1.0, rel=1e-12) and out[3] == 1.0

    @settings(max_examples=200)
    @given(ws=windows)
    def test_monotone_and_bounded(self, ws):
        xs = np.linspace(-1100.0, 1100.0, 257)
        out = apply_window(xs, ws)
        assert np.all(np.diff(out) >= 0.0)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            apply_window(np.zeros((0,)), FULL_RANGE)


class TestRebase:
    def test_identity(self):
        w, b = rebase_window(FULL_RANGE, FULL_RANGE)
        assert w == 1.0 and b == 0.0

    def test_emphysema_on_full_range(self):
        w, b = rebase_window(EMPHYSEMA, FULL_RANGE)
        assert w == pytest.approx(2048.0 / 124.0, rel=1e-15)
        assert b == pytest.approx(0.0, abs=1e-15)
        # composed map sends -1024 -> 0 and -900 -> 1
        y = apply_window(np.array([-1024.0, -900.0]), FULL_RANGE)
        z = np.clip(w * y + b, 0.0, 1.0)
        assert z[0] == pytest.approx(0.0, abs=1e-12)
        assert z[1] == pytest.approx(1.0, rel=1e-12)

    def test_lung_on_full_range(self):
        w, b = rebase_window(LUNG, FULL_RANGE)
        assert w == pytest.approx(2048.0 / 1500.0, rel=1e-15)
        assert b == pytest.approx(0.284, rel=1e-12)

    @settings(max_examples=200)
    @given(target=windows)
    def test_composition_matches_direct(self, target):
        base = FULL_RANGE
        w, b = rebase_window(target, base)
        # strictly inside the target window and inside the base window
        lo = max(target.lower, base.lower)
        hi = min(target.upper, base.upper)
        if not hi - lo > 1e-6:
            return
        xs = np.linspace(lo, hi, 33)[1:-1]
        via_base = np.clip(w * apply_window(xs, base) + b, 0.0, 1.0)
        direct = apply_window(xs, target)
        assert np.max(np.abs(via_base - direct)) < 1e-10


class TestLearnedWindowFromRebased:
    def test_inverts_emphysema_rebase(self):
        ws = learned_window_from_rebased(2048.0 / 124.0, 0.0, FULL_RANGE)
        assert ws.width == pytest.approx(124.0, rel=1e-13)
        assert ws.level == pytest.approx(-962.0, rel=1e-13)

    def test_identity(self):
        ws = learned_window_from_rebased(1.0, 0.0, FULL_RANGE)
        assert ws.width == 2048.0 and ws.level == 0.0

    def test_half_gain(self):
        ws = learned_window_from_rebased(2.0, 0.0, FULL_RANGE)
        assert ws.width == 1024.0 and ws.level == -512.0

    def test_round_trip_narrow_low_window(self):
        # fixture in the band a trained layer tends to land in
        target = WindowSetting(90.0, -979.0)
        w, b = rebase_window(target, FULL_RANGE)
        assert w == pytest.approx(2048.0 / 90.0, rel=1e-15)
        back = learned_window_from_rebased(w, b, FULL_RANGE)
        assert back.width == pytest.approx(90.0, rel=1e-12)
        assert back.level == pytest.approx(-979.0, rel=1e-12)

    def test_invalid(self):
        with pytest.raises(InvalidWindowError):
            learned_window_from_rebased(0.0, 0.0, FULL_RANGE)

    @settings(max_examples=300)
    @given(target=windows, u=st.sampled_from([1.0, 255.0]))
    def test_round_trip(self, target, u):
        w, b = rebase_window(target, FULL_RANGE, u)
        back = learned_window_from_rebased(w, b, FULL_RANGE, u)
        assert rel_err(back.width, target.width) < 1e-12
        assert abs(back.level - target.level) / max(abs(target.level), 1.0) < 1e-12


def test_clamp_hu_range_counts():
    x = np.array([-2000.0, -1024.0, 0.0, 1024.0, 1500.0])
    y, n = clamp_hu_range(x)
    assert n == 2
    assert y.tolist() == [-1024.0, -1024.0, 0.0, 1024.0, 1024.0]
    y2, n2 = clamp_hu_range(y)
    assert n2 == 0

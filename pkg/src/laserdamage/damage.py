"""Laser-damage state machine for a single APD.

Permanent damage is a ratchet on the largest power ever applied: each band
b..f has a per-sample onset power, and crossing it fires that band's effect
exactly once. Band a is the only reversible effect, a dark-count elevation
that relaxes over hours.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .apd_device import HOURS, ApdState, Structural

BANDS = ("a", "b", "c", "d", "e", "f")
PERMANENT_BANDS = ("b", "c", "d", "e", "f")

Range = tuple[float, float]


@dataclass(frozen=True)
class DamageProfile:
    """Onset-power ranges (W) and effect magnitudes for a population of APDs."""

    a_range: Range = (0.0, 0.25)
    b_range: Range = (0.30, 0.45)
    c_range: Range = (0.50, 0.80)
    d_range: Range = (0.90, 1.20)
    e_range: Range = (1.20, 1.70)
    f_range: Range = (2.0, 3.0)

    a_factor: Range = (2.0, 5.0)
    tau_relax: float = 4 * HOURS
    b_dv_br: Range = (2.3, 2.5)
    b_susceptible_prob: float = 0.5
    c_division: Range = (1.7, 5.4)
    d_factor: Range = (100.0, 100.0)
    e_i_dark: Range = (50e-6, 500e-6)
    f_open_prob: float = 1.0 / 3.0
    f_resistance: Range = (10e3, 100e3)

    v_br_orig: float = 225.0
    dcr_base: float = 500.0
    i_leak: float = 1e-9
    qe_linear: float = 0.6

    def __post_init__(self) -> None:
        ranges = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                  if isinstance(getattr(self, f.name), tuple)}
        for name, (lo, hi) in ranges.items():
            if not lo <= hi:
                raise ValueError(f"{name}: low {lo} exceeds high {hi}")
        mids = [sum(self.onset_range(b)) / 2 for b in BANDS]
        if any(m1 >= m2 for m1, m2 in zip(mids, mids[1:])):
            raise ValueError("band onset ranges must be ordered a < b < c < d < e < f")
        for name in ("b_susceptible_prob", "f_open_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.a_factor[0] < 1.0 or self.c_division[0] < 1.0 or self.d_factor[0] < 1.0:
            raise ValueError("multiplicative dark-count factors must be >= 1")
        if self.f_resistance[0] <= 0 or self.e_i_dark[0] < 0 or self.b_dv_br[0] < 0:
            raise ValueError("effect magnitudes out of physical range")
        if self.tau_relax <= 0:
            raise ValueError("tau_relax must be positive")

    def onset_range(self, band: str) -> Range:
        if band not in BANDS:
            raise ValueError(f"unknown damage band {band!r}; expected one of {BANDS}")
        return getattr(self, f"{band}_range")

    def fresh_state(self) -> ApdState:
        return ApdState(
            v_br_orig=self.v_br_orig,
            dcr_base=self.dcr_base,
            i_leak=self.i_leak,
            qe_linear=self.qe_linear,
            tau_relax=self.tau_relax,
        )

    @classmethod
    def from_dict(cls, overrides: dict) -> "DamageProfile":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(overrides) - names
        if unknown:
            raise ValueError(f"unknown damage profile fields: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
        return cls(**kw)


@dataclass(frozen=True)
class SampleThresholds:
    """Realized onset powers and effect magnitudes for one APD sample.

    Magnitudes are fixed when the sample is drawn, so the final permanent
    state depends only on which thresholds were crossed.
    """

    b: float
    c: float
    d: float
    e: float
    f: float
    b_susceptible: bool
    dv_br: float
    c_division: float
    d_factor: float
    e_i_dark: float
    f_open_circuit: bool
    f_resistance: float
    profile: DamageProfile = field(repr=False, compare=False, default_factory=DamageProfile)

    def __post_init__(self) -> None:
        seq = [self.b, self.c, self.d, self.e, self.f]
        if any(x >= y for x, y in zip(seq, seq[1:])):
            raise ValueError("realized thresholds must be strictly increasing b < c < d < e < f")

    def onset(self, band: str) -> float:
        return getattr(self, band)


@dataclass
class ExposureRecord:
    power: float
    duration: float = 60.0
    bias_on: bool = True
    focused: bool = True
    ramped: bool = False
    effects_triggered: list[str] = field(default_factory=list)
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.power < 0:
            raise ValueError("illumination power must be non-negative")
        if self.duration <= 0:
            raise ValueError("exposure duration must be positive")


def _uniform(rng: np.random.Generator, r: Range) -> float:
    lo, hi = r
    return float(lo if lo == hi else rng.uniform(lo, hi))


def draw_sample(
    profile: DamageProfile, rng: np.random.Generator
) -> tuple[ApdState, SampleThresholds]:
    """Draw a fresh APD and its damage thresholds."""
    while True:
        onsets = [_uniform(rng, profile.onset_range(b)) for b in PERMANENT_BANDS]
        if all(x < y for x, y in zip(onsets, onsets[1:])):
            break
    thresholds = SampleThresholds(
        *onsets,
        b_susceptible=bool(rng.random() < profile.b_susceptible_prob),
        dv_br=_uniform(rng, profile.b_dv_br),
        c_division=_uniform(rng, profile.c_division),
        d_factor=_uniform(rng, profile.d_factor),
        e_i_dark=_uniform(rng, profile.e_i_dark),
        f_open_circuit=bool(rng.random() < profile.f_open_prob),
        f_resistance=_uniform(rng, profile.f_resistance),
        profile=profile,
    )
    return profile.fresh_state(), thresholds


def _fire(state: ApdState, t: SampleThresholds, band: str) -> bool:
    if band == "b":
        if not t.b_susceptible:
            return False
        state.v_br = state.v_br + t.dv_br
    elif band == "c":
        # everything except the dark count returns to its as-manufactured value
        state.v_br = state.v_br_orig
        state.dcr_transient_factor = 1.0
        state.dcr_base = state.dcr_base / t.c_division
    elif band == "d":
        state.dcr_base = state.dcr_base * t.d_factor
    elif band == "e":
        state.i_dark = t.e_i_dark
    elif band == "f":
        if t.f_open_circuit:
            state.structural = Structural.OPEN_CIRCUIT
            state.resistance = None
        else:
            state.structural = Structural.RESISTIVE
            state.resistance = t.f_resistance
        state.qe_linear = 0.0
    return True


def apply_illumination(
    state: ApdState,
    thresholds: SampleThresholds,
    power: float,
    duration: float = 60.0,
    rng: np.random.Generator | None = None,
    *,
    now: float = 0.0,
    bias_on: bool = True,
    focused: bool = True,
    ramped: bool = False,
) -> ExposureRecord:
    """Expose ``state`` to c.w. illumination, mutating it in place.

    Only peak power matters: bias, focus and ramp flags are recorded but do
    not alter the outcome, and duration is bookkeeping only.
    """
    record = ExposureRecord(
        power=power, duration=duration, bias_on=bias_on, focused=focused,
        ramped=ramped, timestamp=now,
    )
    profile = thresholds.profile
    end = now + duration

    if 0.0 < power <= profile.a_range[1]:
        if rng is None:
            raise ValueError("an rng is required to draw the transient dark-count factor")
        state.dcr_transient_factor = _uniform(rng, profile.a_factor)
        state.last_exposure_time = end
        record.effects_triggered.append("a")

    previous = state.p_max
    peak = max(power, previous)
    for band in PERMANENT_BANDS:
        onset = thresholds.onset(band)
        if previous < onset <= peak and _fire(state, thresholds, band):
            record.effects_triggered.append(band)
    state.p_max = peak
    return record


def relax(state: ApdState, elapsed: float) -> ApdState:
    """Return a copy of ``state`` after ``elapsed`` seconds in darkness."""
    if elapsed < 0:
        raise ValueError("elapsed time must be non-negative")
    factor = 1.0 + (state.dcr_transient_factor - 1.0) * math.exp(-elapsed / state.tau_relax)
    return dataclasses.replace(
        state,
        dcr_transient_factor=factor,
        last_exposure_time=state.last_exposure_time + elapsed,
    )

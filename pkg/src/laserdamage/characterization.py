"""Automated expose/characterize loop with operator alarms."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .apd_device import (
    ApdState,
    DetectorCircuit,
    Structural,
    is_blinded,
    photon_detection_efficiency,
)
from .damage import ExposureRecord, SampleThresholds, apply_illumination

PARAMETERS = ("dcr", "pde", "v_br", "i_dark", "qe_0v")
CSV_COLUMNS = ("exposure_power", "dcr", "pde", "v_br", "i_dark", "qe_0v", "alarms")

V_BR_READ_NOISE = 0.05
ANALOG_REL_NOISE = 0.02
LINEAR_MODE_OFFSET = -5.0
_EPS = float(np.finfo(float).eps)


@dataclass(frozen=True)
class MeasurementSettings:
    count_time: float = 10.0
    n_test_pulses: int = 100_000
    mu: float = 1.0

    def __post_init__(self) -> None:
        if self.count_time <= 0 or self.n_test_pulses <= 0 or self.mu <= 0:
            raise ValueError("measurement settings must be positive")


@dataclass(frozen=True)
class CharacterizationRecord:
    dcr_measured: float
    pde_measured: float
    v_br_measured: float
    i_dark_measured: float
    qe_0v_measured: float
    exposure_power: float = 0.0

    def __post_init__(self) -> None:
        values = (self.dcr_measured, self.pde_measured, self.v_br_measured,
                  self.i_dark_measured, self.qe_0v_measured, self.exposure_power)
        if min(values) < 0:
            raise ValueError("characterization values must be non-negative")
        if self.pde_measured > 1 or self.qe_0v_measured > 1:
            raise ValueError("pde and qe must lie in [0, 1]")

    def value(self, name: str) -> float:
        return getattr(self, f"{name}_measured")


@dataclass
class AlarmPolicy:
    """Relative-deviation alarm thresholds against a baseline record."""

    tolerances: dict[str, float] = field(default_factory=lambda: {p: 0.2 for p in PARAMETERS})
    baseline: CharacterizationRecord | None = None

    def __post_init__(self) -> None:
        unknown = set(self.tolerances) - set(PARAMETERS)
        if unknown:
            raise ValueError(f"unknown alarm parameters: {sorted(unknown)}")
        if any(t <= 0 for t in self.tolerances.values()):
            raise ValueError("alarm tolerances must be positive")


@dataclass
class SweepRow:
    exposure: ExposureRecord | None
    record: CharacterizationRecord
    alarms: list[str]


def characterize(
    state: ApdState,
    circuit: DetectorCircuit,
    meas: MeasurementSettings,
    rng: np.random.Generator,
    *,
    now: float | None = None,
    exposure_power: float = 0.0,
) -> CharacterizationRecord:
    """Measure the five detector parameters with sampling noise."""
    counting = state.intact and not is_blinded(state, circuit)

    if counting:
        rate = state.dcr_base * state.transient_factor(now)
        dcr = rng.poisson(rate * meas.count_time) / meas.count_time
        eta = photon_detection_efficiency(state, circuit)
        p_click = -np.expm1(-meas.mu * eta)
        clicks = rng.binomial(meas.n_test_pulses, p_click)
        frac = clicks / meas.n_test_pulses
        pde = 1.0 if frac >= 1.0 else min(1.0, -np.log1p(-frac) / meas.mu)
    else:
        dcr, pde = 0.0, 0.0

    v_lin = state.v_br_orig + LINEAR_MODE_OFFSET
    if state.structural is Structural.INTACT:
        v_br = max(0.0, state.v_br + V_BR_READ_NOISE * rng.standard_normal())
        i_true = state.i_leak + state.i_dark
    elif state.structural is Structural.RESISTIVE:
        # no breakdown knee on a resistor-like I-V curve
        v_br = 0.0
        i_true = v_lin / state.resistance
    else:
        v_br, i_true = 0.0, 0.0
    i_dark = max(0.0, i_true * (1.0 + ANALOG_REL_NOISE * rng.standard_normal()))
    qe = min(1.0, max(0.0, state.qe_linear * (1.0 + ANALOG_REL_NOISE * rng.standard_normal())))

    return CharacterizationRecord(
        dcr_measured=float(dcr),
        pde_measured=float(pde),
        v_br_measured=float(v_br),
        i_dark_measured=float(i_dark),
        qe_0v_measured=float(qe),
        exposure_power=float(exposure_power),
    )


def detect_deviation(record: CharacterizationRecord, policy: AlarmPolicy) -> list[str]:
    """Names of parameters whose relative deviation exceeds tolerance."""
    if policy.baseline is None:
        raise ValueError("alarm policy has no baseline record")
    flagged = []
    for name in PARAMETERS:
        tol = policy.tolerances.get(name)
        if tol is None:
            continue
        base = policy.baseline.value(name)
        dev = abs(record.value(name) - base) / max(abs(base), _EPS)
        if dev > tol:
            flagged.append(name)
    return flagged


def damage_sweep(
    sample: tuple[ApdState, SampleThresholds],
    powers: Sequence[float],
    circuit: DetectorCircuit,
    meas: MeasurementSettings,
    policy: AlarmPolicy,
    rng: np.random.Generator,
    *,
    exposure_time: float = 60.0,
    stop_on_alarm: bool = False,
) -> list[SweepRow]:
    """Baseline characterization, then expose/characterize at each power.

    The state in ``sample`` is mutated. If the policy has no baseline, the
    first measurement becomes it. With ``stop_on_alarm`` the sweep halts at
    the first flagged record, as an operator pausing the run would.
    """
    powers = list(powers)
    if any(p2 < p1 for p1, p2 in zip(powers, powers[1:])):
        raise ValueError("sweep powers must be non-decreasing")
    state, thresholds = sample
    now = 0.0
    baseline = characterize(state, circuit, meas, rng, now=now)
    if policy.baseline is None:
        policy.baseline = baseline
    rows = [SweepRow(None, baseline, detect_deviation(baseline, policy))]
    now += meas.count_time

    for p in powers:
        exposure = apply_illumination(state, thresholds, p, exposure_time, rng, now=now)
        now += exposure_time
        rec = characterize(state, circuit, meas, rng, now=now, exposure_power=p)
        now += meas.count_time
        alarms = detect_deviation(rec, policy)
        rows.append(SweepRow(exposure, rec, alarms))
        if stop_on_alarm and alarms:
            break
    return rows


def sweep_rows_as_dicts(rows: Iterable[SweepRow]) -> list[dict]:
    out = []
    for row in rows:
        r = row.record
        out.append({
            "exposure_power": r.exposure_power,
            "dcr": r.dcr_measured,
            "pde": r.pde_measured,
            "v_br": r.v_br_measured,
            "i_dark": r.i_dark_measured,
            "qe_0v": r.qe_0v_measured,
            "alarms": ";".join(row.alarms),
        })
    return out


def write_sweep_csv(rows: Iterable[SweepRow], fh: TextIO | None = None) -> str:
    """Write sweep rows as CSV (header first); returns the text written."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(sweep_rows_as_dicts(rows))
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


"""Avalanche photodiode in a passively quenched single-photon detector.

The model covers three regimes: normal Geiger-mode counting, the blinded
regime where steady dark current through the ballast resistor pulls the
diode below breakdown, and the structurally destroyed regime (open circuit
or resistor-like chip).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

HOURS = 3600.0


class MisuseError(ValueError):
    """An operation was called on a detector state it does not apply to."""


class Structural(enum.Enum):
    INTACT = "intact"
    OPEN_CIRCUIT = "open_circuit"
    RESISTIVE = "resistive"


@dataclass
class ApdState:
    """Physical condition of one APD.

    ``i_dark`` is the steady current drawn at operating bias (zero for an
    undamaged diode); ``i_leak`` is the small linear-mode leakage seen when
    characterizing below breakdown and does not load the quench circuit.
    """

    v_br_orig: float
    v_br: float | None = None
    dcr_base: float = 500.0
    dcr_transient_factor: float = 1.0
    last_exposure_time: float = 0.0
    i_dark: float = 0.0
    i_leak: float = 1e-9
    qe_linear: float = 0.6
    pde_scale: float = 1.0
    structural: Structural = Structural.INTACT
    resistance: float | None = None
    p_max: float = 0.0
    tau_relax: float = 4 * HOURS

    def __post_init__(self) -> None:
        if self.v_br is None:
            self.v_br = self.v_br_orig
        if self.v_br < self.v_br_orig:
            raise ValueError("v_br cannot fall below the as-manufactured breakdown voltage")
        if self.dcr_base < 0 or self.i_dark < 0 or self.i_leak < 0:
            raise ValueError("dark count rate and currents must be non-negative")
        if self.dcr_transient_factor < 1:
            raise ValueError("transient dark-count factor must be >= 1")
        if not 0 <= self.qe_linear <= 1:
            raise ValueError("qe_linear must lie in [0, 1]")
        if not 0 < self.pde_scale <= 1:
            raise ValueError("pde_scale must lie in (0, 1]")
        if self.structural is Structural.RESISTIVE:
            if self.resistance is None or not (0 < self.resistance < math.inf):
                raise ValueError("resistive state needs a positive finite resistance")
        if self.tau_relax <= 0:
            raise ValueError("tau_relax must be positive")

    @property
    def intact(self) -> bool:
        return self.structural is Structural.INTACT

    def transient_factor(self, now: float | None = None) -> float:
        """Transient dark-count elevation at time ``now`` (stored value if None)."""
        if now is None:
            return self.dcr_transient_factor
        elapsed = max(0.0, now - self.last_exposure_time)
        return 1.0 + (self.dcr_transient_factor - 1.0) * math.exp(-elapsed / self.tau_relax)


@dataclass(frozen=True)
class ControlCurve:
    """Bright-pulse click response of a blinded detector.

    At setpoints at or below ``deterministic_below`` the response is a step at
    ``p_threshold``. Above it the response is a logistic in pulse power (dB
    relative to threshold) whose width grows by ``width_per_volt`` dB per volt.
    The logistic is centred so that P(p_threshold/2) < 0.01 and
    P(p_threshold) > 0.5 with equal logit margins.
    """

    p_threshold: float = 0.5e-3
    deterministic_below: float = 11.0
    width_per_volt: float = 0.15
    max_setpoint: float = 15.0

    def __post_init__(self) -> None:
        if self.p_threshold <= 0:
            raise ValueError("p_threshold must be positive")
        if self.width_per_volt < 0:
            raise ValueError("width_per_volt must be non-negative")
        w = self.width(self.max_setpoint)
        if w >= _HALF_POWER_DB / _LOGIT_99:
            raise ValueError(
                f"width_per_volt={self.width_per_volt} cannot keep a <3 dB control margin "
                f"up to {self.max_setpoint} V setpoint"
            )

    def width(self, setpoint: float) -> float:
        return self.width_per_volt * max(0.0, setpoint - self.deterministic_below)

    def probability(self, setpoint: float, pulse_power):
        """Click probability for pulse power(s) at the given setpoint."""
        power = np.asarray(pulse_power, dtype=float)
        if setpoint <= self.deterministic_below or self.width(setpoint) == 0.0:
            out = (power >= self.p_threshold).astype(float)
        else:
            w = self.width(setpoint)
            center = (_LOGIT_99 * w - _HALF_POWER_DB) / 2.0
            with np.errstate(divide="ignore"):
                x_db = 10.0 * np.log10(power / self.p_threshold)
            out = np.where(power > 0, expit((x_db - center) / w), 0.0)
        return float(out) if out.ndim == 0 else out


_LOGIT_99 = math.log(99.0)
_HALF_POWER_DB = 10.0 * math.log10(2.0)


@dataclass(frozen=True)
class DetectorCircuit:
    v_bias: float
    r_ballast: float = 400e3
    slot_duration: float = 1e-9
    dead_time: float = 1e-6
    eta_nominal: float = 0.5
    v_ov_nominal: float = 15.0
    control_curve: ControlCurve = field(default_factory=ControlCurve)

    def __post_init__(self) -> None:
        if self.v_bias <= 0:
            raise ValueError("v_bias must be positive")
        if self.r_ballast <= 0:
            raise ValueError("r_ballast must be positive")
        if not 0 < self.eta_nominal <= 1:
            raise ValueError("eta_nominal must lie in (0, 1]")
        if not self.slot_duration < self.dead_time:
            raise ValueError("slot_duration must be shorter than dead_time")
        if self.v_ov_nominal <= 0:
            raise ValueError("v_ov_nominal must be positive")

    @classmethod
    def for_apd(cls, state: ApdState, overvoltage: float = 15.0, **kwargs) -> "DetectorCircuit":
        """Circuit biased ``overvoltage`` volts above the APD's original breakdown."""
        return cls(v_bias=state.v_br_orig + overvoltage, **kwargs)


def overvoltage(state: ApdState, circuit: DetectorCircuit) -> float:
    """Bias across the junction minus breakdown; negative when blinded."""
    if not state.intact:
        raise MisuseError(f"overvoltage is undefined for a {state.structural.value} device")
    return circuit.v_bias - state.i_dark * circuit.r_ballast - state.v_br


def setpoint(state: ApdState, circuit: DetectorCircuit) -> float:
    """Operating overvoltage knob, ignoring dark-current loading."""
    return circuit.v_bias - state.v_br


def is_blinded(state: ApdState, circuit: DetectorCircuit) -> bool:
    return state.intact and overvoltage(state, circuit) <= 0.0


def photon_detection_efficiency(state: ApdState, circuit: DetectorCircuit) -> float:
    if not state.intact:
        return 0.0
    v_ov = overvoltage(state, circuit)
    if v_ov <= 0.0:
        return 0.0
    frac = min(1.0, max(0.0, v_ov / circuit.v_ov_nominal))
    return circuit.eta_nominal * state.pde_scale * frac


def dark_click_probability(
    state: ApdState, circuit: DetectorCircuit, now: float | None = None
) -> float:
    """Probability of a dark click within one detection slot."""
    if not state.intact or is_blinded(state, circuit):
        return 0.0
    rate = state.dcr_base * state.transient_factor(now)
    return -math.expm1(-rate * circuit.slot_duration)


def geiger_click_probability(
    state: ApdState, circuit: DetectorCircuit, n_photons, now: float | None = None
):
    """Click probability for ``n_photons`` incident photons (scalar or array)."""
    n = np.asarray(n_photons, dtype=float)
    if not state.intact or is_blinded(state, circuit):
        out = np.zeros_like(n)
    else:
        eta = photon_detection_efficiency(state, circuit)
        p_dark = dark_click_probability(state, circuit, now)
        p_miss = np.power(1.0 - eta, n) * (1.0 - p_dark)
        out = 1.0 - p_miss
    return float(out) if out.ndim == 0 else out


def geiger_click(
    state: ApdState,
    circuit: DetectorCircuit,
    n_photons: int,
    rng: np.random.Generator,
    now: float | None = None,
) -> bool:
    return bool(rng.random() < geiger_click_probability(state, circuit, n_photons, now))


def bright_pulse_click_probability(state: ApdState, circuit: DetectorCircuit, pulse_power):
    """Click probability of a blinded detector hit by 10 ns bright pulse(s)."""
    if not is_blinded(state, circuit):
        raise MisuseError("the bright-pulse control curve only applies to a blinded detector")
    return circuit.control_curve.probability(setpoint(state, circuit), pulse_power)


def watchdog_power_reading(state: ApdState, incident_power):
    """Photocurrent-based power reading; destroyed chips read zero."""
    p = np.asarray(incident_power, dtype=float)
    out = p * state.qe_linear if state.intact else np.zeros_like(p)
    return float(out) if out.ndim == 0 else out

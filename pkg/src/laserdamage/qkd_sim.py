"""BB84 over a lossy channel into a four-detector receiver.

The simulation is vectorised over slots in fixed-size chunks; with a fixed
seed every count is bit-exactly reproducible.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.constants as const

from .apd_device import (
    ApdState,
    DetectorCircuit,
    dark_click_probability,
    is_blinded,
    photon_detection_efficiency,
    setpoint,
    watchdog_power_reading,
)
from .damage import DamageProfile, SampleThresholds, draw_sample
from .rng import derive_rng

WAVELENGTH = 807e-9
PHOTON_ENERGY = const.h * const.c / WAVELENGTH
BRIGHT_PULSE_WIDTH = 10e-9
CHUNK = 1 << 20

SIM_RESULT_FIELDS = (
    "n_detected",
    "n_sifted",
    "n_errors",
    "qber",
    "key_rate_per_sifted_bit",
    "eve_info_fraction",
    "detection_rate_per_slot",
    "watchdog_alarms",
)


class InvariantViolation(RuntimeError):
    """A simulation produced counts that break a structural invariant."""


@dataclass(frozen=True)
class ProtocolParams:
    n_slots: int = 100_000
    channel_loss_db: float = 0.0
    distance_km: float | None = None
    alpha_db_per_km: float = 0.2
    e_misalign: float = 0.01
    f_ec: float = 1.0

    def __post_init__(self) -> None:
        if self.n_slots < 0:
            raise ValueError("n_slots must be non-negative")
        if self.channel_loss_db < 0 or self.alpha_db_per_km < 0:
            raise ValueError("losses must be non-negative")
        if self.distance_km is not None and self.distance_km < 0:
            raise ValueError("distance must be non-negative")
        if not 0.0 <= self.e_misalign <= 0.5:
            raise ValueError("e_misalign must lie in [0, 0.5]")
        if self.f_ec < 1.0:
            raise ValueError("f_ec must be >= 1")

    @property
    def loss_db(self) -> float:
        if self.distance_km is not None:
            return self.channel_loss_db + self.distance_km * self.alpha_db_per_km
        return self.channel_loss_db

    @property
    def transmittance(self) -> float:
        return 10.0 ** (-self.loss_db / 10.0)

    @classmethod
    def from_dict(cls, overrides: dict, **base) -> "ProtocolParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(overrides) - names
        if unknown:
            raise ValueError(f"unknown protocol fields: {sorted(unknown)}")
        return cls(**{**base, **overrides})


@dataclass
class DetectorSlot:
    state: ApdState
    circuit: DetectorCircuit
    thresholds: SampleThresholds | None = None


@dataclass
class BobReceiver:
    """Four data detectors indexed ``2 * basis + bit`` plus an optional watchdog.

    Basis 0 is Z, basis 1 is X. The watchdog sees ``watchdog_tap`` of the
    incoming light and alarms when its reading exceeds ``watchdog_threshold``.
    """

    detectors: list[DetectorSlot]
    watchdog: DetectorSlot | None = None
    watchdog_threshold: float = 1e-6
    watchdog_tap: float = 0.1

    def __post_init__(self) -> None:
        if len(self.detectors) != 4:
            raise ValueError("a BB84 receiver needs exactly four data detectors")
        if self.watchdog is not None and self.watchdog_threshold <= 0:
            raise ValueError("watchdog alarm threshold must be positive")

    @classmethod
    def draw(
        cls,
        profile: DamageProfile,
        rng: np.random.Generator,
        *,
        overvoltage: float = 15.0,
        with_watchdog: bool = False,
        **circuit_kwargs,
    ) -> "BobReceiver":
        """Draw fresh detector samples from ``profile``."""
        slots = []
        for _ in range(5 if with_watchdog else 4):
            state, th = draw_sample(profile, rng)
            circuit = DetectorCircuit.for_apd(state, overvoltage, **circuit_kwargs)
            slots.append(DetectorSlot(state, circuit, th))
        return cls(slots[:4], watchdog=slots[4] if with_watchdog else None)

    def efficiencies(self) -> list[float]:
        return [photon_detection_efficiency(d.state, d.circuit) for d in self.detectors]


@dataclass(frozen=True)
class SlotBehaviour:
    """What Eve does in each slot, as seen by the protocol engine.

    ``mode`` is "none", "photon" (measure and resend a single photon) or
    "bright" (measure and resend a bright faked-state pulse).
    """

    mode: str = "none"
    fraction: float = 0.0
    pulse_power: float = 0.0


@dataclass
class SimResult:
    n_detected: int
    n_sifted: int
    n_errors: int
    qber: float
    key_rate_per_sifted_bit: float
    eve_info_fraction: float
    detection_rate_per_slot: float
    watchdog_alarms: int
    n_slots: int = field(default=0, repr=False)
    n_eve_correct: int = field(default=0, repr=False)

    def __post_init__(self) -> None:
        if not (0 <= self.n_errors <= self.n_sifted <= self.n_detected <= self.n_slots):
            raise InvariantViolation(
                f"count ordering violated: errors={self.n_errors} sifted={self.n_sifted} "
                f"detected={self.n_detected} slots={self.n_slots}"
            )
        if not 0 <= self.n_eve_correct <= self.n_sifted:
            raise InvariantViolation("Eve cannot know more bits than were sifted")

    @classmethod
    def from_counts(
        cls,
        *,
        n_slots: int,
        n_detected: int,
        n_sifted: int,
        n_errors: int,
        n_eve_correct: int,
        watchdog_alarms: int,
        f_ec: float,
    ) -> "SimResult":
        qber = n_errors / n_sifted if n_sifted else 0.0
        return cls(
            n_detected=int(n_detected),
            n_sifted=int(n_sifted),
            n_errors=int(n_errors),
            qber=qber,
            key_rate_per_sifted_bit=key_rate(min(qber, 0.5), f_ec),
            eve_info_fraction=n_eve_correct / n_sifted if n_sifted else 0.0,
            detection_rate_per_slot=n_detected / n_slots if n_slots else 0.0,
            watchdog_alarms=int(watchdog_alarms),
            n_slots=int(n_slots),
            n_eve_correct=int(n_eve_correct),
        )

    @classmethod
    def combine(cls, results: Sequence["SimResult"], f_ec: float) -> "SimResult":
        """Pool independent runs by summing their counts."""
        return cls.from_counts(
            n_slots=sum(r.n_slots for r in results),
            n_detected=sum(r.n_detected for r in results),
            n_sifted=sum(r.n_sifted for r in results),
            n_errors=sum(r.n_errors for r in results),
            n_eve_correct=sum(r.n_eve_correct for r in results),
            watchdog_alarms=sum(r.watchdog_alarms for r in results),
            f_ec=f_ec,
        )

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in SIM_RESULT_FIELDS}


def h2(x: float) -> float:
    """Binary entropy in bits."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy needs a probability, got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def key_rate(qber: float, f_ec: float = 1.0) -> float:
    """Asymptotic secret fraction per sifted bit, floored at zero."""
    if not 0.0 <= qber <= 0.5:
        raise ValueError(f"qber must lie in [0, 0.5], got {qber}")
    return max(0.0, 1.0 - h2(qber) - f_ec * h2(qber))


def analytic_qber(p_sig: float, e_det: float, d: float) -> float:
    """First-order QBER for signal probability ``p_sig`` and per-detector dark probability ``d``."""
    for name, v in (("p_sig", p_sig), ("e_det", e_det), ("d", d)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    denom = p_sig + 2.0 * d
    if denom <= 0.0:
        raise ValueError("no signal and no dark counts: QBER is undefined")
    return (e_det * p_sig + d) / denom


def max_distance(
    params: ProtocolParams,
    state: ApdState,
    circuit: DetectorCircuit,
    *,
    resolution: float = 0.1,
    limit_km: float = 1e5,
) -> float:
    """Largest distance with a positive key rate, to ``resolution`` km.

    Returns ``math.inf`` when the rate never reaches zero (no dark counts and
    misalignment below the threshold), and 0 when no distance works.
    """
    alpha = params.alpha_db_per_km
    if alpha <= 0:
        raise ValueError("max_distance needs a positive attenuation coefficient")
    eta = photon_detection_efficiency(state, circuit)
    d = dark_click_probability(state, circuit)
    e_det = params.e_misalign

    def rate(length: float) -> float:
        p_sig = eta * 10.0 ** (-(params.channel_loss_db + alpha * length) / 10.0)
        if p_sig + 2 * d == 0.0:
            return 0.0
        return key_rate(analytic_qber(p_sig, e_det, d), params.f_ec)

    if rate(0.0) <= 0.0:
        return 0.0
    if d == 0.0:
        return math.inf

    lo, hi = 0.0, 1.0
    while rate(hi) > 0.0:
        lo, hi = hi, 2.0 * hi
        if hi > limit_km:
            return math.inf
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if rate(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return lo


def _detector_response(slot: DetectorSlot, now: float | None):
    """Vectorised click probability ``f(n_photons, bright_power)`` for one detector."""
    state, circuit = slot.state, slot.circuit
    if not state.intact:
        return lambda n, p: np.zeros(np.shape(n))
    if is_blinded(state, circuit):
        sp = setpoint(state, circuit)
        curve = circuit.control_curve
        return lambda n, p: curve.probability(sp, p) * np.ones(np.shape(n))
    eta = photon_detection_efficiency(state, circuit)
    log_miss = math.log1p(-eta) if eta < 1.0 else -math.inf
    p_dark = dark_click_probability(state, circuit, now)
    photons_per_watt = BRIGHT_PULSE_WIDTH / PHOTON_ENERGY

    def response(n, p):
        total = n + p * photons_per_watt
        with np.errstate(invalid="ignore"):
            miss = np.where(total > 0, np.exp(total * log_miss), 1.0)
        return 1.0 - miss * (1.0 - p_dark)

    return response


def run_bb84(
    params: ProtocolParams,
    bob: BobReceiver,
    eve=None,
    seed: int = 0,
    *,
    now: float | None = None,
    chunk: int = CHUNK,
) -> SimResult:
    """Simulate ``params.n_slots`` BB84 slots.

    ``eve`` is None or any object with a ``slot_behaviour()`` method. Eve
    intercepts at Alice's output with a perfect detector; resent single
    photons then traverse the channel, while bright pulses are delivered at
    Bob's input at their nominal power.
    """
    behaviour = eve.slot_behaviour() if eve is not None else SlotBehaviour()
    rng = derive_rng(seed, "bb84")
    transmittance = params.transmittance
    responses = [_detector_response(d, now) for d in bob.detectors]
    photon_power = PHOTON_ENERGY / bob.detectors[0].circuit.slot_duration

    totals = dict(n_detected=0, n_sifted=0, n_errors=0, n_eve_correct=0, watchdog_alarms=0)
    remaining = params.n_slots
    while remaining > 0:
        n = min(chunk, remaining)
        remaining -= n
        a_bit = rng.integers(0, 2, n, dtype=np.int8)
        a_basis = rng.integers(0, 2, n, dtype=np.int8)
        b_basis = rng.integers(0, 2, n, dtype=np.int8)

        if behaviour.mode == "none":
            eve_has = np.zeros(n, dtype=bool)
            e_basis = e_bit = np.zeros(n, dtype=np.int8)
        else:
            if behaviour.fraction >= 1.0:
                eve_has = np.ones(n, dtype=bool)
            else:
                eve_has = rng.random(n) < behaviour.fraction
            e_basis = rng.integers(0, 2, n, dtype=np.int8)
            guess = rng.integers(0, 2, n, dtype=np.int8)
            e_bit = np.where(e_basis == a_basis, a_bit, guess)

        bright = eve_has if behaviour.mode == "bright" else np.zeros(n, dtype=bool)
        if behaviour.mode == "photon":
            ph_bit = np.where(eve_has, e_bit, a_bit)
            ph_basis = np.where(eve_has, e_basis, a_basis)
        else:
            ph_bit, ph_basis = a_bit, a_basis

        arrive = (rng.random(n) < transmittance) & ~bright
        guess_b = rng.integers(0, 2, n, dtype=np.int8)
        out_bit = np.where(b_basis == ph_basis, ph_bit, guess_b)
        out_bit = out_bit ^ (rng.random(n) < params.e_misalign).astype(np.int8)

        # bright pulse routing within Bob's basis pair
        pulse = behaviour.pulse_power * bright
        matched = b_basis == e_basis
        power = [
            np.where(matched, np.where(e_bit == j, pulse, 0.0), 0.5 * pulse) for j in (0, 1)
        ]
        photons = [(arrive & (out_bit == j)).astype(float) for j in (0, 1)]

        prob = [
            np.where(
                b_basis == 0,
                responses[j](photons[j], power[j]),
                responses[2 + j](photons[j], power[j]),
            )
            for j in (0, 1)
        ]
        u = rng.random((2, n))
        c0, c1 = u[0] < prob[0], u[1] < prob[1]

        single = c0 ^ c1
        bob_bit = c1.astype(np.int8)
        sifted = single & (b_basis == a_basis)
        errors = sifted & (bob_bit != a_bit)
        eve_correct = sifted & eve_has & (e_bit == bob_bit)

        totals["n_detected"] += int(single.sum())
        totals["n_sifted"] += int(sifted.sum())
        totals["n_errors"] += int(errors.sum())
        totals["n_eve_correct"] += int(eve_correct.sum())

        if bob.watchdog is not None:
            incident = bob.watchdog_tap * np.where(bright, pulse, arrive * photon_power)
            reading = watchdog_power_reading(bob.watchdog.state, incident)
            totals["watchdog_alarms"] += int((reading > bob.watchdog_threshold).sum())

    return SimResult.from_counts(n_slots=params.n_slots, f_ec=params.f_ec, **totals)


def click_probability(
    slot: DetectorSlot, n_photons: float = 0.0, pulse_power: float = 0.0, now: float | None = None
) -> float:
    """Click probability of one detector given photons and/or a bright pulse."""
    return float(_detector_response(slot, now)(np.asarray(float(n_photons)), pulse_power))

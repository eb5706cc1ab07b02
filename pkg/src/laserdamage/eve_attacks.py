"""Eve's strategies: damage campaigns and the exploits built on them."""
from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .apd_device import dark_click_probability
from .damage import PERMANENT_BANDS, DamageProfile, apply_illumination
from .qkd_sim import (
    BobReceiver,
    DetectorSlot,
    ProtocolParams,
    SimResult,
    SlotBehaviour,
    analytic_qber,
    click_probability,
    run_bb84,
)
from .rng import derive_rng, derive_seed

INTERCEPT_RESEND_ERROR = 0.25


@dataclass(frozen=True)
class InterceptResend:
    fraction: float = 1.0
    name = "intercept-resend"

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("intercept fraction must lie in [0, 1]")

    def slot_behaviour(self) -> SlotBehaviour:
        return SlotBehaviour("photon", self.fraction)


@dataclass(frozen=True)
class FakedState:
    pulse_power: float
    name = "faked-state"

    def __post_init__(self) -> None:
        if self.pulse_power < 0:
            raise ValueError("pulse power must be non-negative")

    def slot_behaviour(self) -> SlotBehaviour:
        return SlotBehaviour("bright", 1.0, self.pulse_power)


@dataclass(frozen=True)
class DamageThenFakedState:
    """Blind all four data detectors with one exposure each, then fake states."""

    campaign_power: float
    pulse_power: float
    name = "damage-then-faked-state"

    def __post_init__(self) -> None:
        if self.campaign_power < 0 or self.pulse_power < 0:
            raise ValueError("powers must be non-negative")

    def slot_behaviour(self) -> SlotBehaviour:
        return SlotBehaviour("bright", 1.0, self.pulse_power)


@dataclass(frozen=True)
class SubtractionExploit:
    """Lower Bob's dark counts, then intercept-resend inside the freed error budget.

    With ``intercept_fraction=None`` the largest hidden fraction is computed
    from the receiver before and after the campaign.
    """

    campaign_power: float
    intercept_fraction: float | None = None
    name = "subtraction-exploit"

    def __post_init__(self) -> None:
        if self.campaign_power < 0:
            raise ValueError("campaign power must be non-negative")
        if self.intercept_fraction is not None and not 0.0 <= self.intercept_fraction <= 1.0:
            raise ValueError("intercept fraction must lie in [0, 1]")

    def slot_behaviour(self) -> SlotBehaviour:
        if self.intercept_fraction is None:
            raise ValueError("intercept fraction not resolved; use run_attack")
        return SlotBehaviour("photon", self.intercept_fraction)


@dataclass(frozen=True)
class WatchdogKill:
    """Destroy the watchdog detector first, then run ``inner``."""

    campaign_power: float
    inner: "EveStrategy"
    name = "watchdog-kill"

    def __post_init__(self) -> None:
        if self.campaign_power < 0:
            raise ValueError("campaign power must be non-negative")

    def slot_behaviour(self) -> SlotBehaviour:
        if self.inner is None:
            return SlotBehaviour("none")
        return self.inner.slot_behaviour()


EveStrategy = Union[
    None, InterceptResend, FakedState, DamageThenFakedState, SubtractionExploit, WatchdogKill
]


@dataclass
class AttackReport:
    result: SimResult
    baseline: SimResult
    qber_delta_vs_baseline: float
    bob_rate_ratio_vs_baseline: float
    alarms_raised: int
    details: dict = field(default_factory=dict)
    receiver: BobReceiver | None = field(default=None, repr=False, compare=False)

    @property
    def eve_info_fraction(self) -> float:
        return self.result.eve_info_fraction

    @classmethod
    def build(cls, result: SimResult, baseline: SimResult, **kw) -> "AttackReport":
        ratio = result.n_sifted / baseline.n_sifted if baseline.n_sifted else 0.0
        return cls(
            result=result,
            baseline=baseline,
            qber_delta_vs_baseline=result.qber - baseline.qber,
            bob_rate_ratio_vs_baseline=ratio,
            alarms_raised=result.watchdog_alarms,
            **kw,
        )

    @classmethod
    def combine(cls, reports: list["AttackReport"], f_ec: float) -> "AttackReport":
        return cls.build(
            SimResult.combine([r.result for r in reports], f_ec),
            SimResult.combine([r.baseline for r in reports], f_ec),
        )

    def to_dict(self) -> dict:
        out = self.result.to_dict()
        out.update(
            qber_delta_vs_baseline=self.qber_delta_vs_baseline,
            bob_rate_ratio_vs_baseline=self.bob_rate_ratio_vs_baseline,
            alarms_raised=self.alarms_raised,
        )
        out["baseline"] = self.baseline.to_dict()
        out.update(self.details)
        return out


def plan_campaign(target_effect: str, profile: DamageProfile, confidence: float = 0.95) -> float:
    """Power that crosses a band's per-sample onset with probability >= ``confidence``.

    Picks the middle of the onset range's upper tail above the ``confidence``
    quantile of the uniform threshold draw.
    """
    if target_effect not in PERMANENT_BANDS:
        raise ValueError(f"campaign target must be one of {PERMANENT_BANDS}, got {target_effect!r}")
    lo, hi = profile.onset_range(target_effect)
    q = 0.5 * (confidence + 1.0)
    return lo + q * (hi - lo)


def faked_state_slot(
    eve_bit: int, eve_basis: int, bob_basis: int, pulse_power: float
) -> tuple[float, float, float, float]:
    """Bright-pulse power reaching each of Bob's detectors (index ``2*basis + bit``)."""
    if pulse_power <= 0:
        raise ValueError("pulse power must be positive")
    powers = [0.0, 0.0, 0.0, 0.0]
    if bob_basis == eve_basis:
        powers[2 * bob_basis + eve_bit] = pulse_power
    else:
        powers[2 * bob_basis] = powers[2 * bob_basis + 1] = pulse_power / 2
    return tuple(powers)


def enumerate_faked_state(bob: BobReceiver, pulse_power: float) -> list[dict]:
    """Every (alice bit, alice basis, eve basis, bob basis) case with Eve's possible outcomes.

    Eve's bit equals Alice's when their bases agree; otherwise both values are
    listed. Each entry carries the click probability of each of Bob's
    detectors.
    """
    cases = []
    for a_bit, a_basis, e_basis, b_basis in itertools.product((0, 1), repeat=4):
        eve_bits = (a_bit,) if e_basis == a_basis else (0, 1)
        for e_bit in eve_bits:
            powers = faked_state_slot(e_bit, e_basis, b_basis, pulse_power)
            probs = [click_probability(slot, 0.0, p) for slot, p in zip(bob.detectors, powers)]
            cases.append(dict(
                alice_bit=a_bit, alice_basis=a_basis, eve_basis=e_basis, eve_bit=e_bit,
                bob_basis=b_basis, powers=powers, click_probs=probs,
            ))
    return cases


def subtraction_exploit_fraction(q_expected: float, q_base_after_damage: float) -> float:
    """Largest intercept-resend fraction hidden in the freed QBER budget (first order)."""
    if q_expected < q_base_after_damage:
        raise ValueError("damaged QBER exceeds the expected QBER: no error budget to exploit")
    return min(1.0, (q_expected - q_base_after_damage) / INTERCEPT_RESEND_ERROR)


def receiver_qber(params: ProtocolParams, bob: BobReceiver) -> float:
    """Analytic QBER of ``bob`` on this link, averaging detector parameters."""
    eta = float(np.mean(bob.efficiencies()))
    d = float(np.mean([dark_click_probability(s.state, s.circuit) for s in bob.detectors]))
    return analytic_qber(eta * params.transmittance, params.e_misalign, d)


def _expose(slot: DetectorSlot, power: float, rng: np.random.Generator) -> list[str]:
    if slot.thresholds is None:
        raise ValueError("detector has no damage thresholds; draw it from a DamageProfile")
    return apply_illumination(slot.state, slot.thresholds, power, rng=rng).effects_triggered


def selective_efficiency_damage(
    bob: BobReceiver,
    target: int,
    profile: DamageProfile,
    rng: np.random.Generator,
    max_attempts: int = 5,
) -> float:
    """Raise one detector's breakdown voltage with band-b light; return min/max efficiency.

    Power steps up through the b onset range, stopping below the c range so
    the breakdown shift is not annealed away.
    """
    if target not in range(4):
        raise ValueError("target detector index must be in 0..3")
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    lo, hi = profile.b_range
    hi = min(hi, profile.c_range[0])
    slot = bob.detectors[target]
    for k in range(1, max_attempts + 1):
        power = lo + (hi - lo) * k / max_attempts
        if "b" in _expose(slot, power, rng):
            break
    eff = bob.efficiencies()
    return min(eff) / max(eff) if max(eff) > 0 else 0.0


def _run_campaign(strategy, bob: BobReceiver, params: ProtocolParams, rng) -> tuple:
    """Apply a strategy's damage to ``bob`` in place; return the per-slot strategy and details."""
    details: dict = {}
    if isinstance(strategy, WatchdogKill):
        if bob.watchdog is not None:
            _expose(bob.watchdog, strategy.campaign_power, rng)
        inner, inner_details = _run_campaign(strategy.inner, bob, params, rng)
        details.update(inner_details)
        return inner, details
    if isinstance(strategy, DamageThenFakedState):
        for slot in bob.detectors:
            _expose(slot, strategy.campaign_power, rng)
        return strategy, details
    if isinstance(strategy, SubtractionExploit):
        q_expected = receiver_qber(params, bob)
        for slot in bob.detectors:
            _expose(slot, strategy.campaign_power, rng)
        q_after = receiver_qber(params, bob)
        fraction = strategy.intercept_fraction
        if fraction is None:
            fraction = subtraction_exploit_fraction(q_expected, q_after)
        details.update(q_expected=q_expected, q_after_damage=q_after, intercept_fraction=fraction)
        return InterceptResend(fraction), details
    return strategy, details


def run_attack(
    strategy: EveStrategy, params: ProtocolParams, bob: BobReceiver, seed: int
) -> AttackReport:
    """Run the campaign (if any) on a copy of ``bob``, then the protocol with Eve active.

    The baseline is the same receiver, undamaged, with no eavesdropper.
    Campaigns are assumed to happen while the link is idle, so the watchdog
    only counts alarms during key exchange.
    """
    baseline = run_bb84(params, copy.deepcopy(bob), None, derive_seed(seed, "baseline"))
    attacked = copy.deepcopy(bob)
    per_slot, details = _run_campaign(strategy, attacked, params, derive_rng(seed, "campaign"))
    result = run_bb84(params, attacked, per_slot, derive_seed(seed, "attack"))
    return AttackReport.build(result, baseline, details=details, receiver=attacked)

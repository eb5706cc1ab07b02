"""Scenario registry: configuration, per-trial execution and pooling."""
from __future__ import annotations

import copy
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import jsonschema
import numpy as np

from .apd_device import ControlCurve, is_blinded
from .characterization import (
    PARAMETERS,
    AlarmPolicy,
    MeasurementSettings,
    damage_sweep,
    sweep_rows_as_dicts,
)
from .damage import DamageProfile, draw_sample
from .eve_attacks import (
    AttackReport,
    DamageThenFakedState,
    SubtractionExploit,
    WatchdogKill,
    plan_campaign,
    run_attack,
    selective_efficiency_damage,
)
from .qkd_sim import BobReceiver, DetectorCircuit, ProtocolParams, SimResult, max_distance, run_bb84
from .rng import derive_rng, derive_seed


class ConfigError(ValueError):
    """The scenario configuration is invalid."""


SCENARIOS = (
    "baseline",
    "damage-sweep",
    "blind-and-fake",
    "dark-count-subtraction",
    "efficiency-mismatch",
    "watchdog-defeat",
)

CURVE_KEYS = ("p_threshold", "deterministic_below", "width_per_volt")

# Scenario defaults; anything here can be overridden from the config file.
_IDEAL_LINK = dict(
    protocol={"channel_loss_db": 0.0, "e_misalign": 0.0},
    detector={"overvoltage": 11.0, "eta_nominal": 1.0, "v_ov_nominal": 11.0},
    damage_profile={"dcr_base": 0.0},
)
DEFAULTS: dict[str, dict] = {
    "baseline": dict(protocol={"distance_km": 25.0}),
    "damage-sweep": dict(scenario_params={
        "p_start": 0.1, "p_stop": 3.0, "p_step": 0.1, "count_time": 10.0,
        "n_test_pulses": 100_000, "mu": 1.0, "tolerance": 0.2, "stop_on_alarm": False,
    }),
    "blind-and-fake": dict(**_IDEAL_LINK, scenario_params={"pulse_factor": 1.5, "campaign_power": None}),
    "dark-count-subtraction": dict(
        # eta 0.5 behind 10*log10(500) dB gives a signal probability of 1e-3 per slot
        protocol={"channel_loss_db": 10.0 * math.log10(500.0), "e_misalign": 0.01},
        damage_profile={"dcr_base": 1e4},
        scenario_params={"campaign_power": None, "intercept_fraction": None},
    ),
    "efficiency-mismatch": dict(
        protocol={"distance_km": 25.0},
        scenario_params={"target": 0, "max_attempts": 5},
    ),
    "watchdog-defeat": dict(**_IDEAL_LINK, scenario_params={
        "pulse_factor": 1.5, "campaign_power": None, "watchdog_power": None,
        "watchdog_threshold": 1e-6, "watchdog_tap": 0.1,
    }),
}


@dataclass
class ScenarioConfig:
    scenario: str
    seed: int
    n_slots: int = 100_000
    trials: int = 1
    output: str | None = None
    format: str | None = None
    protocol: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    damage_profile: dict = field(default_factory=dict)
    scenario_params: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        """Scenario defaults for ``name`` with the user's overrides on top."""
        merged = dict(DEFAULTS[self.scenario].get(name, {}))
        merged.update(getattr(self, name))
        return merged

    def profile(self) -> DamageProfile:
        return DamageProfile.from_dict(self.section("damage_profile"))

    def params(self, n_slots: int | None = None) -> ProtocolParams:
        return ProtocolParams.from_dict(
            self.section("protocol"), n_slots=self.n_slots if n_slots is None else n_slots
        )

    def circuit_kwargs(self) -> tuple[float, dict]:
        det = self.section("detector")
        overvoltage = det.pop("overvoltage", 15.0)
        curve = {k: det.pop(k) for k in CURVE_KEYS if k in det}
        if curve:
            det["control_curve"] = ControlCurve(**curve)
        return overvoltage, det

    def draw_receiver(self, seed: int, with_watchdog: bool = False) -> BobReceiver:
        overvoltage, kw = self.circuit_kwargs()
        return BobReceiver.draw(
            self.profile(), derive_rng(seed, "receiver"),
            overvoltage=overvoltage, with_watchdog=with_watchdog, **kw,
        )


def _schema() -> dict:
    text = resources.files("laserdamage").joinpath("config.schema.json").read_text("utf-8")
    return json.loads(text)


def load_config(doc: dict) -> ScenarioConfig:
    """Validate a raw configuration mapping and build a ScenarioConfig."""
    if "scenario" in doc and doc["scenario"] not in SCENARIOS:
        raise ConfigError(
            f"unknown scenario {doc['scenario']!r}; valid scenarios: {', '.join(SCENARIOS)}"
        )
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {exc.message}") from None
    if "scenario" not in doc:
        raise ConfigError(f"no scenario given; valid scenarios: {', '.join(SCENARIOS)}")
    if "seed" not in doc:
        raise ConfigError("a seed is required (there is no clock-based default)")
    cfg = ScenarioConfig(**{k: copy.deepcopy(v) for k, v in doc.items()})
    try:
        cfg.profile()
        cfg.params()
        ov, kw = cfg.circuit_kwargs()
        DetectorCircuit(v_bias=cfg.profile().v_br_orig + ov, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


# -- per-trial scenario bodies --------------------------------------------

def _baseline(cfg: ScenarioConfig, seed: int, n_slots: int) -> dict:
    bob = cfg.draw_receiver(seed)
    params = cfg.params(n_slots)
    result = run_bb84(params, bob, None, derive_seed(seed, "run"))
    first = bob.detectors[0]
    dist = max_distance(params, first.state, first.circuit)
    return {"result": result, "max_distance_km": None if math.isinf(dist) else dist}


def _damage_sweep(cfg: ScenarioConfig, seed: int, n_slots: int) -> dict:
    sp = cfg.section("scenario_params")
    profile = cfg.profile()
    rng = derive_rng(seed, "sweep")
    state, thresholds = draw_sample(profile, rng)
    overvoltage, kw = cfg.circuit_kwargs()
    circuit = DetectorCircuit.for_apd(state, overvoltage, **kw)
    n_steps = int(round((sp["p_stop"] - sp["p_start"]) / sp["p_step"]))
    powers = [round(sp["p_start"] + k * sp["p_step"], 12) for k in range(n_steps + 1)]
    meas = MeasurementSettings(sp["count_time"], sp["n_test_pulses"], sp["mu"])
    policy = AlarmPolicy(tolerances={p: sp["tolerance"] for p in PARAMETERS})
    rows = damage_sweep((state, thresholds), powers, circuit, meas, policy, rng,
                        stop_on_alarm=sp["stop_on_alarm"])
    return {"rows": sweep_rows_as_dicts(rows)}


def _pulse_power(cfg: ScenarioConfig, sp: dict) -> float:
    _, kw = cfg.circuit_kwargs()
    curve = kw.get("control_curve", ControlCurve())
    return sp["pulse_factor"] * curve.p_threshold


def _blind_and_fake(cfg: ScenarioConfig, seed: int, n_slots: int) -> dict:
    sp = cfg.section("scenario_params")
    profile = cfg.profile()
    campaign = sp["campaign_power"]
    if campaign is None:
        campaign = plan_campaign("e", profile)
    pulse = _pulse_power(cfg, sp)
    bob = cfg.draw_receiver(seed)
    report = run_attack(DamageThenFakedState(campaign, pulse), cfg.params(n_slots), bob, seed)
    blinded = sum(is_blinded(d.state, d.circuit) for d in report.receiver.detectors)
    return {"campaign_power": campaign, "pulse_power": pulse,
            "detectors_blinded": blinded, "report": report}


def _dark_count_subtraction(cfg: ScenarioConfig, seed: int, n_slots: int) -> dict:
    sp = cfg.section("scenario_params")
    campaign = sp["campaign_power"]
    if campaign is None:
        campaign = plan_campaign("c", cfg.profile())
    bob = cfg.draw_receiver(seed)
    strategy = SubtractionExploit(campaign, sp["intercept_fraction"])
    report = run_attack(strategy, cfg.params(n_slots), bob, seed)
    return {"campaign_power": campaign, "report": report}


def _efficiency_mismatch(cfg: ScenarioConfig, seed: int, n_slots: int) -> dict:
    sp = cfg.section("scenario_params")
    bob = cfg.draw_receiver(seed)
    ratio = selective_efficiency_damage(
        bob, sp["target"], cfg.profile(), derive_rng(seed, "campaign"), sp["max_attempts"]
    )
    result = run_bb84(cfg.params(n_slots), bob, None, derive_seed(seed, "run"))
    return {"target": sp["target"], "mismatch_ratio": ratio,
            "efficiencies": bob.efficiencies(), "result": result}


def _watchdog_defeat(cfg: ScenarioConfig, seed: int, n_slots: int) -> dict:
    sp = cfg.section("scenario_params")
    profile = cfg.profile()
    campaign = sp["campaign_power"]
    if campaign is None:
        campaign = plan_campaign("e", profile)
    kill = sp["watchdog_power"]
    if kill is None:
        kill = plan_campaign("f", profile)
    inner = DamageThenFakedState(campaign, _pulse_power(cfg, sp))
    bob = cfg.draw_receiver(seed, with_watchdog=True)
    bob.watchdog_threshold = sp["watchdog_threshold"]
    bob.watchdog_tap = sp["watchdog_tap"]
    params = cfg.params(n_slots)
    defeated = run_attack(WatchdogKill(kill, inner), params, bob, seed)
    control = run_attack(inner, params, bob, seed)
    return {"campaign_power": campaign, "watchdog_power": kill,
            "watchdog_structural": defeated.receiver.watchdog.state.structural.value,
            "defeated": defeated, "control": control}


RUNNERS: dict[str, Callable[[ScenarioConfig, int, int], dict]] = {
    "baseline": _baseline,
    "damage-sweep": _damage_sweep,
    "blind-and-fake": _blind_and_fake,
    "dark-count-subtraction": _dark_count_subtraction,
    "efficiency-mismatch": _efficiency_mismatch,
    "watchdog-defeat": _watchdog_defeat,
}


# -- pooling and serialisation --------------------------------------------

def _serialise(value):
    if isinstance(value, (SimResult, AttackReport)):
        return value.to_dict()
    if isinstance(value, dict):
        return {k: _serialise(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_serialise(v) for v in value]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def _pool(cfg: ScenarioConfig, trials: list[dict]) -> dict:
    """Merge per-trial payloads: counts are summed, scalars are listed per trial."""
    if len(trials) == 1:
        return trials[0]
    if cfg.scenario == "damage-sweep":
        return {"rows": [row for t in trials for row in t["rows"]]}
    f_ec = cfg.params().f_ec
    pooled: dict = {}
    for key in trials[0]:
        values = [t[key] for t in trials]
        if isinstance(values[0], SimResult):
            pooled[key] = SimResult.combine(values, f_ec)
        elif isinstance(values[0], AttackReport):
            pooled[key] = AttackReport.combine(values, f_ec)
        elif all(v == values[0] for v in values):
            pooled[key] = values[0]
        else:
            pooled[key] = {"per_trial": values}
    return pooled


def _trial(args: tuple[ScenarioConfig, int, int]) -> dict:
    cfg, seed, n_slots = args
    return RUNNERS[cfg.scenario](cfg, seed, n_slots)


def run_scenario(cfg: ScenarioConfig, *, workers: int | None = None) -> dict:
    """Run a scenario and return its JSON-ready payload.

    With ``cfg.trials > 1`` the slots are split across independently seeded
    trials executed in a process pool and the counts pooled. The pooled
    statistics match a single run in distribution, not slot by slot.
    """
    if cfg.trials == 1:
        body = _trial((cfg, cfg.seed, cfg.n_slots))
        mode = "single"
    else:
        base, extra = divmod(cfg.n_slots, cfg.trials)
        jobs = [
            (cfg, derive_seed(cfg.seed, "trial", i), base + (1 if i < extra else 0))
            for i in range(cfg.trials)
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(_trial, jobs))
        body = _pool(cfg, trials)
        mode = "trials-parallel"
    meta = {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "n_slots": cfg.n_slots,
        "trials": cfg.trials,
        "mode": mode,
    }
    return {"metadata": meta, **_serialise(body)}

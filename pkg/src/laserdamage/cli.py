"""``simulate`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .characterization import CSV_COLUMNS
from .qkd_sim import InvariantViolation
from .rng import MAX_SEED
from .scenarios import SCENARIOS, ConfigError, load_config, run_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="simulate",
        description="Seeded BB84 simulations with laser-damaged detectors.",
    )
    p.add_argument("--scenario", help=f"one of: {', '.join(SCENARIOS)}")
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed (required here or in config)")
    p.add_argument("--pulses", type=int, help="number of slots to simulate")
    p.add_argument("--out", help="output path (stdout if omitted)")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--trials", type=int, help="split the run into N parallel trials")
    return p


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, list):
            out[key] = ";".join(str(x) for x in v)
        else:
            out[key] = v
    return out


def render(payload: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(payload, indent=2, allow_nan=False) + "\n"
    buf = io.StringIO()
    if "rows" in payload:
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(payload["rows"])
    else:
        flat = _flatten(payload)
        writer = csv.DictWriter(buf, fieldnames=list(flat), lineterminator="\n")
        writer.writeheader()
        writer.writerow(flat)
    return buf.getvalue()


def _gather(args: argparse.Namespace) -> dict:
    doc: dict = {}
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    overrides = {
        "scenario": args.scenario,
        "seed": args.seed,
        "n_slots": args.pulses,
        "output": args.out,
        "format": args.format,
        "trials": args.trials,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    seed = doc.get("seed")
    if isinstance(seed, int) and not 0 <= seed <= MAX_SEED:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return doc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(_gather(args))
        if cfg.format is None:
            by_suffix = cfg.output and Path(cfg.output).suffix.lower() in (".csv", ".json")
            if by_suffix:
                cfg.format = Path(cfg.output).suffix.lower()[1:]
            else:
                cfg.format = "csv" if cfg.scenario == "damage-sweep" else "json"
        payload = run_scenario(cfg)
    except ConfigError as exc:
        print(f"simulate: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"simulate: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT

    text = render(payload, cfg.format)
    if cfg.output:
        Path(cfg.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

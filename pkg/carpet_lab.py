"""
carpet_lab.py — CarpetLab batch runner
======================================
Runs one experiment pipeline (SLE traces, loop-soup carpets, the carpet and
natural-parameterization measures, the analytic kit) from a JSON run config
patched by flags, writes CSV/JSON/SVG artifacts and a manifest, and exits 0
only when every acceptance assertion of the run holds.

Usage
-----
    python carpet_lab.py params --kappa 4
    python carpet_lab.py sle-trace --kappa 6 --seed 7 --svg
    python carpet_lab.py carpet --kappa 4 --grid-size 1024 --output-dir runs/cle4
    python carpet_lab.py xi-estimate --config config/run_config.example.json --workers 4
    python carpet_lab.py markov-test --kappa 3 --n-replicas 400 --random-seed
    python carpet_lab.py --print-manifest-schema

Exit codes
----------
    0  every assertion passed
    2  invalid config or parameter outside its domain
    3  a statistical / acceptance assertion failed
    4  internal error, or a domain error after artifacts were written
"""

from __future__ import annotations

import argparse
import json
import pathlib
import sys
from typing import Any, Dict, List, Optional

import numpy as np
from loguru import logger
from pydantic import ValidationError

from core.config import settings
from core.exceptions import ConfigError, ParameterDomainError, RunAborted
from core.models import RunConfig, RunManifest, Subcommand
from pipeline.commands import execute

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILED = 3
EXIT_INTERNAL = 4

# flag dest -> RunConfig field
_OVERRIDES = {
    "kappa": "kappa",
    "kappas": "kappas",
    "grid_size": "grid_size",
    "field_resolution": "field_resolution",
    "eps": "eps",
    "dt": "dt",
    "n_steps": "n_steps",
    "n_traces": "n_traces",
    "n_fields": "n_fields",
    "n_replicas": "n_replicas",
    "t_min": "t_min",
    "t_cap": "t_cap",
    "c_sequence": "c_sequence",
    "scale": "scale",
    "seeds": "seeds",
    "workers": "workers",
    "output_dir": "output_dir",
}


# ──────────────────────────────────────────────────────────────────────────────
# Logger setup
# ──────────────────────────────────────────────────────────────────────────────

def _configure_logger(level: str, log_file: Optional[str] = None) -> None:
    fmt = (
        "<green>{time:HH:mm:ss}</green> │ "
        "<level>{level: <8}</level> │ "
        "<cyan>{function: <30}</cyan> │ "
        "{message}"
    )
    logger.remove()
    logger.add(sys.stderr, format=fmt, colorize=True, level=level)
    if log_file:
        logger.add(log_file, format=fmt, colorize=False, level="DEBUG", rotation="10 MB")


# ──────────────────────────────────────────────────────────────────────────────
# Config
# ──────────────────────────────────────────────────────────────────────────────

def _load_json(path: str) -> Dict[str, Any]:
    try:
        payload = json.loads(pathlib.Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return payload


def _format_validation(exc: ValidationError) -> str:
    lines = [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
    return "invalid run config:\n  " + "\n  ".join(lines)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """JSON file first, then every flag that was given; flags win."""
    raw: Dict[str, Any] = _load_json(args.config) if args.config else {}
    if args.subcommand:
        raw["subcommand"] = args.subcommand
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            raw[key] = value
    if args.random_seed:
        seed = int(np.random.SeedSequence().entropy % (2 ** 32))
        logger.info(f"🎲 random seed requested: {seed}")
        raw["seeds"] = [seed]
    if args.svg:
        raw["export_svg"] = True
    if args.no_csv:
        raw["export_csv"] = False
    if "output_dir" not in raw and "subcommand" in raw:
        raw["output_dir"] = str(pathlib.Path(settings.output_root) / str(raw["subcommand"]))
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from exc


# ──────────────────────────────────────────────────────────────────────────────
# Main
# ──────────────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        description="CarpetLab: SLE / CLE / LQG measure experiments → CSV, JSON, SVG and a manifest",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("subcommand", nargs="?", choices=[s.value for s in Subcommand], help="pipeline to run")
    p.add_argument("--config",           default=None, help="JSON run config (flags override its keys)")
    p.add_argument("--kappa",            type=float, default=None, help="SLE parameter")
    p.add_argument("--kappas",           type=float, nargs="+", default=None, help="kappa list for dim-est / params")
    p.add_argument("--grid-size",        type=int, default=None, help="lattice side in cells")
    p.add_argument("--field-resolution", type=int, default=None, help="GFF lattice side (default: grid size)")
    p.add_argument("--eps",              type=float, default=None, help="measure threshold (default: 8 cells)")
    p.add_argument("--dt",               type=float, default=None, help="Loewner / SDE time step")
    p.add_argument("--n-steps",          type=int, default=None, help="Loewner steps per trace")
    p.add_argument("--n-traces",         type=int, default=None, help="traces per estimate")
    p.add_argument("--n-fields",         type=int, default=None, help="GFF samples per trace or CLE draw")
    p.add_argument("--n-replicas",       type=int, default=None, help="independent replicas")
    p.add_argument("--t-min",            type=float, default=None, help="smallest loop-soup duration")
    p.add_argument("--t-cap",            type=float, default=None, help="largest loop-soup duration")
    p.add_argument("--c-sequence",       type=float, nargs="+", default=None, help="intensities for cle4-coupling")
    p.add_argument("--scale",            type=float, default=None, help="dilation factor b in [1/2, 2]")
    p.add_argument("--seed",             dest="seeds", type=int, nargs="+", default=None, help="explicit seed(s)")
    p.add_argument("--random-seed",      action="store_true", help="draw a seed from OS entropy (logged)")
    p.add_argument("--workers",          type=int, default=None, help="worker processes for replicas")
    p.add_argument("--output-dir",       default=None, help=f"artifact directory (default: {settings.output_root}/<subcommand>)")
    p.add_argument("--svg",              action="store_true", help="also write SVG figures")
    p.add_argument("--no-csv",           action="store_true", help="skip CSV tables")
    p.add_argument("--log-level",        default=settings.log_level, help="stderr log level")
    p.add_argument("--log-file",         default=None, help="extra DEBUG log file (rotated at 10 MB)")
    p.add_argument("--print-manifest-schema", action="store_true", help="print the manifest JSON schema and exit")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logger(args.log_level.upper(), args.log_file)

    if args.print_manifest_schema:
        print(json.dumps(RunManifest.model_json_schema(), indent=2, sort_keys=True))
        return EXIT_OK

    try:
        if not args.subcommand and not args.config:
            raise ConfigError("a subcommand (or a --config naming one) is required")
        config = resolve_config(args)
        manifest = execute(config)
    except (ConfigError, ParameterDomainError) as exc:
        logger.error(f"❌ {exc}")
        return EXIT_CONFIG
    except RunAborted as exc:
        logger.error(f"❌ {exc}")
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        logger.exception(f"❌ internal error: {exc}")
        return EXIT_INTERNAL

    return EXIT_OK if manifest.passed else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())

"""Run configuration, sweep execution, CSV/JSON reporting, and the CLI.

Config files are INI. Every key has a default, so an empty file is valid;
unknown sections or keys are rejected by name, and constraint violations
name the offending key. ``--set section.key=value`` overrides apply after
the file. Each (mode, seed) cell writes one per-round CSV and one
per-client diagnostics CSV; the summary JSON is computed from those CSVs,
so ``report`` can always rebuild it byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import json
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from configparser import ConfigParser, Error as IniError
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .env_gen import HeterogeneityConfig
from .federation import ExperimentConfig, FedConfig, run_experiment
from .metrics import METRIC_KEYS
from .param_space import DECODER_LAYER_ORDER, LayerKey
from .personalization import MODES, SelectionConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "config_echo",
    "run_cells",
    "build_summary",
    "report_rounds_to_target",
    "main",
]

_MODE_CHOICES = MODES + ("no_layer",)

# layers that can travel, in reporting order (the critic never appears)
_TRANSFER_ORDER = (
    LayerKey.EMBEDDING,
    LayerKey.ENCODER_RNN,
    LayerKey.ENC_DEC_PROJECTION,
) + DECODER_LAYER_ORDER

_ROUNDS_COLUMNS = ("round", "mean_train_loss") + METRIC_KEYS + ("sr_client_std",)
_DIAG_COLUMNS = (
    ("round", "client", "train_loss")
    + tuple(f"alpha_{k.value}" for k in DECODER_LAYER_ORDER)
    + tuple(f"sel_{k.value}" for k in _TRANSFER_ORDER)
    + tuple(f"w_{k.value}" for k in _TRANSFER_ORDER)
)

_ROUNDS_RE = re.compile(r"^rounds_(.+)_(\d+)\.csv$")


class ConfigError(ValueError):
    """A configuration file or override that cannot be used."""


# -- field casters -------------------------------------------------------------


def _int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"expected an integer, got {s!r}") from None


def _float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"expected a number, got {s!r}") from None


def _optional_float(s: str):
    if s.strip().lower() in ("", "none", "null"):
        return None
    return _float(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _split(s: str) -> list[str]:
    return s.replace(",", " ").split()


def _int_pair(s: str) -> tuple[int, int]:
    parts = _split(s)
    if len(parts) != 2:
        raise ValueError(f"expected two integers, got {s!r}")
    return (_int(parts[0]), _int(parts[1]))


def _float_pair(s: str) -> tuple[float, float]:
    parts = _split(s)
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {s!r}")
    return (_float(parts[0]), _float(parts[1]))


def _int_list(s: str) -> tuple[int, ...]:
    parts = _split(s)
    if not parts:
        raise ValueError("expected at least one integer")
    return tuple(_int(p) for p in parts)


def _mode_list(s: str) -> tuple[str, ...]:
    parts = _split(s)
    if not parts:
        raise ValueError("expected at least one mode")
    for p in parts:
        if p not in _MODE_CHOICES:
            raise ValueError(f"unknown mode {p!r} (valid: {', '.join(_MODE_CHOICES)})")
    return tuple(parts)


_SCHEMA: dict[str, dict[str, Callable]] = {
    "experiment": {
        "modes": _mode_list,
        "seeds": _int_list,
        "embed_dim": _int,
        "enc_hidden": _int,
        "dec_hidden": _int,
    },
    "federation": {
        "n_clients": _int,
        "participation": _float,
        "rounds": _int,
        "local_epochs": _int,
        "local_lr": _float,
        "il_rl_mix": _float,
        "batch_size": _int,
        "t_max": _int,
        "eval_every": _int,
        "checkpoint_every": _int,
        "target_loss": _optional_float,
    },
    "selection": {
        "delta": _float,
        "alpha_lr": _float,
        "alpha_steps": _int,
        "alpha_batches": _int,
        "alpha_joint": _bool,
        "w_lr": _float,
        "w_steps": _int,
        "full_w_round": _int,
        "w_rel_tol": _float,
        "w_max_steps": _int,
    },
    "heterogeneity": {
        "heterogeneous": _bool,
        "scale_range": _int_pair,
        "branching_range": _float_pair,
        "verbosity_range": _float_pair,
        "n_room_types": _int,
        "noise_dim": _int,
        "noise_sigma": _float,
        "filler_tokens": _int,
        "vocab_size": _int,
        "episodes_per_client": _int,
        "train_split": _float,
        "hop_range": _int_pair,
        "max_ref_hops": _int,
        "extent": _float,
        "success_radius": _float,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """A full sweep: the experiment template plus the (mode, seed) grid."""

    experiment: ExperimentConfig
    modes: tuple[str, ...] = ("pfednavi",)
    seeds: tuple[int, ...] = (0,)

    def cells(self) -> list[tuple[str, int]]:
        return [(mode, seed) for mode in self.modes for seed in self.seeds]


def parse_config(
    path: str,
    overrides: Sequence[str] = (),
    modes: Sequence[str] | None = None,
    seeds: Sequence[int] | None = None,
) -> RunConfig:
    """Read an INI file, apply ``section.key=value`` overrides, build the run.

    An empty file yields the defaults. Unknown sections and keys are
    rejected by name; so is any value violating a field's constraint.
    """
    cp = ConfigParser()
    cp.optionxform = str  # keep key case so error messages quote it verbatim
    try:
        read = cp.read([path])
    except IniError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if not read:
        raise ConfigError(f"cannot read config file: {path}")

    table: dict[str, dict[str, str]] = {sec: {} for sec in _SCHEMA}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}] (valid: {', '.join(_SCHEMA)})"
            )
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"[{section}] unknown key {key!r} "
                    f"(valid: {', '.join(sorted(_SCHEMA[section]))})"
                )
            table[section][key] = raw

    for ov in overrides:
        lhs, sep, value = ov.partition("=")
        sec, dot, key = lhs.strip().partition(".")
        if not sep or not dot or not sec or not key:
            raise ConfigError(f"override must look like section.key=value, got {ov!r}")
        if sec not in _SCHEMA:
            raise ConfigError(f"unknown config section [{sec}] (valid: {', '.join(_SCHEMA)})")
        if key not in _SCHEMA[sec]:
            raise ConfigError(
                f"[{sec}] unknown key {key!r} (valid: {', '.join(sorted(_SCHEMA[sec]))})"
            )
        table[sec][key] = value.strip()

    typed: dict[str, dict] = {sec: {} for sec in _SCHEMA}
    for sec, kv in table.items():
        for key, raw in kv.items():
            try:
                typed[sec][key] = _SCHEMA[sec][key](raw)
            except ValueError as e:
                raise ConfigError(f"[{sec}] {key}: {e}") from None

    try:
        env = HeterogeneityConfig(**typed["heterogeneity"])
    except ValueError as e:
        raise ConfigError(f"[heterogeneity] {e}") from None
    try:
        selection = SelectionConfig(**typed["selection"])
    except ValueError as e:
        raise ConfigError(f"[selection] {e}") from None
    try:
        fed = FedConfig(selection=selection, **typed["federation"])
    except ValueError as e:
        raise ConfigError(f"[federation] {e}") from None

    exp_kwargs = typed["experiment"]
    run_modes = exp_kwargs.pop("modes", ("pfednavi",))
    run_seeds = exp_kwargs.pop("seeds", (0,))
    try:
        experiment = ExperimentConfig(fed=fed, env=env, **exp_kwargs)
    except ValueError as e:
        raise ConfigError(f"[experiment] {e}") from None

    if modes is not None:
        try:
            run_modes = _mode_list(" ".join(modes))
        except ValueError as e:
            raise ConfigError(f"--modes: {e}") from None
    if seeds is not None:
        run_seeds = tuple(int(s) for s in seeds)
    if len(set(run_modes)) != len(run_modes):
        raise ConfigError(f"duplicate modes: {run_modes}")
    if len(set(run_seeds)) != len(run_seeds):
        raise ConfigError(f"duplicate seeds: {run_seeds}")
    return RunConfig(experiment=experiment, modes=tuple(run_modes), seeds=tuple(run_seeds))


def config_echo(run: RunConfig) -> dict:
    """The effective configuration (defaults folded in) as plain JSON types."""
    fed = dataclasses.asdict(run.experiment.fed)
    selection = fed.pop("selection")
    fed.pop("mode")  # per-cell, listed under experiment.modes instead
    env = {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in dataclasses.asdict(run.experiment.env).items()
    }
    return {
        "experiment": {
            "modes": list(run.modes),
            "seeds": list(run.seeds),
            "embed_dim": run.experiment.embed_dim,
            "enc_hidden": run.experiment.enc_hidden,
            "dec_hidden": run.experiment.dec_hidden,
        },
        "federation": fed,
        "selection": selection,
        "heterogeneity": env,
    }


# -- output files ----------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_rounds_csv(path: str, records) -> None:
    lines = [",".join(_ROUNDS_COLUMNS)]
    for rec in records:
        row = [str(rec.round_index)]
        row.append("" if rec.mean_train_loss is None else _fmt(rec.mean_train_loss))
        if rec.metrics is None:
            row.extend([""] * (len(METRIC_KEYS) + 1))
        else:
            row.extend(_fmt(rec.metrics.mean[k]) for k in METRIC_KEYS)
            row.append(_fmt(rec.metrics.std["sr"]))
        lines.append(",".join(row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_diag_csv(path: str, records) -> None:
    lines = [",".join(_DIAG_COLUMNS)]
    for rec in records:
        for diag in rec.diagnostics:
            row = [str(rec.round_index), str(diag.client_id), _fmt(diag.train_loss)]
            if diag.alpha is None:
                row.extend([""] * len(DECODER_LAYER_ORDER))
            else:
                row.extend(_fmt(diag.alpha[k]) for k in DECODER_LAYER_ORDER)
            row.extend("1" if k in diag.selected else "0" for k in _TRANSFER_ORDER)
            row.extend(
                _fmt(diag.mean_fusion[k]) if k in diag.mean_fusion else ""
                for k in _TRANSFER_ORDER
            )
            lines.append(",".join(row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _cell_paths(out_dir: str, mode: str, seed: int) -> tuple[str, str]:
    return (
        os.path.join(out_dir, f"rounds_{mode}_{seed}.csv"),
        os.path.join(out_dir, f"diag_{mode}_{seed}.csv"),
    )


def _run_cell(experiment: ExperimentConfig, mode: str, seed: int, out_dir: str) -> list[str]:
    cfg = dataclasses.replace(experiment, fed=dataclasses.replace(experiment.fed, mode=mode))
    result = run_experiment(cfg, seed)
    rounds_path, diag_path = _cell_paths(out_dir, mode, seed)
    _write_rounds_csv(rounds_path, result.records)
    _write_diag_csv(diag_path, result.records)
    return [rounds_path, diag_path]


def _thread_cap() -> int:
    raw = os.environ.get("PFEDNAV_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PFEDNAV_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"PFEDNAV_THREADS must be >= 1, got {n}")
    return n


def run_cells(run: RunConfig, out_dir: str) -> list[str]:
    """Execute every (mode, seed) cell and write all output files.

    Cells are independent, each writes its own files, and the summary is
    rebuilt from the CSVs afterwards, so the bytes on disk do not depend on
    how many workers PFEDNAV_THREADS allows. On any failure the files this
    run would have produced are removed.
    """
    os.makedirs(out_dir, exist_ok=True)
    cells = run.cells()
    threads = _thread_cap()
    written: list[str] = []
    try:
        if threads <= 1 or len(cells) == 1:
            for mode, seed in cells:
                written.extend(_run_cell(run.experiment, mode, seed, out_dir))
        else:
            with ProcessPoolExecutor(max_workers=min(threads, len(cells))) as pool:
                futures = [
                    pool.submit(_run_cell, run.experiment, mode, seed, out_dir)
                    for mode, seed in cells
                ]
                for fut in futures:
                    written.extend(fut.result())
        summary = build_summary(out_dir, config_echo(run))
        summary_path = os.path.join(out_dir, "summary.json")
        _atomic_write(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
        written.append(summary_path)
        return written
    except BaseException:
        _remove_outputs(out_dir, run, written)
        raise


def _remove_outputs(out_dir: str, run: RunConfig, written: Sequence[str]) -> None:
    doomed = set(written)
    for mode, seed in run.cells():
        doomed.update(_cell_paths(out_dir, mode, seed))
    doomed.add(os.path.join(out_dir, "summary.json"))
    for path in sorted(doomed):
        for p in (path, path + ".tmp"):
            try:
                os.remove(p)
            except FileNotFoundError:
                pass


# -- the summary -----------------------------------------------------------------


def report_rounds_to_target(losses: Sequence[float], target: float) -> int | None:
    """First 1-indexed round whose mean training loss is at or below target."""
    for i, loss in enumerate(losses, start=1):
        if loss <= target:
            return i
    return None


def _read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_summary(out_dir: str, echo: Mapping | None = None) -> dict:
    """Recompute the summary from the CSVs in ``out_dir``.

    Every number is derived from the CSV files; the config echo is carried
    from the caller or, for ``report``, from the summary already on disk.
    """
    if echo is None:
        existing = os.path.join(out_dir, "summary.json")
        if os.path.exists(existing):
            with open(existing) as fh:
                echo = json.load(fh).get("config", {})
        else:
            echo = {}
    files = sorted(glob.glob(os.path.join(out_dir, "rounds_*.csv")))
    if not files:
        raise FileNotFoundError(f"no rounds CSVs under {out_dir}")
    target = None
    if echo:
        target = echo.get("federation", {}).get("target_loss")

    cells: dict[str, dict[str, dict]] = {}
    for path in files:
        m = _ROUNDS_RE.match(os.path.basename(path))
        if m is None:
            continue
        mode, seed = m.group(1), m.group(2)
        rows = _read_csv(path)
        losses = [float(r["mean_train_loss"]) for r in rows if r["mean_train_loss"] != ""]
        eval_rows = [r for r in rows if r["sr"] != ""]
        if not eval_rows:
            raise ValueError(f"{path} has no evaluation rows")
        final = eval_rows[-1]
        cells.setdefault(mode, {})[seed] = {
            "final_round": int(final["round"]),
            "final": {k: float(final[k]) for k in METRIC_KEYS + ("sr_client_std",)},
            "final_mean_train_loss": losses[-1] if losses else None,
            "rounds_to_target": (
                report_rounds_to_target(losses, target) if target is not None else None
            ),
        }

    modes_table: dict[str, dict] = {}
    for mode, per_seed in cells.items():
        seeds_sorted = sorted(per_seed, key=int)
        finals = [per_seed[s]["final"] for s in seeds_sorted]
        targets = [per_seed[s]["rounds_to_target"] for s in seeds_sorted]
        modes_table[mode] = {
            "seeds": [int(s) for s in seeds_sorted],
            "final_mean": {k: float(np.mean([f[k] for f in finals])) for k in finals[0]},
            "rounds_to_target": {s: targets[i] for i, s in enumerate(seeds_sorted)},
            "rounds_to_target_mean": (
                float(np.mean(targets)) if targets and all(t is not None for t in targets) else None
            ),
        }
    return {"version": __version__, "config": echo, "cells": cells, "modes": modes_table}


# -- command line ------------------------------------------------------------------


def _cmd_run(args) -> int:
    run = parse_config(args.config, args.overrides, modes=args.modes, seeds=args.seeds)
    paths = run_cells(run, args.out)
    with open(paths[-1]) as fh:
        summary = json.load(fh)
    for mode in sorted(summary["modes"]):
        table = summary["modes"][mode]
        final = table["final_mean"]
        rtt = table["rounds_to_target_mean"]
        rtt_text = "n/a" if rtt is None else f"{rtt:.1f}"
        print(
            f"{mode}: sr {final['sr']:.2f}  spl {final['spl']:.2f}  "
            f"ndtw {final['ndtw']:.2f}  rounds-to-target {rtt_text}"
        )
    print(f"wrote {len(paths)} files under {args.out}")
    return 0


def _cmd_validate(args) -> int:
    run = parse_config(args.config, args.overrides)
    print(
        f"config ok: {len(run.modes)} mode(s) x {len(run.seeds)} seed(s) = "
        f"{len(run.cells())} cell(s), {run.experiment.fed.rounds} round(s), "
        f"{run.experiment.fed.n_clients} client(s)"
    )
    return 0


def _cmd_report(args) -> int:
    summary = build_summary(args.dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="pfednavi",
        description="Federated navigation experiments: run sweeps, check configs, rebuild summaries.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute every (mode, seed) cell and write CSVs + summary")
    p_run.add_argument("--config", required=True, help="INI config file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--modes", nargs="+", default=None, help="override the mode list")
    p_run.add_argument("--seeds", nargs="+", type=int, default=None, help="override the seed list")
    p_run.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)",
    )
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="parse a config and report the grid it describes")
    p_val.add_argument("--config", required=True)
    p_val.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE"
    )
    p_val.set_defaults(func=_cmd_validate)

    p_rep = sub.add_parser("report", help="rebuild the summary from the CSVs in a directory")
    p_rep.add_argument("--dir", required=True)
    p_rep.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

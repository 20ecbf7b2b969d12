"""Command-line entry point: baselines, training, evaluation, sweeps and reports."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from . import metrics
from .config import ConfigError
from .demand import scale as scale_profile, with_peakedness
from .ppo.agent import load_checkpoint, save_checkpoint
from .ppo.env import PerimeterEnv
from .ppo.evaluate import (
    EvalTable, PolicyController, density_sweep, evaluate, policy_grid,
    write_policy_grid,
)
from .ppo.trainer import train, write_curve
from .scenario import Scenario
from .sim import InvariantBreach, write_state_trace

log = logging.getLogger("perimeter_lab")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
SCALE_POINTS = (0.8, 0.9, 1.0, 1.1, 1.2)
PEAKEDNESS_POINTS = (1.0, 1.5, 2.0, 2.5, 3.0)
CONTROLLER_ORDER = {"npc": 0, "pi": 1, "ppo": 2}


# -- shared plumbing ------------------------------------------------------------

def _parse_seeds(text: str) -> list[int]:
    """``1-10`` or ``1,3,5`` or a mix like ``1-3,7``."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                a, b = (int(x) for x in part.split("-", 1))
                if b < a:
                    raise ValueError
                seeds.extend(range(a, b + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError("--seed-list", f"cannot parse {text!r}; use forms like 1-10 or 1,2,5") from None
    if not seeds:
        raise ConfigError("--seed-list", "no seeds given")
    return seeds


def resolve_config(args) -> dict:
    cfg = cfgmod.resolve(args.config or [])
    return cfgmod.with_overrides(
        cfg,
        seeds=_parse_seeds(args.seed_list) if args.seed_list else None,
        controller=getattr(args, "controller", None),
        state_design=args.state_design,
        **{"ppo.gamma": args.gamma,
           "scenario.demand.scale": args.scale,
           "scenario.demand.peakedness": args.peakedness,
           "checkpoint": getattr(args, "checkpoint", None),
           "ppo.episodes": getattr(args, "episodes", None)},
    )


def _header(cfg: dict) -> str:
    return f"config-hash {cfgmod.config_hash(cfg)}"


def _checkpoint_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "policy.npz"


def load_policy(cfg: dict, out: Path, scenario: Scenario):
    path = _checkpoint_path(cfg, out)
    if not path.exists():
        raise ConfigError("checkpoint", f"no policy file at {path}; run `train` first")
    ac, meta, _ = load_checkpoint(path)
    design = cfgmod.design_from(dict(cfg, state_design=meta.get("state_design", cfg["state_design"])), scenario)
    return ac, design


def make_controller(name: str, cfg: dict, scenario: Scenario, out: Path):
    if name in ("npc", "pi"):
        return lambda: scenario.controller(name)
    ac, design = load_policy(cfg, out, scenario)
    return lambda: PolicyController(ac, design)


def _read_rows(path: Path, expect_hash: str | None = None) -> list[dict]:
    """Rows of a CSV written by this tool; empty when the provenance differs."""
    if not path.exists():
        return []
    with open(path) as fh:
        first = fh.readline()
        if expect_hash is not None and first.strip() != f"# {expect_hash}":
            return []
        if not first.startswith("#"):
            fh.seek(0)
        return list(csv.DictReader(fh))


def _merge_tables(out: Path, header: str, tables: list[EvalTable]) -> None:
    """Rewrite tts.csv and eval.csv, keeping other controllers' rows of the same provenance."""
    keep = {t.controller for t in tables}
    old = [r for r in _read_rows(out / "tts.csv", header) if r["controller"] not in keep]
    rows = [
        {"seed": str(r.seed), "controller": t.controller, "tts_total_h": f"{r.tts.total_h:.6f}",
         "tts_inside_h": f"{r.tts.inside_h:.6f}", "tts_outside_h": f"{r.tts.outside_h:.6f}",
         "finished": str(int(r.finished)), "end_clock_s": f"{r.clock:g}"}
        for t in tables for r in t.results
    ]
    rows = sorted(old + rows, key=lambda r: (CONTROLLER_ORDER.get(r["controller"], 9), r["controller"],
                                             int(r["seed"])))
    fields = ["seed", "controller", "tts_total_h", "tts_inside_h", "tts_outside_h", "finished", "end_clock_s"]
    with open(out / "tts.csv", "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.DictWriter(fh, fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_wide(out / "eval.csv", header, rows)


def _write_wide(path: Path, header: str, rows: list[dict]) -> None:
    by_ctrl: dict[str, dict[int, float]] = {}
    for r in rows:
        by_ctrl.setdefault(r["controller"], {})[int(r["seed"])] = float(r["tts_total_h"])
    seeds = sorted({s for d in by_ctrl.values() for s in d})
    ref = by_ctrl.get("npc")
    ref_mean = float(np.mean(list(ref.values()))) if ref else None
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["controller", *[f"seed_{s}" for s in seeds], "mean", "improvement_pct"])
        for name, d in by_ctrl.items():
            mean = float(np.mean(list(d.values())))
            imp = "" if not ref_mean else f"{100.0 * (ref_mean - mean) / ref_mean:.3f}"
            w.writerow([name, *[f"{d[s]:.4f}" if s in d else "" for s in seeds], f"{mean:.4f}", imp])


def _write_mfd(path: Path, header: str, per_seed: list[tuple[str, int, list[metrics.MfdPoint]]]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_start", "density", "production", "phase", "controller", "seed"])
        for name, seed, pts in per_seed:
            for p in pts:
                w.writerow([f"{p.window_start:g}", f"{p.density:.6f}", f"{p.production:.6f}", p.phase,
                            name, seed])


def _run_tables(cfg: dict, names: Sequence[str], scenario: Scenario, out: Path, traces: bool):
    tables = []
    mfd_rows = []
    check = cfg["scenario"]["sim"]["check_invariants"]
    for name in names:
        factory = make_controller(name, cfg, scenario, out)
        table = evaluate(factory, scenario, cfg["seeds"], name=name, record_trace=traces, check_invariants=check)
        tables.append(table)
        log.info("%s mean TTS %.1f h over %d seeds", name, table.mean, len(cfg["seeds"]))
        if traces:
            (out / "traces").mkdir(exist_ok=True)
            for r in table.results:
                mfd_rows.append((name, r.seed, metrics.mfd_series(r.trace, scenario.control_cycle)))
                write_state_trace(r.summaries, out / "traces" / f"{name}_seed{r.seed}.csv", _header(cfg))
    return tables, mfd_rows


# -- commands -----------------------------------------------------------------------

def cmd_baseline(cfg: dict, out: Path) -> int:
    name = cfg["controller"]
    if name not in ("npc", "pi"):
        raise ConfigError("controller", "baseline runs npc or pi; use `evaluate` for ppo")
    scenario = cfgmod.scenario_from(cfg)
    header = _header(cfg)
    tables, mfd_rows = _run_tables(cfg, [name], scenario, out, traces=True)
    _merge_tables(out, header, tables)
    old_mfd = [r for r in _read_rows(out / "mfd.csv", header) if r["controller"] != name]
    merged = {}
    for r in old_mfd:
        merged.setdefault((r["controller"], int(r["seed"])), []).append(
            metrics.MfdPoint(float(r["window_start"]), float(r["density"]), float(r["production"]), r["phase"]))
    for n, s, pts in mfd_rows:
        merged[(n, s)] = pts
    ordered = sorted(merged.items(), key=lambda kv: (CONTROLLER_ORDER.get(kv[0][0], 9), kv[0]))
    _write_mfd(out / "mfd.csv", header, [(n, s, pts) for (n, s), pts in ordered])
    return EXIT_OK


def cmd_train(cfg: dict, out: Path, fresh: bool = False) -> int:
    scenario = cfgmod.scenario_from(cfg)
    design = cfgmod.design_from(cfg, scenario)
    pcfg = cfgmod.ppo_from(cfg)
    env = PerimeterEnv(scenario, design, seed=cfg["train_seed"], r_max=pcfg.r_max)
    state_file = out / "training.npz"
    header = _header(cfg)
    if state_file.exists() and not fresh:
        _, meta, _ = load_checkpoint(state_file)
        if meta.get("config_hash") != cfgmod.config_hash(cfg, ignore=("controller", "checkpoint", "seeds")):
            raise ConfigError("--config", f"{state_file} was produced by a different configuration; "
                                          "pass --fresh to start over")
        log.info("resuming from %s at episode %d", state_file, meta["episodes_done"])

    def progress(k, diag):
        log.info("update %d: episode %d eval TTS %.1f h, std %.3f", k, diag["episode"], diag["eval_score"],
                 diag["std"])

    meta = {"state_design": design.variant,
            "config_hash": cfgmod.config_hash(cfg, ignore=("controller", "checkpoint", "seeds"))}
    result = train(env, pcfg, checkpoint=state_file, resume=not fresh, on_update=progress, meta=meta)
    write_curve(result.curve, out / "train.csv", header)
    policy_meta = {"kind": "policy", "state_design": design.variant, "best_score": result.best_score,
                   "episodes": len(result.curve), "config_hash": meta["config_hash"]}
    save_checkpoint(_checkpoint_path(cfg, out), result.best, policy_meta)
    log.info("best training-environment TTS %.1f h", result.best_score)
    return EXIT_OK


def _policy_grid_rows(ac, design, scenario: Scenario, cfg: dict, table: EvalTable | None):
    """D_p sweep; for d6 two slices at zero and peak future demand with D_f at its observed mean."""
    if design.dim == 1:
        return policy_grid(ac, design, density_sweep(design)), None, ()
    df_mean = 0.0
    if table is not None:
        vals = [s.observation.feeder_density for r in table.results for s in r.summaries if s.observation]
        df_mean = float(np.mean(vals)) if vals else 0.0
    if design.dim == 2:
        return policy_grid(ac, design, density_sweep(design, fixed=(0.0, df_mean))), None, ()
    rows, labels = [], []
    for label, f12, f22 in (("low", 0.0, 0.0), ("high", design.demand_max_12, design.demand_max_22)):
        part = policy_grid(ac, design, density_sweep(design, fixed=(0.0, df_mean, f12, f22, 0.0, 0.0)))
        rows += part
        labels += [(label,)] * len(part)
    return rows, labels, ("future_demand",)


def cmd_evaluate(cfg: dict, out: Path) -> int:
    scenario = cfgmod.scenario_from(cfg)
    name = cfg["controller"]
    header = _header(cfg)
    tables, _ = _run_tables(cfg, [name], scenario, out, traces=False)
    _merge_tables(out, header, tables)
    if name == "ppo":
        ac, design = load_policy(cfg, out, scenario)
        rows, extra, cols = _policy_grid_rows(ac, design, scenario, cfg, tables[0])
        write_policy_grid(rows, design, out / "policy_grid.csv", header, cols, extra)
    return EXIT_OK


def generalize_points(mode: str) -> tuple[float, ...]:
    if mode == "scale":
        return SCALE_POINTS
    if mode == "peakedness":
        return PEAKEDNESS_POINTS
    raise ConfigError("mode", f"unknown sweep {mode!r}; choose scale or peakedness")


def sweep_scenario(base: Scenario, mode: str, point: float) -> Scenario:
    if mode == "scale":
        return base.with_profile(scale_profile(base.profile, point))
    return base.with_profile(with_peakedness(base.profile, point))


def cmd_generalize(cfg: dict, out: Path, mode: str, controllers: Sequence[str] = CONTROLLER_ORDER) -> int:
    points = generalize_points(mode)
    base = cfgmod.scenario_from(cfg)
    factories = {}
    for name in controllers:
        factories[name] = make_controller(name, cfg, base, out)
    header = _header(cfg)
    path = out / f"generalize_{mode}.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "point", "controller", "seed", "tts_h", "inside_h", "outside_h", "finished"])
        for point in points:
            scenario = sweep_scenario(base, mode, point)
            for name in controllers:
                # the policy keeps its nominal-demand scaling; only the plant changes
                table = evaluate(factories[name], scenario, cfg["seeds"], name=name)
                log.info("%s=%g %s mean TTS %.1f h", mode, point, name, table.mean)
                for r in table.results:
                    w.writerow([mode, f"{point:g}", name, r.seed, f"{r.tts.total_h:.6f}",
                                f"{r.tts.inside_h:.6f}", f"{r.tts.outside_h:.6f}", int(r.finished)])
    return EXIT_OK


def summarize(rows: list[dict]) -> dict:
    """Per-controller means, improvements against npc and pi, and the inside/outside split."""
    by: dict[str, list[dict]] = {}
    for r in rows:
        by.setdefault(r["controller"], []).append(r)
    means = {}
    for name, rs in by.items():
        means[name] = {
            "seeds": len(rs),
            "tts_h": float(np.mean([float(r["tts_total_h"]) for r in rs])),
            "inside_h": float(np.mean([float(r["tts_inside_h"]) for r in rs])),
            "outside_h": float(np.mean([float(r["tts_outside_h"]) for r in rs])),
        }
    improvements = {}
    for ref in ("npc", "pi"):
        if ref not in means:
            continue
        base = means[ref]["tts_h"]
        if base <= 0:
            continue
        for name, m in means.items():
            if name != ref and CONTROLLER_ORDER.get(name, 9) > CONTROLLER_ORDER[ref]:
                improvements[f"{name}_vs_{ref}_pct"] = 100.0 * (base - m["tts_h"]) / base
    split = [{"controller": n, "inside_h": m["inside_h"], "outside_h": m["outside_h"],
              "total_h": m["inside_h"] + m["outside_h"]} for n, m in means.items()]
    if "npc" in means:
        for name, m in means.items():
            if name != "npc":
                split.append({"controller": f"{name}-npc",
                              "inside_h": m["inside_h"] - means["npc"]["inside_h"],
                              "outside_h": m["outside_h"] - means["npc"]["outside_h"],
                              "total_h": (m["inside_h"] + m["outside_h"])
                              - (means["npc"]["inside_h"] + means["npc"]["outside_h"])})
    return {"controllers": means, "improvements": improvements, "split": split}


def cmd_report(out: Path) -> int:
    tts = out / "tts.csv"
    if not tts.exists():
        raise ConfigError("--out", f"missing inputs: {tts}")
    rows = _read_rows(tts)
    if not rows:
        raise ConfigError("--out", f"{tts} holds no rows")
    with open(tts) as fh:
        first = fh.readline().strip()
    summary = summarize(rows)
    summary["provenance"] = first.lstrip("# ")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", metavar="PRESET_OR_FILE",
                        help="config layer over the defaults (repeatable; a preset name like 'desk' or a YAML path)")
    common.add_argument("--seed-list", help="evaluation seeds, e.g. 1-10 or 1,4,7")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--state-design", choices=["d1", "d2", "d6"])
    common.add_argument("--gamma", type=float, help="discount factor")
    common.add_argument("--scale", type=float, help="demand multiplier")
    common.add_argument("--peakedness", type=float, help="demand peakedness ratio (>= 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="perimeter-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    b = sub.add_parser("baseline", parents=[common], help="run npc or pi over the seed list")
    b.add_argument("--controller", choices=["npc", "pi"])
    t = sub.add_parser("train", parents=[common], help="train a policy (resumes if interrupted)")
    t.add_argument("--episodes", type=int)
    t.add_argument("--checkpoint", help="where to write the best policy (default <out>/policy.npz)")
    t.add_argument("--fresh", action="store_true", help="ignore saved training state")
    e = sub.add_parser("evaluate", parents=[common], help="evaluate a controller over the seed list")
    e.add_argument("--controller", choices=["npc", "pi", "ppo"])
    e.add_argument("--checkpoint")
    g = sub.add_parser("generalize", parents=[common], help="demand scale or peakedness sweep")
    g.add_argument("mode", choices=["scale", "peakedness"])
    g.add_argument("--checkpoint")
    g.add_argument("--controllers", default="npc,pi,ppo", help="comma list (default npc,pi,ppo)")
    sub.add_parser("report", parents=[common], help="summarise tts.csv into summary.json")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    out = Path(args.out)
    try:
        if args.command == "report":
            return cmd_report(out)
        cfg = resolve_config(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfgmod.dumps(cfg))
        if args.command == "baseline":
            return cmd_baseline(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, fresh=args.fresh)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out)
        if args.command == "generalize":
            names = [n.strip() for n in args.controllers.split(",") if n.strip()]
            bad = [n for n in names if n not in CONTROLLER_ORDER]
            if bad or not names:
                raise ConfigError("--controllers", f"unknown controller(s) {bad}")
            return cmd_generalize(cfg, out, args.mode, names)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantBreach as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

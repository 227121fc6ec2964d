"""Command-line entry point: simulate, train, sweep, compare."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, load_config, preset_config
from .neural import load_checkpoint, save_checkpoint
from .ppo import PPORouter, RandomRouter, TrainingDiverged, train
from .simkernel import Simulator, named_rng
from .sweep import COLUMNS as SWEEP_COLUMNS
from .sweep import run_sweep

log = logging.getLogger("slimsched")


class CLIError(Exception):
    pass


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows, cfg: ExperimentConfig, seed: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# provenance config_hash={cfg.digest()} seed={seed}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def summary_table(s: dict) -> str:
    lat, en, uv, th = s["latency_s"], s["energy_j"], s["gpu_util_var"], s["throughput"]
    rows = [("Metric", "Mean(μ)", "Std(σ)"),
            ("Accuracy (%)", f"{s['accuracy_pct']:.2f}", ""),
            ("Latency (s)", f"{lat['mean']:.6f}", f"{lat['std']:.6f}"),
            ("Energy (J)", f"{en['mean']:.6f}", f"{en['std']:.6f}"),
            ("GPU util variance", f"{uv['mean']:.6f}", f"{uv['std']:.6f}"),
            ("Image completion throughput", f"{th['completed']}",
             f"{th['per_s']:.2f}/s over {th['wall_span_s']:.2f}s")]
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    return "\n".join(f"{a:<{w0}}  {b:>{w1}}  {c}" for a, b, c in rows)


# -- simulate ---------------------------------------------------------------

def make_router(cfg: ExperimentConfig, kind: str, checkpoint: Optional[str], seed: int):
    rng = named_rng(seed, "policy")
    if kind == "random":
        return RandomRouter(rng)
    if checkpoint is None:
        raise CLIError("--router ppo needs --checkpoint")
    if not Path(checkpoint).is_file():
        raise CLIError(f"checkpoint not found: {checkpoint}")
    params, norm, _ = load_checkpoint(checkpoint)
    want = (len(cfg.cluster.devices), len(cfg.knobs.widths), len(cfg.cluster.groups))
    have = (params.n_servers, params.n_widths, params.n_groups)
    if want != have:
        raise CLIError(f"checkpoint heads (servers, widths, groups)={have} do not match "
                       f"the config's {want}")
    return PPORouter(params, norm, rng, eval_eps=cfg.eval.eps, greedy=cfg.eval.greedy)


def simulate(cfg: ExperimentConfig, router: str, checkpoint: Optional[str] = None,
             trace: bool = False, out: Optional[Path] = None):
    """Run one evaluation episode; returns (summary dict, simulator)."""
    r = make_router(cfg, router, checkpoint, cfg.seed)
    sim = Simulator(cfg.build_cluster(), cfg.build_workload(), r, table=cfg.accuracy_table(),
                    trace=trace)
    metrics = sim.run()
    summary = {
        "router": router,
        "checkpoint": Path(checkpoint).name if checkpoint else None,
        "seed": cfg.seed,
        "workload_seed": cfg.workload_seed,
        "workload": cfg.workload.model_dump(mode="json") | {"seed": cfg.workload_seed},
        "config_hash": cfg.digest(),
        "metrics": metrics.summary(),
    }
    if out is not None:
        seed = cfg.seed
        _write_json(out / "summary.json", summary)
        write_csv(out / "latency.csv", ["request", "arrival_s", "completion_s", "latency_s",
                                        "widths"],
                  ((c.id, c.t_arrival, c.t_completion, c.latency,
                    "/".join(f"{w:g}" for w in c.widths)) for c in sim.completions), cfg, seed)
        write_csv(out / "blocks.csv", ["block", "server", "width", "size", "latency_s",
                                       "energy_j"],
                  ((b.id, b.server, "" if b.width is None else b.width, b.size, b.latency,
                    b.energy) for b in sim.blocks), cfg, seed)
        write_csv(out / "utilvar.csv", ["sample", "util_variance"],
                  enumerate(metrics.util_variance_samples), cfg, seed)
        if trace:
            n = len(sim.servers)
            header = ["time_s"] + [f"{k}_{i}" for i in range(n)
                                   for k in ("queue", "power_w", "util", "vram_bytes")]
            write_csv(out / "trace.csv", header, sim.trace_rows, cfg, seed)
    return summary, sim


# -- train ------------------------------------------------------------------

def _checkpoint_extra(cfg: ExperimentConfig, result, status: str) -> dict:
    return {"status": status, "config_hash": cfg.digest(), "seed": cfg.seed,
            "updates": len(result.curves), "episodes": result.episodes,
            "reward": cfg.reward_weights().__dict__,
            "exploration": cfg.exploration.model_dump(),
            "widths": list(cfg.knobs.widths), "groups": list(cfg.cluster.groups)}


def _write_curves(out: Path, cfg: ExperimentConfig, curves) -> None:
    write_csv(out / "curves.csv", ["update", "mean_reward", "L_clip", "L_V", "H", "eps"],
              ((c.update, c.mean_reward, c.l_clip, c.l_v, c.entropy, c.epsilon)
               for c in curves), cfg, cfg.seed)


def train_cmd(cfg: ExperimentConfig, out: Path, updates: Optional[int] = None):
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.ppo.updates if updates is None else updates
    try:
        result = train(cfg.build_cluster(), cfg.build_workload(horizon=cfg.ppo.episode_horizon),
                       cfg.reward_weights(), cfg.exploration_schedule(), cfg.ppo_hyper(), n,
                       cfg.seed, table=cfg.accuracy_table())
    except TrainingDiverged as e:
        res = e.result
        save_checkpoint(out / "checkpoint.json", res.params, res.norm,
                        _checkpoint_extra(cfg, res, "diverged"))
        _write_curves(out, cfg, res.curves)
        raise CLIError(f"training diverged: {e}; last good checkpoint written to "
                       f"{out / 'checkpoint.json'}") from e
    save_checkpoint(out / "checkpoint.json", result.params, result.norm,
                    _checkpoint_extra(cfg, result, "ok"))
    _write_curves(out, cfg, result.curves)
    (out / "config.yaml").write_text(cfg.to_yaml())
    return result


# -- sweep ------------------------------------------------------------------

def sweep_cmd(cfg: ExperimentConfig, device: int, out: Path):
    s = cfg.sweep
    try:
        pts = run_sweep(cfg.build_cluster(), device, s.batch_grid, s.think_time, s.horizon,
                        s.warmup, cfg.seed)
    except ValueError as e:
        raise CLIError(str(e)) from e
    write_csv(out, SWEEP_COLUMNS,
              ((p.width, p.batch, p.utilization, p.mean_latency, p.mean_power, p.completions)
               for p in pts), cfg, cfg.seed)
    return pts


# -- compare ----------------------------------------------------------------

COMPARE_COLUMNS = ["run", "router", "latency_mean_s", "latency_std_s", "energy_mean_j",
                   "energy_std_j", "accuracy_pct", "completed", "wall_span_s",
                   "d_latency_pct", "d_energy_pct", "d_accuracy_pct", "d_throughput_pct"]


def _load_run(path: str) -> dict:
    p = Path(path)
    f = p / "summary.json" if p.is_dir() else p
    if not f.is_file():
        raise CLIError(f"no summary.json in {path}")
    return json.loads(f.read_text())


def _run_label(path: str) -> str:
    # the directory name keeps reports independent of where runs live
    p = Path(path)
    return p.parent.name if p.is_file() else p.name


def _pct(new: float, base: float) -> float:
    if base == 0:
        return 0.0 if new == 0 else float("inf")
    return 100.0 * (new - base) / base


def compare(baseline: str, runs: Sequence[str]) -> list[dict]:
    base = _load_run(baseline)
    others = [(r, _load_run(r)) for r in runs]
    for name, doc in others:
        if doc["workload_seed"] != base["workload_seed"]:
            raise CLIError(f"{name}: workload seed {doc['workload_seed']} differs from the "
                           f"baseline's {base['workload_seed']}; runs are not comparable")
        if doc.get("workload") != base.get("workload"):
            raise CLIError(f"{name}: workload differs from the baseline's; runs are not "
                           f"comparable")
    bm = base["metrics"]
    rows = []
    for name, doc in [(baseline, base)] + others:
        m = doc["metrics"]
        rows.append({
            "run": _run_label(name), "router": doc["router"],
            "latency_mean_s": m["latency_s"]["mean"], "latency_std_s": m["latency_s"]["std"],
            "energy_mean_j": m["energy_j"]["mean"], "energy_std_j": m["energy_j"]["std"],
            "accuracy_pct": m["accuracy_pct"], "completed": m["throughput"]["completed"],
            "wall_span_s": m["throughput"]["wall_span_s"],
            "d_latency_pct": _pct(m["latency_s"]["mean"], bm["latency_s"]["mean"]),
            "d_energy_pct": _pct(m["energy_j"]["mean"], bm["energy_j"]["mean"]),
            "d_accuracy_pct": _pct(m["accuracy_pct"], bm["accuracy_pct"]),
            "d_throughput_pct": _pct(m["throughput"]["completed"],
                                     bm["throughput"]["completed"]),
        })
    return rows


def compare_table(rows: list[dict]) -> str:
    head = ("run", "lat μ", "lat σ", "energy μ", "energy σ", "acc %", "done", "span s",
            "Δlat %", "Δenergy %", "Δacc %", "Δthru %")
    body = [(r["run"], f"{r['latency_mean_s']:.5f}", f"{r['latency_std_s']:.5f}",
             f"{r['energy_mean_j']:.4f}", f"{r['energy_std_j']:.4f}",
             f"{r['accuracy_pct']:.2f}", str(r["completed"]), f"{r['wall_span_s']:.2f}",
             f"{r['d_latency_pct']:+.2f}", f"{r['d_energy_pct']:+.2f}",
             f"{r['d_accuracy_pct']:+.2f}", f"{r['d_throughput_pct']:+.2f}") for r in rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths))
                     for line in [head] + body)


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slimsched",
                                 description="Slimmable-network inference scheduling simulator")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one evaluation episode")
    p.add_argument("--config", help="YAML config (defaults if omitted)")
    p.add_argument("--router", choices=("random", "ppo"), default="random")
    p.add_argument("--checkpoint", help="policy checkpoint for --router ppo")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--trace", action="store_true", help="also write trace.csv")
    p.add_argument("--out", help="output directory (default runs/simulate-<router>)")

    p = sub.add_parser("train", help="train the PPO router")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--updates", type=int, help="override ppo.updates")

    p = sub.add_parser("sweep", help="closed-loop load sweep on one device")
    p.add_argument("--config")
    p.add_argument("--device", type=int, required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("compare", help="percentage deltas against a baseline run")
    p.add_argument("--config", help="accepted for symmetry; runs carry their own provenance")
    p.add_argument("--baseline-run", required=True)
    p.add_argument("--ppo-run", nargs="+", required=True)
    p.add_argument("--out", help="report directory (default: the baseline run directory)")

    p = sub.add_parser("default-config", help="print a complete config with defaults")
    p.add_argument("--preset", choices=("default", "overfit", "balanced"), default="default")
    return ap


def _config(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as e:
        raise CLIError(f"config not found: {args.config}") from e
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "default-config":
            sys.stdout.write(preset_config(args.preset).to_yaml())
        elif args.command == "simulate":
            cfg = _config(args)
            out = Path(args.out or f"runs/simulate-{args.router}")
            summary, _ = simulate(cfg, args.router, args.checkpoint, args.trace, out)
            print(summary_table(summary["metrics"]))
            print(f"wrote {out}")
        elif args.command == "train":
            cfg = _config(args)
            res = train_cmd(cfg, Path(args.out), args.updates)
            last = res.curves[-1] if res.curves else None
            if last is not None:
                print(f"{len(res.curves)} updates over {res.episodes} episodes; "
                      f"final mean reward {last.mean_reward:.5f}")
            print(f"wrote {args.out}")
        elif args.command == "sweep":
            cfg = _config(args)
            pts = sweep_cmd(cfg, args.device, Path(args.out))
            print(f"wrote {len(pts)} sweep points to {args.out}")
        elif args.command == "compare":
            rows = compare(args.baseline_run, args.ppo_run)
            print(compare_table(rows))
            out = Path(args.out) if args.out else Path(args.baseline_run)
            out.mkdir(parents=True, exist_ok=True)
            base = _load_run(args.baseline_run)
            with open(out / "compare.csv", "w", newline="") as f:
                f.write(f"# provenance config_hash={base['config_hash']} seed={base['seed']}\n")
                w = csv.DictWriter(f, COMPARE_COLUMNS, lineterminator="\n")
                w.writeheader()
                for r in rows:
                    w.writerow({k: _fmt(v) for k, v in r.items()})
            _write_json(out / "compare.json", {"baseline": args.baseline_run,
                                               "runs": args.ppo_run, "rows": rows})
            print(f"wrote {out / 'compare.csv'}")
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:  # pydantic ValidationError subclasses ValueError
        print(f"error: invalid configuration\n{e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

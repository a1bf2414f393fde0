"""Command-line entry point.

Subcommands: fetch-mnist, train, eval, probe, analyze, intervene, stats,
sweep and plot. Every command refuses to overwrite existing outputs unless
``--force`` is given. Failures exit nonzero after printing one JSON line,
``{"error": <type>, "message": <text>}``, to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import shutil
import sys
import urllib.request
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import (intervention_experiment, learning_curve, power_probe, protocol_tables,
                       speaker_table, strongest_symbol, wilson_interval, write_json_report)
from .config import (BIASES, ENVS, ConfigError, ExperimentConfig, classify_good_run, config_keys,
                     load_config, parse_overrides, preset)
from .training import load_trainer, read_metrics, run_experiment
from .treasure import N_TUNNELS, ScriptedCollector, ScriptedFinder

MNIST_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"
MNIST_FILES = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}
METRIC_ALIASES = {"reward": "mean_episode_reward"}
RANKINGS = {"digit": "mean final reward", "treasure": "runs above the no-comm baseline"}


class CliError(Exception):
    pass


class OutputExistsError(CliError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message)
        raise SystemExit(2)


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _key_help() -> str:
    defaults = ExperimentConfig()
    lines = ["config keys (file lines or --set key=value):"]
    for k in config_keys():
        lines.append(f"  {k} (default {getattr(defaults, k)!r})")
    return "\n".join(lines)


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise OutputExistsError(f"{path} exists; pass --force to overwrite")


# ------------------------------------------------------------------ commands

def cmd_fetch_mnist(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, digest in MNIST_FILES.items():
        target = out / name
        if target.exists() and _md5(target) == digest and not args.force:
            print(f"{name}: present")
            continue
        tmp = target.with_suffix(".part")
        with urllib.request.urlopen(args.mirror.rstrip("/") + "/" + name) as src, open(tmp, "wb") as dst:
            shutil.copyfileobj(src, dst)
        got = _md5(tmp)
        if got != digest:
            tmp.unlink()
            raise CliError(f"{name}: md5 {got} does not match {digest}")
        tmp.replace(target)
        print(f"{name}: fetched")
    return 0


def _md5(path: Path) -> str:
    return hashlib.md5(path.read_bytes()).hexdigest()


def _config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config:
        return load_config(args.config, overrides)
    values = parse_overrides(overrides)
    return preset(args.env, args.bias).replace(**values)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.env}-{cfg.bias}-seed{cfg.seed}"

    def log(row):
        if not args.quiet:
            print(json.dumps({k: row[k] for k in ("global_step", "mean_episode_reward") if k in row}))

    run_experiment(cfg, out, resume=args.resume, force=args.force, log=log)
    report = json.loads((out / "report.json").read_text())
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    trainer = load_trainer(args.run, args.checkpoint)
    reward = trainer.evaluate(args.episodes) if trainer.cfg.env == "treasure" else trainer.evaluate()
    print(json.dumps({"run": str(args.run), "checkpoint": args.checkpoint, "reward": reward,
                      "good_run": classify_good_run(trainer.cfg.env, reward)}))
    return 0


def cmd_probe(args) -> int:
    trainer = load_trainer(args.run, args.checkpoint)
    if trainer.cfg.env != "digit":
        raise CliError("probe applies to digit-game runs")
    out = Path(args.run) / "probe.json"
    _guard(out, args.force)
    rep = power_probe(trainer.speaker, trainer.listener, trainer.dataset, args.samples, args.seed)
    write_json_report(out, rep)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return 0


def _treasure_pair(args):
    if args.scripted:
        return ScriptedFinder(), ScriptedCollector("decode"), preset("treasure", "no-bias")
    trainer = load_trainer(args.run, args.checkpoint)
    if trainer.cfg.env != "treasure":
        raise CliError("this command applies to treasure-hunt runs")
    finder = trainer.nets[0] if trainer.nets[0] is not None else trainer.scripted
    return finder, trainer.nets[1], trainer.cfg


def _analysis_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    if args.run:
        return Path(args.run)
    raise CliError("give a run directory or --out")


def cmd_analyze(args) -> int:
    out = _analysis_dir(args) / "tables"
    if args.run and not args.scripted and load_config(Path(args.run) / "config.cfg").env == "digit":
        trainer = load_trainer(args.run, args.checkpoint)
        _guard(out / "messages.csv", args.force)
        out.mkdir(parents=True, exist_ok=True)
        table = speaker_table(trainer.speaker, trainer.dataset)
        with open(out / "messages.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["digit"] + [f"m{m}" for m in range(table.shape[1])])
            for d, row in enumerate(table):
                w.writerow([d] + [f"{p:.6f}" for p in row])
        print(f"wrote {out / 'messages.csv'}")
        return 0
    finder, collector, cfg = _treasure_pair(args)
    _guard(out / "tunnel.csv", args.force)
    out.mkdir(parents=True, exist_ok=True)
    tunnel, action = protocol_tables(finder, collector, cfg, args.episodes, args.seed)
    tunnel.to_csv(out / "tunnel.csv")
    action.to_csv(out / "action.csv")
    print("P(T | S)\n" + tunnel.format())
    print("P(A | S)\n" + action.format())
    return 0


def cmd_intervene(args) -> int:
    base = _analysis_dir(args)
    out = base / f"intervention_T{args.tunnel + 1}.json"
    _guard(out, args.force)
    finder, collector, cfg = _treasure_pair(args)
    symbol = args.symbol
    if symbol is None:
        tunnel, _ = protocol_tables(finder, collector, cfg, args.episodes, args.seed)
        symbol = strongest_symbol(tunnel, args.tunnel)
    rep = intervention_experiment(finder, collector, symbol, args.tunnel, args.episodes,
                                  args.seed, cfg)
    base.mkdir(parents=True, exist_ok=True)
    write_json_report(out, rep)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return 0


def cmd_stats(args) -> int:
    lo, hi = wilson_interval(args.successes, args.n, args.confidence)
    print(f"{lo:.2f} {hi:.2f}")
    return 0


# ------------------------------------------------------------------ sweep

def parse_grid(text: str) -> tuple[dict, list[list[dict]]]:
    """Base overrides plus grid axes.

    ``key = value`` sets a base value. ``key = [a, b]`` adds an axis. Paired
    keys share an axis: ``ps_weight|ps_lambda = [0.1|3, 0.03|10]``. The grid is
    the cross-product of all axes.
    """
    base, axes = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"grid line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not (value.startswith("[") and value.endswith("]")):
            base.append(f"{key}={value}")
            continue
        keys = [k.strip() for k in key.split("|")]
        axis = []
        for item in value[1:-1].split(","):
            parts = [p.strip() for p in item.split("|")]
            if len(parts) != len(keys):
                raise ConfigError(f"grid line {lineno}: {item.strip()!r} does not match {key!r}")
            axis.append(parse_overrides([f"{k}={v}" for k, v in zip(keys, parts)]))
        axes.append(axis)
    return parse_overrides(base), axes


def grid_points(base: dict, axes: list[list[dict]]) -> list[dict]:
    points = []
    for combo in itertools.product(*axes) if axes else [()]:
        p = dict(base)
        for d in combo:
            p.update(d)
        points.append(p)
    return points


def _point_config(values: dict, seed: int) -> ExperimentConfig:
    env, bias = values.get("env", "digit"), values.get("bias", "no-bias")
    return preset(env, bias).replace(**{**values, "seed": seed})


def _run_point(job) -> dict:
    values, seed, run_dir, force = job
    try:
        cfg = _point_config(values, seed)
        run_experiment(cfg, run_dir, force=force)
        return {"seed": seed, **json.loads((Path(run_dir) / "report.json").read_text())}
    except Exception as exc:   # recorded per point; the sweep continues
        return {"seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def _baseline_values(values: dict) -> dict:
    keep = {k: v for k, v in values.items()
            if k not in ("bias", "ps_weight", "ps_lambda", "pl_weight", "ce_weight", "si_weight",
                         "h_target", "action_entropy", "message_entropy")}
    return {**keep, "bias": "no-comm"}


def rank_points(env: str, results: list[dict], baseline: float | None) -> list[dict]:
    rows = []
    for r in results:
        finals = [x["final_reward"] for x in r["runs"] if "final_reward" in x]
        row = {"point": r["point"], "settings": r["settings"], "completed": len(finals),
               "failed": len(r["runs"]) - len(finals),
               "mean_final": float(np.mean(finals)) if finals else float("nan")}
        if env == "treasure":
            row["above_baseline"] = sum(f > baseline for f in finals)
        rows.append(row)
    if env == "treasure":
        key = lambda r: (-r["above_baseline"], -np.nan_to_num(r["mean_final"], nan=-np.inf), r["point"])
    else:
        key = lambda r: (-np.nan_to_num(r["mean_final"], nan=-np.inf), r["point"])
    return sorted(rows, key=key)


def cmd_sweep(args) -> int:
    base, axes = parse_grid(Path(args.grid).read_text())
    env = base.get("env", "digit")
    if env not in ENVS:
        raise ConfigError(f"unknown env {env!r}")
    points = grid_points(base, axes)
    for p in points:
        _point_config(p, 0)     # validate every point before running anything
    out = Path(args.out)
    _guard(out / "sweep.csv", args.force)
    jobs, index = [], []
    for i, p in enumerate(points):
        for s in range(args.runs):
            jobs.append((p, args.seed + s, out / f"point_{i:03d}" / f"seed_{args.seed + s}", args.force))
            index.append(i)
    baseline = args.baseline_reward
    if env == "treasure" and baseline is None:
        bvals = _baseline_values(base)
        for s in range(args.runs):
            jobs.append((bvals, args.seed + s, out / "baseline" / f"seed_{args.seed + s}", args.force))
            index.append(-1)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            outcomes = list(pool.map(_run_point, jobs))
    else:
        outcomes = [_run_point(j) for j in jobs]
    results = [{"point": i, "settings": {k: v for k, v in p.items() if k not in base or base[k] != v},
                "runs": []} for i, p in enumerate(points)]
    base_finals = []
    for i, o in zip(index, outcomes):
        if i < 0:
            if "final_reward" in o:
                base_finals.append(o["final_reward"])
        else:
            results[i]["runs"].append(o)
    if env == "treasure" and baseline is None:
        if not base_finals:
            raise CliError("every no-comm baseline run failed")
        baseline = float(np.mean(base_finals))
    ranked = rank_points(env, results, baseline)
    out.mkdir(parents=True, exist_ok=True)
    fields = ["rank", "point", "settings", "completed", "failed", "mean_final"]
    if env == "treasure":
        fields.append("above_baseline")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for rank, row in enumerate(ranked, 1):
            w.writerow({**row, "rank": rank, "settings": json.dumps(row["settings"], sort_keys=True)})
    summary = {"env": env, "ranking": RANKINGS[env], "baseline": baseline, "points": results,
               "ranked": ranked}
    (out / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    for rank, row in enumerate(ranked, 1):
        extra = f" above_baseline={row['above_baseline']}" if env == "treasure" else ""
        print(f"{rank}. point {row['point']} {json.dumps(row['settings'], sort_keys=True)} "
              f"mean_final={row['mean_final']:.4f}{extra} failed={row['failed']}")
    return 0


# ------------------------------------------------------------------ plot

def _metrics_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if (path / "metrics.jsonl").is_file():
        return [path / "metrics.jsonl"]
    found = sorted(path.rglob("metrics.jsonl"))
    if not found:
        raise FileNotFoundError(f"no metrics.jsonl under {path}")
    return found


def metric_stream(path: Path, key: str) -> np.ndarray:
    rows = read_metrics(path)
    return np.array([r[key] for r in rows if r.get(key) is not None], dtype=np.float64)


def render_svg(series: list[tuple[str, object]], title: str, width: int = 640,
               height: int = 400) -> str:
    """Minimal self-contained SVG of mean curves with CI bands."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pad = 50
    xs = np.concatenate([c.window_end for _, c in series]).astype(float)
    lo = min(float(c.lower.min()) for _, c in series)
    hi = max(float(c.upper.max()) for _, c in series)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1 = 0.0, float(xs.max())

    def sx(x):
        return pad + (x - x0) / max(x1 - x0, 1e-12) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - lo) / (hi - lo) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for v in np.linspace(lo, hi, 5):
        out.append(f'<text x="{pad - 5}" y="{sy(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    out.append(f'<text x="{width - pad}" y="{height - pad + 15}" text-anchor="end" font-size="10">'
               f'{x1:.0f}</text>')
    for i, (label, c) in enumerate(series):
        col = colors[i % len(colors)]
        x = c.window_end.astype(float)
        band = [f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, c.upper)]
        band += [f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x[::-1], c.lower[::-1])]
        out.append(f'<polygon points="{" ".join(band)}" fill="{col}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, c.mean))
        out.append(f'<polyline points="{line}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" font-size="11" '
                   f'fill="{col}">{label} (n={len(c.per_run)})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> int:
    key = METRIC_ALIASES.get(args.kind, args.kind)
    groups = []
    if args.paths:
        groups.append(("runs", args.paths))
    for spec in args.series or []:
        if "=" not in spec:
            raise CliError(f"--series expects LABEL=PATH[,PATH...], got {spec!r}")
        label, paths = spec.split("=", 1)
        groups.append((label, paths.split(",")))
    if not groups:
        raise CliError("plot needs at least one metrics file or run directory")
    series = []
    for label, paths in groups:
        files = [f for p in paths for f in _metrics_files(Path(p))]
        streams = [metric_stream(f, key) for f in files]
        if not any(len(s) for s in streams):
            raise CliError(f"{label}: no values for {key!r}")
        series.append((label, learning_curve([s for s in streams if len(s)], args.windows)))
    out = Path(args.out)
    stem = out / f"{args.kind}"
    _guard(stem.with_suffix(".svg"), args.force)
    out.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "window_end", "mean", "lower", "upper", "runs"])
        for label, c in series:
            for i in range(len(c.mean)):
                w.writerow([label, int(c.window_end[i]), f"{c.mean[i]:.6f}", f"{c.lower[i]:.6f}",
                            f"{c.upper[i]:.6f}", len(c.per_run)])
    stem.with_suffix(".svg").write_text(render_svg(series, key))
    print(f"wrote {stem.with_suffix('.csv')} and {stem.with_suffix('.svg')}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="commbias", description=__doc__.split("\n\n")[0],
                epilog=_key_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text, keys=False):
        sp = sub.add_parser(name, help=help_text, description=help_text,
                            epilog=_key_help() if keys else None,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("fetch-mnist", cmd_fetch_mnist, "download MNIST and verify MD5 checksums")
    sp.add_argument("--out", default="data/mnist")
    sp.add_argument("--mirror", default=MNIST_MIRROR)
    sp.add_argument("--force", action="store_true", help="re-download even if present")

    sp = add("train", cmd_train, "train one run", keys=True)
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--env", choices=ENVS, default="digit", help="preset env when no --config")
    sp.add_argument("--bias", choices=BIASES, default="no-bias", help="preset bias when no --config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    sp.add_argument("--out", help="run directory (default runs/<env>-<bias>-seed<seed>)")
    sp.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
    sp.add_argument("--force", action="store_true", help="overwrite an existing run")
    sp.add_argument("--quiet", action="store_true")

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("run")
    sp.add_argument("--checkpoint", default="final.ecl")
    sp.add_argument("--episodes", type=int, default=100, help="treasure-hunt evaluation episodes")

    sp = add("probe", cmd_probe, "listener and speaker power of a digit-game run")
    sp.add_argument("run")
    sp.add_argument("--checkpoint", default="final.ecl")
    sp.add_argument("--samples", type=int, default=10_000, help="image-mode sample count")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true")

    for name, fn, text in (("analyze", cmd_analyze, "symbol correlation tables"),
                           ("intervene", cmd_intervene, "force the channel to one symbol")):
        sp = add(name, fn, text)
        sp.add_argument("run", nargs="?")
        sp.add_argument("--checkpoint", default="final.ecl")
        sp.add_argument("--scripted", action="store_true",
                        help="use the scripted finder and decoding collector instead of a run")
        sp.add_argument("--episodes", type=int, default=100)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output directory (default: the run directory)")
        sp.add_argument("--force", action="store_true")
        if name == "intervene":
            sp.add_argument("--tunnel", type=int, required=True, choices=range(N_TUNNELS),
                            help="target tunnel index, 0 = leftmost")
            sp.add_argument("--symbol", type=int, help="forced symbol (default: strongest for the tunnel)")

    sp = add("stats", cmd_stats, "Wilson interval for a run proportion")
    sp.add_argument("--successes", type=int, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--confidence", type=float, default=0.95)

    sp = add("sweep", cmd_sweep, "grid sweep with seeded repeats and ranking", keys=True)
    sp.add_argument("--grid", required=True, help="grid file (see parse_grid)")
    sp.add_argument("--runs", type=int, default=5, help="runs per grid point")
    sp.add_argument("--seed", type=int, default=0, help="first seed")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--baseline-reward", type=float,
                    help="treasure no-comm baseline; measured with extra runs when omitted")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")

    sp = add("plot", cmd_plot, "windowed learning curves as CSV and SVG")
    sp.add_argument("paths", nargs="*", help="metrics.jsonl files or run directories")
    sp.add_argument("--series", action="append", metavar="LABEL=PATH[,PATH...]")
    sp.add_argument("--kind", default="reward", help="metric key (reward = mean_episode_reward)")
    sp.add_argument("--windows", type=int, default=100)
    sp.add_argument("--out", default="plots")
    sp.add_argument("--force", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``crowdkce {train,eval,compare,plot,config dump}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .eval import EpisodeLog, MonteCarloResult, ablation_compare, compute_metrics, episode_row, load_value_fn, \
    metrics_text, monte_carlo, rows_to_csv, SeedMismatch
from .plot import PlotError, render_svg
from .training import default_env_factory, train
from .value_net import ValueNetwork, save_params

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(getattr(args, "seed", None), getattr(args, "cases", None), getattr(args, "params", None))


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RuntimeError(f"cannot write to {out}: {exc}") from exc
    return out


def _echo_config(out: Path, cfg: RunConfig) -> None:
    (out / "config.yaml").write_text(cfg.dump())


def cmd_config_dump(args) -> int:
    text = _load_config(args).dump()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args.out)
    _echo_config(out, cfg)
    tcfg = cfg.build_training()
    net = ValueNetwork(cfg.build_value_net(), seed=tcfg.seed)
    factory = default_env_factory(tcfg.n_pedestrians, cfg.build_scenario(), cfg.build_sim())
    log = train(tcfg, net, factory, progress=None if args.quiet else lambda m: print(m, file=sys.stderr, flush=True))
    save_params(out / "params.json", net.params, net.cfg, {"training_seed": tcfg.seed})
    (out / "training.csv").write_text(log.to_csv())
    print(out / "params.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    vn = cfg.value_net
    value_fn = None
    if cfg.experiment.policy == "planner":
        if vn.source == "params" and not vn.params:
            raise UsageError("value_net.source is 'params' but no --params file was given")
        value_fn = load_value_fn(vn.source, vn.params)
    out = _out_dir(args.out)
    _echo_config(out, cfg)
    exp = cfg.build_experiment()
    result = monte_carlo(exp, value_fn, cfg.experiment.workers)
    episodes = out / "episodes"
    episodes.mkdir(exist_ok=True)
    for log in result.logs:
        (episodes / f"{log.seed}.json").write_text(log.to_json())
    _write_metrics(out, exp.name, result)
    sys.stdout.write(metrics_text({exp.name: result.metrics}))
    return EXIT_OK


def _write_metrics(out: Path, name: str, result: MonteCarloResult) -> None:
    row = {"experiment": name, **result.metrics.row()}
    (out / "metrics.csv").write_text(rows_to_csv([row]))
    (out / "metrics.txt").write_text(metrics_text({name: result.metrics}))
    (out / "episodes.csv").write_text(result.table_csv())


def load_run(directory) -> MonteCarloResult:
    """Rebuild a Monte Carlo result from the episode logs an ``eval`` run wrote."""
    files = sorted(Path(directory, "episodes").glob("*.json"))
    if not files:
        raise RuntimeError(f"no episode logs under {directory}")
    logs = sorted((EpisodeLog.load(f) for f in files), key=lambda l: l.seed)
    return MonteCarloResult(compute_metrics(logs), [episode_row(l) for l in logs], logs)


def cmd_compare(args) -> int:
    a, b = load_run(args.run_a), load_run(args.run_b)
    report = ablation_compare(a, b)
    out = _out_dir(args.out)
    if args.config:
        _echo_config(out, _load_config(args))
    (out / "comparison.csv").write_text(report.to_csv())
    (out / "summary.json").write_text(json.dumps(report.summary, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(metrics_text({"A": a.metrics, "B": b.metrics}))
    ma = report.summary["max_acc"]
    print(f"max_acc paired deltas: {ma['negative']} lower, {ma['zero']} equal, {ma['positive']} higher; "
          f"aggregate change {report.summary['aggregate_mean_max_acc']['relative']:+.1%}")
    return EXIT_OK


def cmd_plot(args) -> int:
    try:
        log = json.loads(Path(args.episode).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RuntimeError(f"cannot read episode log {args.episode}: {exc}") from exc
    svg = render_svg(log)
    out = Path(args.out) if args.out else Path(args.episode).with_suffix(".svg")
    out.write_text(svg)
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crowdkce", description="Crowd navigation planning toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=True, cases=False, params=False, out_required=True):
        sp.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="training seed and evaluation base seed")
        if cases:
            sp.add_argument("--cases", type=int, help="number of evaluation episodes")
        if params:
            sp.add_argument("--params", help="value-network parameter file")
        sp.add_argument("--out", required=out_required, help="output location")

    t = sub.add_parser("train", help="train a value network")
    common(t)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run a Monte Carlo evaluation")
    common(e, cases=True, params=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="paired per-seed comparison of two eval runs")
    c.add_argument("run_a")
    c.add_argument("run_b")
    common(c, seed=False)
    c.set_defaults(func=cmd_compare)

    pl = sub.add_parser("plot", help="render an episode log as SVG")
    pl.add_argument("episode")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)

    cfg = sub.add_parser("config", help="configuration utilities")
    csub = cfg.add_subparsers(dest="action", parser_class=_Parser)
    csub.required = True
    d = csub.add_parser("dump", help="print the effective configuration")
    common(d, cases=True, params=True, out_required=False)
    d.set_defaults(func=cmd_config_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"crowdkce: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ValueError, OSError, PlotError, SeedMismatch) as exc:
        print(f"crowdkce: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Desk-scale versions of the three experiments, written under results/.

  ablation      KCE on vs off, multimodal sampler m=20, replanning every step
  multimodality open-loop-8 success for m in {1, 5, 20}
  baseline      ORCA-driven vehicle vs the trained planner

Every run uses the held-out evaluation seeds (base seed 10000).
"""

import argparse
import json
import sys
import time
from pathlib import Path

from crowdkce.eval import ExperimentConfig, ablation_compare, metrics_text, monte_carlo
from crowdkce.planner import PlannerConfig
from crowdkce.predictors import PredictorSpec
from crowdkce.value_net import ValueNetwork

ROOT = Path(__file__).resolve().parents[1]


def planner_exp(name, cases, m=20, kce=True, mode="replan"):
    return ExperimentConfig(n_pedestrians=5, num_cases=cases, mode=mode, name=name,
                            predictor=PredictorSpec(kind="multimodal", num_samples=m), planner=PlannerConfig(kce=kce))


def save(out: Path, results: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(metrics_text({k: r.metrics for k, r in results.items()}))
    for name, r in results.items():
        (out / f"{name}.csv").write_text(r.table_csv())
    print((out / "metrics.txt").read_text())


def ablation(net, cases, out):
    off = monte_carlo(planner_exp("kce-off", cases, kce=False), net)
    on = monte_carlo(planner_exp("kce-on", cases), net)
    save(out, {"kce-off": off, "kce-on": on})
    rep = ablation_compare(off, on)
    (out / "comparison.csv").write_text(rep.to_csv())
    (out / "summary.json").write_text(json.dumps(rep.summary, indent=2, sort_keys=True) + "\n")
    s = rep.summary["max_acc"]
    print(f"max_acc lower with KCE on {s['negative']}/{s['pairs']} seeds, "
          f"aggregate {rep.summary['aggregate_mean_max_acc']['relative']:+.1%}")


def multimodality(net, cases, out):
    save(out, {f"m{m}": monte_carlo(planner_exp(f"m{m}", cases, m=m, mode="open-loop-8"), net) for m in (1, 5, 20)})


def baseline(net, cases, out):
    orca = monte_carlo(ExperimentConfig(n_pedestrians=5, num_cases=cases, policy="orca", name="orca"))
    trained = monte_carlo(planner_exp("trained", cases), net)
    save(out, {"orca": orca, "trained": trained})


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("experiment", choices=("ablation", "multimodality", "baseline", "all"))
    p.add_argument("--params", default=str(ROOT / "artifacts" / "valuenet.json"))
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--out", default=str(ROOT / "results"))
    args = p.parse_args(argv)
    net = ValueNetwork.load(args.params)
    names = ("ablation", "multimodality", "baseline") if args.experiment == "all" else (args.experiment,)
    for name in names:
        t0 = time.perf_counter()
        globals()[name](net, args.cases, Path(args.out) / name)
        print(f"{name}: {time.perf_counter() - t0:.0f}s\n", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Train the value network used by the acceptance checks and write artifacts/valuenet.json.

Runs imitation on ORCA demonstrations followed by TD learning. Pass --init to
skip imitation and continue TD learning from an existing parameter file.
"""

import argparse
import sys
import time
from pathlib import Path

from crowdkce.training import TrainingConfig, TrainingLog, default_env_factory, train, train_rl
from crowdkce.value_net import ValueNetConfig, ValueNetwork, save_params

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=str(ROOT / "artifacts" / "valuenet.json"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--il-episodes", type=int, default=TrainingConfig.il_episodes)
    p.add_argument("--il-epochs", type=int, default=TrainingConfig.il_epochs)
    p.add_argument("--rl-episodes", type=int, default=TrainingConfig.rl_episodes)
    p.add_argument("--train-batches", type=int, default=TrainingConfig.train_batches)
    p.add_argument("--val-interval", type=int, default=TrainingConfig.val_interval)
    p.add_argument("--val-cases", type=int, default=TrainingConfig.val_cases)
    p.add_argument("--eps-decay", type=int, default=TrainingConfig.eps_decay)
    p.add_argument("--init", help="start TD learning from this parameter file, skipping imitation")
    args = p.parse_args(argv)

    cfg = TrainingConfig(seed=args.seed, il_episodes=args.il_episodes, il_epochs=args.il_epochs,
                         rl_episodes=args.rl_episodes, train_batches=args.train_batches,
                         val_interval=args.val_interval, val_cases=args.val_cases, eps_decay=args.eps_decay)
    t0 = time.perf_counter()

    def progress(msg):
        print(f"[{time.perf_counter() - t0:7.0f}s] {msg}", flush=True)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt = out.with_name(out.stem + "_checkpoint.json")

    def checkpoint(tag, net):
        save_params(ckpt, net.params, net.cfg, {"training_seed": cfg.seed, "stage": tag})
        progress(f"checkpoint {tag} -> {ckpt.name}")

    if args.init:
        net = ValueNetwork.load(args.init)
        log = train_rl(default_env_factory(cfg.n_pedestrians), cfg.rl_episodes, net, cfg, log=TrainingLog(),
                       progress=progress, checkpoint=checkpoint)
    else:
        net = ValueNetwork(ValueNetConfig(), seed=cfg.seed)
        log = train(cfg, net, progress=progress, checkpoint=checkpoint)
    save_params(out, net.params, net.cfg, {"training_seed": cfg.seed, "il_episodes": cfg.il_episodes,
                                           "rl_episodes": cfg.rl_episodes, "init": args.init})
    out.with_name(out.stem + "_training.csv").write_text(log.to_csv())
    progress(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

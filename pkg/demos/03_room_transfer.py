"""Train TempoRL on ``room`` and watch the mixing weight hand control to the policy.

Lambda starts near 0.95, so early on most actions come from the prior. As the
critic learns that the policy's actions are worth more, the mixing network
pushes lambda down. The script prints the learning curve and the probe-mean
lambda at the start and end of training.

    python3 demos/03_room_transfer.py --epochs 10 --steps 2000
"""

import argparse

from temporl import harness


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--steps", type=int, default=2000, help="environment steps per epoch")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="demo_out")
    args = parser.parse_args()

    out = harness.output_root(args.out)
    base = harness.build_config("desk", overrides={"seeds": [args.seed]})
    dataset = harness.run_collect(base, out / "dataset.csv")
    ckpt, _ = harness.run_train_prior(base, dataset, out)

    cfg = harness.with_overrides(base, mode="temporl", layout="room", prior=str(ckpt),
                                 epochs=args.epochs, steps_per_epoch=args.steps)
    (record,) = harness.run_train_agents(cfg, out)
    print(f"{'step':>7} {'success':>8} {'lambda':>7} {'prior share':>11}")
    for row in record["curve"]:
        print(f"{row['env_step']:>7} {row['success_rate']:>8.2f} {row['mean_lambda']:>7.3f} "
              f"{row['prior_fraction']:>11.2f}")

    trace = harness.read_csv(out / f"lambda_temporl_room_seed{args.seed}.csv")
    steps = [(int(r["env_step"]), float(r["mean_lambda"])) for r in trace]
    first, last = harness.lambda_trend(steps, record["env_steps"])
    print(f"probe-mean lambda: first 10% {first:.3f}, final 10% {last:.3f}")


if __name__ == "__main__":
    main()

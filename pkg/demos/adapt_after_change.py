"""Perturb the world after learning and watch online relearning recover, one sample at a time."""

import argparse

from genservo import experiments as E
from genservo import learning as L
from genservo import simulator as sim


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--perturb", choices=E.PERTURBATIONS, default="move-camera")
    parser.add_argument("--samples", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    world = sim.make_world("ur5_sim")
    res = L.learn_pipeline(sim.collect_random(world, 50, seed=0), L.WorldHints.from_world(world))
    curve = E.adapt_curve(res.model, world, args.perturb, samples=args.samples, seed=args.seed, train_rms_px=res.train_rms_px)
    print("samples  held-out px  flagged")
    for row in curve.rows:
        print(f"{row['samples_seen']:7d}  {row['heldout_rms_px']:11.3f}  {row['flagged']}")


if __name__ == "__main__":
    main()

"""Collect a random walk on the simulated UR5, learn a model, score it on held-out poses."""

import argparse

from genservo import experiments as E
from genservo import learning as L
from genservo import simulator as sim


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--world", default="ur5_sim")
    parser.add_argument("--samples", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    world = sim.make_world(args.world)
    data = sim.collect_random(world, args.samples, seed=args.seed)
    held = E.heldout_set(world, args.seed)
    hints = L.WorldHints.from_world(world)
    for variant in L.VARIANTS:
        res = L.learn_pipeline(data, hints, L.LearnConfig.for_variant(variant, seed=args.seed))
        print(f"{variant}: train {res.train_rms_px:.3f} px, held-out {L.rms_px(res.model, held):.3f} px")
        for rep in res.reports:
            print(f"  {rep.stage}: {rep.initial_objective:.4g} -> {rep.final_objective:.4g} in {rep.iterations} iterations")


if __name__ == "__main__":
    main()

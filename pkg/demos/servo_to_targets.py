"""Learn a model, then drive the simulated arm to a few images rendered at random poses."""

import argparse

import numpy as np

from genservo import experiments as E
from genservo import learning as L
from genservo import simulator as sim


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--world", default="ur5_sim")
    parser.add_argument("--targets", type=int, default=5)
    parser.add_argument("--gain", type=float, default=0.7)
    parser.add_argument("--pure-image", action="store_true", help="ignore the encoders during servoing")
    args = parser.parse_args()

    world = sim.make_world(args.world)
    model = L.learn_pipeline(sim.collect_random(world, 50, seed=0), L.WorldHints.from_world(world)).model
    summary = E.run_servo(model, world, targets=args.targets, gain=args.gain, use_encoders=not args.pure_image)
    for k, trace in enumerate(summary.traces):
        print(f"target {k}: {trace.initial_rms_px:7.2f} px -> {trace.final_rms_px:.3f} px in {trace.steps} steps")
    print(f"mean final error {summary.mean_final_px:.3f} px (noise-free {summary.mean_final_true_px:.3f} px)")
    print(f"median steps {np.median(summary.steps):.0f}")


if __name__ == "__main__":
    main()

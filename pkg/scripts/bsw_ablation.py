"""Compare the masked channel covariance reached with and without the decorrelation term."""

import argparse

from memderain.toy import ToyProfile, run_toy, toy_configs, toy_data


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=ToyProfile.steps)
    ap.add_argument("--lambda-w", type=float, default=0.01)
    args = ap.parse_args()

    profile = ToyProfile(steps=args.steps)
    scenes, _ = toy_data(profile)
    for lw in (args.lambda_w, 0.0):
        run = run_toy(scenes, *toy_configs(profile, lambda_w=lw))
        print(f"lambda_w={lw}: mean masked |cov| over final 10 steps {run.mean_loss_w(10):.4e} ({run.seconds:.0f}s)")


if __name__ == "__main__":
    main()

"""Train the desk profile with and without the memory bank and score both on held-out scenes."""

import argparse
from pathlib import Path

from memderain.toy import ToyProfile, heldout_scores, run_toy, toy_configs, toy_data


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("toy_runs"))
    ap.add_argument("--steps", type=int, default=ToyProfile.steps)
    ap.add_argument("--log-every", type=int, default=50)
    args = ap.parse_args()

    profile = ToyProfile(steps=args.steps)
    scenes, heldout = toy_data(profile)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, use_memory in (("memory", True), ("zero_memory", False)):
        print(f"== {name}")
        run = run_toy(scenes, *toy_configs(profile, use_memory=use_memory),
                      metrics_path=args.out / f"{name}.csv", log_every=args.log_every)
        s = heldout_scores(run, heldout)
        n = min(10, len(run.reports))
        ratio = run.mean_total(len(run.reports) - n + 1, len(run.reports)) / run.mean_total(1, n)
        print(f"{name}: {run.seconds:.0f}s, loss ratio {ratio:.3f}, held-out PSNR {s['psnr_db']:.2f} dB "
              f"(input {s['input_psnr_db']:.2f}), SSIM {s['ssim']:.4f} (input {s['input_ssim']:.4f})")


if __name__ == "__main__":
    main()

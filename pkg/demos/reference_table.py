"""Drive the bundled reference scenario and print the RMSE table by distance.

    python3 demos/reference_table.py [--seconds 30]
"""
import argparse

from lanefusion.evaluation import DISTANCES, run_pipeline
from lanefusion.io import load_bundled
from lanefusion.pipeline import LanePipeline
from lanefusion.simulator import generate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seconds", type=float, help="shorten the drive")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    cfg = load_bundled("reference")
    if args.seconds:
        cfg.duration = args.seconds
    if args.seed is not None:
        cfg.seed = args.seed
    truth, frames = generate(cfg)
    res = run_pipeline(frames, LanePipeline(), truth)
    print(f"{len(frames)} frames, median {res.runtime.summary()['median_ms']:.1f} ms per frame")
    print(f"{'x [m]':>6} {'ego':>7} {'adjacent':>9}")
    for x, e, a in zip(DISTANCES, res.table.rmse("ego"), res.table.rmse("adjacent")):
        print(f"{x:6.0f} {e:7.3f} {a:9.3f}")


if __name__ == "__main__":
    main()

"""Compare ego-lane accuracy with and without a 500 m marking dropout.

The object driving ahead keeps the hidden boundary alive; the dropout
should cost accuracy but never the track.
"""
from lanefusion.evaluation import DISTANCES, run_pipeline
from lanefusion.io import load_bundled
from lanefusion.pipeline import LanePipeline
from lanefusion.simulator import generate


def run(dropouts: bool):
    cfg = load_bundled("hidden_marking")
    if not dropouts:
        cfg.dropouts = []
    truth, frames = generate(cfg)
    return run_pipeline(frames, LanePipeline(), truth)


def main():
    hidden, clear = run(True), run(False)
    print(f"track loss frames with dropout: {hidden.track_loss_frames or 'none'}")
    print(f"{'x [m]':>6} {'dropout':>8} {'clear':>7}")
    for x, a, b in zip(DISTANCES, hidden.table.rmse("ego"), clear.table.rmse("ego")):
        print(f"{x:6.0f} {a:8.3f} {b:7.3f}")


if __name__ == "__main__":
    main()

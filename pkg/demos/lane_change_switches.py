"""Watch the smoothing switches of an object that changes lanes.

Prints, per time step, the switch values of object 1 (left/right side).
Values near 1 keep the trajectory smoothing active; a dip marks the
step where the optimizer cut the chain during the maneuver.
"""
from lanefusion.io import load_bundled
from lanefusion.pipeline import LanePipeline
from lanefusion.simulator import generate, object_lane_change_windows


def main():
    cfg = load_bundled("lane_change")
    _, frames = generate(cfg)
    pipe = LanePipeline()
    for f in frames:
        pipe.process(f)
    windows = object_lane_change_windows(cfg).get(1, [])
    rows = {}
    for r in pipe.graph.retire_all_switches():
        if r.object_id == 1:
            rows.setdefault(r.step, {})[r.side] = r.value
    for step in sorted(rows):
        t = step / cfg.frame_rate
        mark = "*" if any(a <= t <= b for a, b in windows) else " "
        vals = rows[step]
        print(f"{t:5.1f} s {mark}  left {vals.get('left', float('nan')):.2f}  right {vals.get('right', float('nan')):.2f}")
    print("* = inside the lane-change window")


if __name__ == "__main__":
    main()

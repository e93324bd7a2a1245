"""Train the toy network on translating textured disks, compare it with a
single-frame baseline, and dump the motion fields of one test snippet.

    python3 demos/toy_motion.py --epochs 30 --out /tmp/toy_motion

Thirty epochs take several minutes on one core; --epochs 8 is usually
enough to see the gap open up.
"""

import argparse
from pathlib import Path

import numpy as np

from lcdc.metrics import frame_accuracy
from lcdc.motion import export_motion
from lcdc.network import NetConfig, frame_offsets
from lcdc.synthdata import SnippetConfig, generate_snippet
from lcdc.train import OptimizerConfig, load_toy_data, train_toy

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=8)
ap.add_argument("--out", default="toy_motion_out")
args = ap.parse_args()
out = Path(args.out)

snippet = SnippetConfig()
data = load_toy_data(snippet)
opt = OptimizerConfig(epochs=args.epochs)
log = lambda line: print("  " + line)  # noqa: E731

print("lcdc network")
net = train_toy(NetConfig(), snippet, opt, data=data, out=out / "lcdc", log=log)
print("appearance baseline (one frame per snippet)")
app = train_toy(NetConfig(variant="appearance"), snippet, opt, data=data, out=out / "appearance", log=log)

print(f"test accuracy: lcdc {frame_accuracy(net.test_pred, net.test_y):.1f}%, appearance {frame_accuracy(app.test_pred, app.test_y):.1f}%")

# motion of a fresh rightward snippet, per deformable layer
clip = generate_snippet("right", 2024, snippet).frames
offsets = frame_offsets(clip, net.params, NetConfig())
layers = [[o[t] for t in range(len(clip))] for o in offsets]
export_motion(out / "motion", layers, suppress=0.05)
mean_motion = np.mean([o[t] - o[t - 1] for o in offsets for t in range(1, len(clip))], axis=(0, 1, 2))
print(f"mean learned motion (dy, dx) over layers and frames: {mean_motion.round(3)}")
print(f"energy maps and color-coded motion written to {out / 'motion'}")

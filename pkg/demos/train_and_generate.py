"""
Train the toy model and place colored blobs
===========================================

The toy denoiser learns single colored rectangles on a mid-gray canvas.  At
sampling time several subjects are placed at once through the layout.
Training the default model takes a few minutes on one core.
"""

import numpy as np

from layoutfuse.ablation import score_image
from layoutfuse.diffusion import sample, train_toy

assets = train_toy(seed=0)
print("held-out loss: %.3f -> %.3f" % assets.holdout_loss)

layout = [("red", (0.0, 0.0, 0.5, 0.5), 0), ("blue", (0.5, 0.5, 1.0, 1.0), 0)]


def show(image):
    # One letter per pixel: the nearest palette color, '.' for background.
    names = ["."] + [n[0] for n in assets.palette]
    colors = np.array([(0.0, 0.0, 0.0)] + [assets.color(n) for n in assets.palette])
    idx = np.linalg.norm(image[:, :, None] - colors, axis=-1).argmin(axis=-1)
    print("\n".join("".join(names[i] for i in row) for row in idx))


for mode in ("anyms", "masked-sum", "global-sum"):
    result = sample(assets.layout_spec(layout, seed=1, mode=mode), assets.model, assets.schedule)
    print(f"\n{mode}: mIoU {score_image(result.image, layout).miou:.2f}")
    show(result.image)

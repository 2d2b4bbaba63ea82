"""Regenerates the MS-SSIM reference fixtures with TensorFlow's ssim_multiscale.

Run from the repository root:  python3 tools/ms_ssim_fixtures.py
"""
import json
import os

import numpy as np
import tensorflow as tf
from PIL import Image
from scipy.ndimage import gaussian_filter, shift

OUT = "crates/core/tests/fixtures/ms_ssim"
SIZE = 176
rng = np.random.default_rng(20240611)


def smooth_rgb(sigma):
    img = np.stack([gaussian_filter(rng.normal(size=(SIZE, SIZE)), sigma) for _ in range(3)], -1)
    img = (img - img.min()) / (img.max() - img.min())
    return img * 255.0


def to_u8(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def luma(u8):
    f = u8.astype(np.float64)
    return 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]


pairs = []
for i in range(10):
    base = smooth_rgb(2.0 + i * 0.7)
    kind = i % 5
    if kind == 0:
        other = base + rng.normal(scale=4.0 + 3 * i, size=base.shape)
    elif kind == 1:
        other = np.stack([gaussian_filter(base[..., c], 1.5 + 0.2 * i) for c in range(3)], -1)
    elif kind == 2:
        other = np.stack([shift(base[..., c], (1.0 + 0.3 * i, -1.5), mode="nearest") for c in range(3)], -1)
    elif kind == 3:
        other = base * 0.8 + 30.0 + rng.normal(scale=2.0, size=base.shape)
    else:
        other = 0.5 * base + 0.5 * smooth_rgb(3.0)
    a, b = to_u8(base), to_u8(other)
    pairs.append((a, b))

os.makedirs(OUT, exist_ok=True)
records = []
for i, (a, b) in enumerate(pairs):
    Image.fromarray(a, "RGB").save(f"{OUT}/pair{i:02}_a.png")
    Image.fromarray(b, "RGB").save(f"{OUT}/pair{i:02}_b.png")
    la = tf.constant(luma(a)[None, :, :, None], dtype=tf.float64)
    lb = tf.constant(luma(b)[None, :, :, None], dtype=tf.float64)
    value = float(tf.image.ssim_multiscale(la, lb, 255.0, filter_size=11, filter_sigma=1.5, k1=0.01, k2=0.03).numpy()[0])
    records.append({"a": f"pair{i:02}_a.png", "b": f"pair{i:02}_b.png", "ms_ssim": value})
    print(i, value)

with open(f"{OUT}/reference.json", "w") as fh:
    json.dump({"oracle": f"tensorflow {tf.__version__} tf.image.ssim_multiscale on BT.601 luma, max_val=255", "pairs": records}, fh, indent=2)
    fh.write("\n")

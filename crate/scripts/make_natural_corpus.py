"""Cut 64x64 grayscale crops from the scikit-image sample photographs and
write them as 16-bit binary PGM files. Used as the pretraining corpus."""

import argparse
import pathlib

import numpy as np
from skimage import color, data, transform

SOURCES = [
    "astronaut", "camera", "coffee", "chelsea", "coins", "moon", "page",
    "rocket", "text", "brick", "grass", "gravel", "hubble_deep_field",
    "immunohistochemistry", "retina", "clock", "logo", "stereo_motorcycle",
]


def gray(name):
    img = getattr(data, name)()
    if isinstance(img, tuple):
        img = img[0]
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = color.rgb2gray(img[..., :3] / img.max())
    img -= img.min()
    return img / max(img.max(), 1e-12)


def write_pgm(path, img):
    q = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    h, w = q.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + q.tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=pathlib.Path, required=True)
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    images = [gray(n) for n in SOURCES]
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        img = images[i % len(images)]
        # random crop of 1x to 4x the output size, then downsample
        side = int(rng.integers(args.size, 4 * args.size + 1))
        side = min(side, *img.shape)
        y = int(rng.integers(0, img.shape[0] - side + 1))
        x = int(rng.integers(0, img.shape[1] - side + 1))
        crop = img[y:y + side, x:x + side]
        crop = transform.resize(crop, (args.size, args.size), anti_aliasing=True)
        write_pgm(args.out / f"natural_{i:04d}.pgm", crop)


if __name__ == "__main__":
    main()

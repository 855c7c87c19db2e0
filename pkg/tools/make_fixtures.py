"""Regenerate the PNG fixtures in tests/data from scikit-image's sample photos."""

from pathlib import Path

import numpy as np
from PIL import Image
from skimage import data

OUT = Path(__file__).resolve().parents[1] / "tests" / "data"

CROPS = {
    "astronaut_face": ("astronaut", 40, 160, 2),   # (source, top, left, downsample)
    "chelsea": ("chelsea", 20, 120, 2),
    "coffee": ("coffee", 60, 140, 2),
    "rocket": ("rocket", 100, 200, 2),
    "camera": ("camera", 40, 150, 2),
}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, (src, top, left, step) in CROPS.items():
        img = getattr(data, src)()
        crop = img[top:top + 128 * step:step, left:left + 128 * step:step]
        if crop.ndim == 2:
            crop = np.stack([crop] * 3, axis=-1)
        Image.fromarray(np.ascontiguousarray(crop[..., :3])).save(OUT / f"{name}.png")
        print(name, crop.shape, crop.mean() / 255)


if __name__ == "__main__":
    main()

"""Builds the small desk-scale image corpus under data/.

Sources are the public-domain / CC0 sample images shipped with
scikit-image (astronaut, coffee, rocket, chelsea, hubble_deep_field).

  data/train/    left 60% of astronaut, coffee, rocket (downscaled to 75%)
  data/heldout/  20 crops of 128x128: right edge of the training sources,
                 chelsea, and the Hubble deep field
"""
import os

import skimage
from PIL import Image

SRC = os.path.join(os.path.dirname(skimage.__file__), "data")
OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "data")
CROP = 128


def load(name, scale):
    im = Image.open(os.path.join(SRC, name)).convert("RGB")
    w, h = im.size
    return im.resize((round(w * scale), round(h * scale)), Image.LANCZOS)


def grid(im, xs, ys):
    return [im.crop((x, y, x + CROP, y + CROP)) for y in ys for x in xs]


def main():
    train_dir = os.path.join(OUT, "train")
    held_dir = os.path.join(OUT, "heldout")
    os.makedirs(train_dir, exist_ok=True)
    os.makedirs(held_dir, exist_ok=True)
    held = []
    for name in ("astronaut.png", "coffee.png", "rocket.jpg"):
        im = load(name, 0.75)
        w, h = im.size
        split = int(w * 0.6)
        stem = os.path.splitext(name)[0]
        im.crop((0, 0, split, h)).save(os.path.join(train_dir, f"{stem}.png"))
        for k, c in enumerate(grid(im, [w - CROP], [0, h - CROP])):
            held.append((f"{stem}_{k}", c))
    chelsea = load("chelsea.png", 1.0)
    for k, c in enumerate(grid(chelsea, [0, 161, 323], [0, 172])):
        held.append((f"chelsea_{k}", c))
    hubble = load("hubble_deep_field.jpg", 0.5)
    for k, c in enumerate(grid(hubble, [0, 124, 248, 372], [40, 290])):
        held.append((f"hubble_{k}", c))
    assert len(held) == 20, len(held)
    for i, (stem, im) in enumerate(held):
        assert im.size == (CROP, CROP), (stem, im.size)
        im.save(os.path.join(held_dir, f"{i:02d}_{stem}.png"))


if __name__ == "__main__":
    main()

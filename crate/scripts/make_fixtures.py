"""Regenerate the grayscale PNG fixtures under crates/dsmm/tests/data from
scikit-image's bundled sample images (public domain / CC0 sources)."""
import os
import numpy as np
from skimage import data, color, transform, io, img_as_ubyte

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "dsmm", "tests", "data")

def gray(img):
    if img.ndim == 3:
        img = color.rgb2gray(img[..., :3])
    return img.astype(np.float64) / (255.0 if img.max() > 1.0 else 1.0)

def crop(name, img, top, left, size, scale, split):
    g = gray(img)
    if scale != 1.0:
        g = transform.rescale(g, scale, anti_aliasing=True)
    patch = g[top:top + size, left:left + size]
    assert patch.shape == (size, size), (name, patch.shape)
    io.imsave(os.path.join(OUT, split, name + ".png"), img_as_ubyte(np.clip(patch, 0, 1)), check_contrast=False)

TRAIN = [
    ("camera_a", data.camera(), 40, 100, 128, 0.5),
    ("camera_b", data.camera(), 120, 0, 128, 0.5),
    ("astronaut_a", data.astronaut(), 20, 60, 128, 0.5),
    ("astronaut_b", data.astronaut(), 120, 100, 128, 0.5),
    ("coffee", data.coffee(), 40, 80, 128, 0.5),
    ("coins", data.coins(), 10, 20, 128, 0.5),
    ("moon", data.moon(), 60, 60, 128, 0.5),
    ("rocket", data.rocket(), 20, 120, 128, 0.5),
    ("brick", data.brick(), 0, 0, 128, 0.5),
    ("grass", data.grass(), 0, 0, 128, 0.5),
    ("gravel", data.gravel(), 0, 0, 128, 0.5),
    ("motorcycle", data.stereo_motorcycle()[0], 60, 100, 128, 0.5),
    ("ihc", data.immunohistochemistry(), 50, 50, 128, 0.5),
]
HELDOUT = [
    ("chelsea", data.chelsea(), 10, 40, 96, 0.5),
    ("motorcycle_right", data.stereo_motorcycle()[1], 80, 150, 96, 0.5),
    ("cell", data.cell(), 100, 100, 96, 0.5),
    ("retina", data.retina(), 150, 150, 96, 0.25),
    ("hubble", data.hubble_deep_field(), 40, 80, 96, 0.25),
    ("clock", data.clock(), 10, 20, 96, 0.5),
]

for split, items in (("train", TRAIN), ("heldout", HELDOUT)):
    for name, img, top, left, size, scale in items:
        crop(name, img, top, left, size, scale, split)
print("ok")

import json

import numpy as np
import pytest

from util.sample import Sample
from utils.helpers import save_image, save_mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_sample():
    def make(h=16, w=16, num_classes=3, seed=0):
        r = np.random.default_rng(seed)
        mask = r.integers(0, num_classes, size=(h, w)).astype(np.int64)
        return Sample(r.random((3, h, w)).astype(np.float32), mask, {"id": seed})
    return make


@pytest.fixture
def write_masks():
    """Writes {name: mask} as PNGs under a directory and returns the directory."""
    def write(directory, masks: dict):
        directory.mkdir(parents=True, exist_ok=True)
        for name, mask in masks.items():
            save_mask(str(directory / name), np.asarray(mask))
        return directory
    return write


@pytest.fixture
def write_dataset(tmp_path):
    """A JSONL dataset of random image/mask PNGs; returns the manifest path."""
    def write(count=12, size=(8, 8), num_classes=3, seed=0):
        r = np.random.default_rng(seed)
        root = tmp_path / "dataset"
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(exist_ok=True)
        lines = []
        for i in range(count):
            sid = f"s{i:03d}"
            mask = r.integers(0, num_classes, size=size)
            mask.reshape(-1)[0] = i % num_classes
            save_image(str(root / "images" / f"{sid}.png"), r.random((3, *size)))
            save_mask(str(root / "masks" / f"{sid}.png"), mask)
            lines.append(json.dumps({"id": sid, "image": f"images/{sid}.png", "mask": f"masks/{sid}.png"}))
        manifest = root / "dataset.jsonl"
        manifest.write_text("\n".join(lines) + "\n")
        return manifest
    return write

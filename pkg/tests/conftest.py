from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tsrkit.dataset_io import Image, write_ppm  # noqa: E402
from tsrkit.nn.spec import parse_network_spec  # noqa: E402
from tsrkit.nn.weights import ConvWeights, WeightStore, write_weights  # noqa: E402

DATA = Path(__file__).parent / "data"

# 64x64 input, four 2x2 pools -> 4x4 grid of 16-pixel cells, one anchor, four classes.
PLANTED_CFG = """\
[net]
width=64
height=64
channels=3

[maxpool]
size=2
stride=2

[maxpool]
size=2
stride=2

[maxpool]
size=2
stride=2

[maxpool]
size=2
stride=2

[convolutional]
filters=9
size=1
stride=1
pad=0
activation=linear

[region]
anchors=1,1
classes=4
num=1
"""


def planted_weights(class_code: int) -> WeightStore:
    """A detector that fires only on white cells: objectness and one class logit
    respond to brightness, box offsets are zero."""
    w = np.zeros((9, 3, 1, 1), np.float32)
    b = np.zeros(9, np.float32)
    w[4, :, 0, 0] = 10.0
    b[4] = -15.0
    w[5 + class_code, :, 0, 0] = 10.0
    store = WeightStore()
    store.layers[4] = ConvWeights(w, b)
    return store


@dataclass
class PlantedFixture:
    root: Path
    cfg: Path
    weights: Path
    images: Path
    gt: Path
    boxes: list


def make_planted_fixture(root: Path, n_images: int = 5, class_code: int = 2,
                         raw_class: int = 11) -> PlantedFixture:
    spec = parse_network_spec(PLANTED_CFG)
    cfg = root / "planted.cfg"
    cfg.write_text(PLANTED_CFG)
    weights = root / "planted.weights"
    write_weights(weights, planted_weights(class_code), spec)
    images = root / "frames"
    images.mkdir()
    lines, boxes = [], []
    for i in range(n_images):
        px = np.zeros((64, 64, 3), np.uint8)
        # the sign sits on grid cell (col 1, row 2)
        px[32:48, 16:32] = 255
        name = f"{i:05d}.ppm"
        write_ppm(images / name, Image.from_array(px))
        lines.append(f"{name};16;32;32;48;{raw_class}")
        boxes.append((16, 32, 32, 48))
    gt = root / "gt.txt"
    gt.write_text("\n".join(lines) + "\n")
    return PlantedFixture(root, cfg, weights, images, gt, boxes)


@pytest.fixture
def planted(tmp_path) -> PlantedFixture:
    return make_planted_fixture(tmp_path)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, status, title, detail in sorted(RESULTS):
        terminalreporter.write_line(f"{status} [{num:2d}] {title}" + (f" ({detail})" if detail else ""))

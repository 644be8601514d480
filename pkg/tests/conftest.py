import numpy as np
import pytest

from roomforge.scene import ProxyRoom, RoomShell, SemanticBox, SemanticPalette

BASE_PALETTE = (
    (1, "wall", (200, 200, 200)),
    (2, "floor", (120, 90, 60)),
    (3, "ceiling", (230, 230, 230)),
    (4, "bed", (60, 90, 200)),
    (5, "table", (170, 120, 40)),
    (6, "lamp", (240, 220, 90)),
    (7, "sofa", (90, 170, 90)),
    (8, "rug", (150, 40, 40)),
)


def make_palette():
    return SemanticPalette(BASE_PALETTE)


def _room(boxes=(), size=(4.0, 4.0), height=3.0, prompt="a cozy bedroom"):
    w, d = size
    shell = RoomShell(
        floor_polygon=((-w / 2, -d / 2), (w / 2, -d / 2), (w / 2, d / 2), (-w / 2, d / 2)),
        height=height,
    )
    return ProxyRoom(shell=shell, boxes=tuple(boxes), palette=make_palette(),
                     style_prompt=prompt)


@pytest.fixture
def empty_room():
    return _room()


@pytest.fixture
def one_box_room():
    box = SemanticBox(instance_id=1, class_id=4, center=(0.0, 1.5, 3.0), size=(1.0, 1.0, 1.0))
    return _room([box], size=(8.0, 8.0), height=3.0)


def standard_room():
    """The 5-box test room used by completion and pipeline tests."""
    boxes = [
        SemanticBox(1, 4, center=(-1.3, 0.35, -0.9), size=(1.9, 0.7, 1.4)),   # bed
        SemanticBox(2, 5, center=(1.6, 0.45, 1.2), size=(0.9, 0.9, 0.7)),     # table
        SemanticBox(3, 6, center=(1.7, 1.0, -1.4), size=(0.35, 2.0, 0.35)),   # lamp
        SemanticBox(4, 7, center=(-0.2, 0.4, 1.55), size=(1.7, 0.8, 0.8)),    # sofa
        SemanticBox(5, 8, center=(0.4, 0.03, -0.2), size=(1.4, 0.06, 1.0)),   # rug
    ]
    return _room(boxes, size=(5.0, 4.2), height=2.8, prompt="a scandinavian bedroom")


@pytest.fixture
def five_box_room():
    return standard_room()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

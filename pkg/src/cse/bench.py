"""Fixed-seed synthetic benchmark splits shared by scripts, CLI defaults and acceptance tests."""
from __future__ import annotations

from .synth import gen_dataset

TRAIN_SEED = 1000
TEST_SEED = 2000
TOUCH_SEED = 3000
TOUCH_TRAIN_SEED = 4000


def train_scenes(n: int = 500, touching_frac: float = 0.0):
    scenes = gen_dataset(n, TRAIN_SEED)
    extra = int(round(n * touching_frac))
    if extra:
        scenes += gen_dataset(extra, TOUCH_TRAIN_SEED, instances=(2, 2), touching_prob=1.0)
    return scenes


def test_scenes(n: int = 100):
    return gen_dataset(n, TEST_SEED)


def touching_scenes(n: int = 100):
    return gen_dataset(n, TOUCH_SEED, instances=(2, 2), touching_prob=1.0)

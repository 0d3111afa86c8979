import numpy as np
import pytest

from defectgen.data import ClassMap, DefectSample, ToySpec, synth_toy_dataset


@pytest.fixture(scope="session")
def class_map2():
    return ClassMap(("background", "blob", "scratch"))


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return tmp_path_factory.mktemp("toy")


@pytest.fixture(scope="session")
def toy_train(toy_root):
    spec = ToySpec(count=25, h=32, w=32, n_defect=2, seed=7)
    return synth_toy_dataset(spec, toy_root, split="train")


@pytest.fixture(scope="session")
def toy_val(toy_root):
    spec = ToySpec(count=50, h=32, w=32, n_defect=2, seed=8)
    return synth_toy_dataset(spec, toy_root, split="val")


def make_sample(h=32, w=32, n_defect=2, seed=0, sample_id="s0"):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(h, w, 3)).astype(np.float32) / 255.0 * 2 - 1
    mask = rng.integers(0, n_defect + 1, size=(h, w)).astype(np.int64)
    return DefectSample(image=img, mask=mask, sample_id=sample_id)

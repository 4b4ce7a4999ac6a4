import numpy as np
import pytest
import torch
from PIL import Image

from pcqa.datamodel import IMAGE, FRAME_SEQUENCE, MediaRef, Sample, write_manifest
from pcqa.synthetic import make_synthetic, split
from pcqa.training import TrainConfig, build_model

torch.set_num_threads(1)

TINY = dict(latent_dim=16, head_hidden=16, vision_dim=8, text_encoders="toy/a:8,toy/b:8")


def tiny_config(**overrides) -> TrainConfig:
    kw = dict(TINY, seed=0, resolution=(16, 24), batch_size=4, epochs=2, lr_max=1e-3)
    kw.update(overrides)
    return TrainConfig(**kw)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model():
    return build_model(tiny_config()).eval()


def save_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
    return str(path)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    samples = make_synthetic(d, n=24, seed=3, size=(20, 30))
    tr, va = split(samples, 0.25, 0)
    write_manifest(tr, d / "train.csv")
    write_manifest(va, d / "val.csv")
    return d


@pytest.fixture(scope="session")
def video_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("video")
    samples = make_synthetic(d, n=12, seed=5, size=(20, 30), frames=3)
    write_manifest(samples, d / "manifest.csv")
    return d


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")

import numpy as np
import pytest
import torch

from fingerspell.datamodel import FrameClip, KeypointClip
from fingerspell.synthgen import SynthConfig, generate_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_kp_clip(gen, t, k=54, absent=0.2):
    coords = gen.uniform(0, 1, size=(t, k, 3)).astype(np.float32)
    coords[gen.random((t, k)) < absent] = 0.0
    return KeypointClip(coords)


def random_frame_clip(gen, t, size=16):
    return FrameClip(gen.uniform(0, 1, size=(t, 3, size, size)).astype(np.float32))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """30 train / 8 val / 8 test synthetic clips with rendered frames."""
    out = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(n_train=30, n_val=8, n_test=8, seed=3)
    return cfg, generate_dataset(cfg, out)


# acceptance criterion number -> (passed, detail); printed after the run
ACCEPTANCE: dict = {}


class criterion:
    """Record one acceptance criterion as PASS unless the block raises."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        ACCEPTANCE[self.number] = (ok, self.title, detail.splitlines()[0] if detail else "")
        print(f"criterion {self.number}: {'PASS' if ok else 'FAIL'} {self.title} {detail}")
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")

import time

import numpy as np
import pytest
import yaml

from relictnet.datasets import TRAIN, TileSet


def make_tileset(pixels, masks=None, labels=None, valid=None, area=None):
    n = pixels.shape[0]
    s = pixels.shape[-1]
    if masks is None:
        masks = np.zeros((n, s, s), np.uint8)
    if labels is None:
        labels = (masks.reshape(n, -1).max(axis=1) > 0).astype(np.int64)
    if valid is None:
        valid = np.ones((n, s, s), bool)
    if area is None:
        area = np.full(n, TRAIN, np.uint8)
    return TileSet(
        pixels=np.asarray(pixels, np.float32),
        valid=valid,
        label=np.asarray(labels, np.int64),
        mask=np.asarray(masks, np.uint8),
        area=np.asarray(area, np.uint8),
        scene=np.zeros(n, np.int32),
        row=np.zeros(n, np.int32),
        col=np.arange(n, dtype=np.int32),
        variant=np.zeros(n, np.uint8),
    )


def blob_tiles(n=8, size=32, seed=0):
    """Forest-like tiles with one bright elliptical blob each."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    masks = np.zeros((n, size, size), np.uint8)
    for i in range(n):
        cx, cy = rng.uniform(size / 4, 3 * size / 4, 2)
        r = rng.uniform(size / 8, size / 3.5)
        masks[i] = (xx - cx) ** 2 / (2 * r) ** 2 + (yy - cy) ** 2 / r ** 2 < 1
    base = np.array([310, 470, 360, 2500], float)[None, :, None, None]
    lift = np.array([50, 130, 70, 600], float)[None, :, None, None]
    pix = base + 20 * rng.standard_normal((n, 4, size, size)) + masks[:, None] * lift
    return make_tileset(pix, masks)


@pytest.fixture
def tiny_config(tmp_path):
    """Writes a small but complete pipeline config and returns its path."""

    def write(**overrides):
        doc = {
            "paths": {"output_root": "out"},
            "encoder_preset": "tiny",
            "k_values": [2, 4],
            "augmentation_factors": [3, 5],
            "pretrain": {"epochs": 1, "learning_rate": 0.001, "checkpoint_every": 1},
            "finetune": {"epochs": 1, "learning_rate": 0.001, "checkpoint_every": 1},
            "synthetic": {"scene": {"width": 192, "height": 192, "scar_count": 6, "confounder_count": 2}},
        }
        doc.update(overrides)
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(doc))
        return path

    return write


# ---------------------------------------------------------------- acceptance report


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


class _Criterion:
    def __init__(self, config, number, title, budget_s):
        self.config, self.number, self.title, self.budget_s = config, number, title, budget_s
        self.details = []

    def note(self, text):
        self.details.append(str(text))

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        over = self.budget_s is not None and elapsed >= self.budget_s
        ok = exc_type is None and not over
        detail = "; ".join(self.details)
        if exc_type is not None:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        if over:
            detail += f"; runtime {elapsed:.1f}s exceeds {self.budget_s}s"
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number}: {self.title} ({elapsed:.1f}s) {detail}".rstrip()
        self.config.acceptance_lines.append(line)
        print(line)
        if exc_type is None and over:
            raise AssertionError(f"criterion {self.number} over runtime budget: {elapsed:.1f}s")
        return False


@pytest.fixture
def criterion(request):
    def make(number, title, budget_s=None):
        return _Criterion(request.config, number, title, budget_s)

    return make

import os
from pathlib import Path

import numpy as np
import pytest

CIFAR_ENV = "NETRECON_CIFAR10_DIR"


def cifar_dir():
    """Directory holding the CIFAR-10 binary batches, if configured."""
    path = os.environ.get(CIFAR_ENV)
    if path and (Path(path) / "data_batch_1.bin").exists():
        return Path(path)
    return None


def photo_patches(per_source, seed=0):
    """32x32 RGB crops of the scikit-image sample photos; class = source photo.

    Stands in for natural images when CIFAR-10 is not available.
    """
    data = pytest.importorskip("skimage.data")
    from skimage.transform import resize

    sources = [data.astronaut(), data.chelsea(), data.coffee(), data.rocket()]
    rng = np.random.default_rng(seed)
    pixels, labels = [], []
    for c, img in enumerate(sources):
        img = img.astype(np.float64) / 255.0
        h, w, _ = img.shape
        for _ in range(per_source):
            s = rng.integers(64, min(h, w) // 2)
            r, q = rng.integers(0, h - s), rng.integers(0, w - s)
            patch = resize(img[r:r + s, q:q + s], (32, 32), anti_aliasing=True)
            pixels.append(patch.transpose(2, 0, 1).ravel())
            labels.append(c)
    return np.array(pixels), np.array(labels)


def write_cifar(path, pixels, labels, label_bytes=1):
    """Write records in the CIFAR binary layout: label byte(s) then 3072 pixel bytes."""
    raw = np.clip(np.round(np.asarray(pixels) * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        for lab, row in zip(labels, raw):
            if label_bytes == 2:
                fh.write(bytes([0, int(lab)]))
            else:
                fh.write(bytes([int(lab)]))
            fh.write(row.tobytes())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = {}


def report_criterion(number, passed, detail):
    """Record and print one acceptance line.

    ``passed`` is True, False, None (skipped) or "INFO" (reported, not judged).
    """
    status = {True: "PASS", False: "FAIL", None: "SKIP", "INFO": "INFO"}[passed]
    line = f"criterion {number}: {status} {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=str):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])

import numpy as np
import pytest

from ditl.models import ModelConfig, init_params
from ditl.training import Split

TINY = ModelConfig(channels=(2, 3), clinical_widths=(4, 3), fusion_hidden=3)
TINY_EXTENTS = (6, 6, 4)


def toy_split(n=6, extents=TINY_EXTENTS, n_features=4, seed=0):
    """Random images whose lesion voxels are bright for positive samples."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    m1 = np.zeros((n,) + extents)
    m1[:, 1:-1, 1:-1, :] = 1
    m2 = np.zeros((n,) + extents)
    m2[:, 2:4, 2:4, 1:3] = 1
    images = 0.3 * rng.random((n, 1) + extents)
    images[:, 0] += 0.5 * m2 * labels[:, None, None, None]
    clinical = rng.standard_normal((n, n_features))
    clinical[:, 0] += labels
    return Split(images, m1, m2, clinical, labels, np.arange(n))


def tiny_model(kind, norm="batch", pooling="max", seed=0, n_features=4):
    cfg = ModelConfig(channels=TINY.channels, clinical_widths=TINY.clinical_widths,
                      fusion_hidden=TINY.fusion_hidden, norm=norm, pooling=pooling)
    return init_params(kind, n_features, cfg, seed=seed, extents=TINY_EXTENTS)


@pytest.fixture
def split():
    return toy_split()


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")

import numpy as np
import pytest

from virtihc.datapipe import DAB, EOSIN, HAEMATOXYLIN
from virtihc.stain import StainMatrix, render


@pytest.fixture
def he_matrix():
    return StainMatrix.from_vectors([HAEMATOXYLIN, EOSIN])


@pytest.fixture
def ihc_matrix():
    return StainMatrix.from_vectors([HAEMATOXYLIN, DAB])


def two_stain_image(sm, shape=(64, 64), seed=0, background=0.0):
    """Random two-stain image; ``background`` is the fraction of white pixels."""
    rng = np.random.default_rng(seed)
    conc = rng.uniform(0.0, 1.0, shape + (2,))
    if background:
        conc[rng.uniform(size=shape) < background] = 0.0
    return render(conc, sm), conc


def disc_image(size=64, radius=20, colour=(0.45, 0.2, 0.5)):
    yy, xx = np.mgrid[0:size, 0:size]
    disc = (yy - size / 2) ** 2 + (xx - size / 2) ** 2 <= radius**2
    img = np.ones((size, size, 3))
    img[disc] = colour
    return img, disc


def tiny_model(seed=0, weights=None, patch=8):
    """Float64 CycleGAN small enough for finite-difference checks."""
    from virtihc.cyclegan import CycleGanModel, LossWeights, ModelConfig

    cfg = ModelConfig(patch_size=patch, blocks=2, base_filters=2, filter_cap=4, disc_filters=(2, 2, 2), seed=seed)
    return CycleGanModel(cfg, weights or LossWeights(), dtype=np.float64)


def tiny_batch(seed=0, n=2, patch=8):
    rng = np.random.default_rng(seed + 1000)
    return rng.uniform(-1, 1, (n, patch, patch, 3)), rng.uniform(-1, 1, (n, patch, patch, 3))


def sampled_grad_error(params, loss, count=30, seed=0, h=1e-6):
    """Max relative error between accumulated ``p.grad`` and central differences
    of ``loss()`` on ``count`` randomly chosen parameter entries."""
    rng = np.random.default_rng(seed)
    sizes = np.array([p.value.size for p in params])
    picks = rng.choice(sizes.sum(), size=min(count, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for k in picks:
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        flat = params[i].value.reshape(-1)
        j = k - offsets[i]
        old = flat[j]
        flat[j] = old + h
        fp = loss()
        flat[j] = old - h
        fm = loss()
        flat[j] = old
        numeric.append((fp - fm) / (2 * h))
        analytic.append(params[i].grad.reshape(-1)[j])
    from virtihc.nnet.gradcheck import max_relative_error

    return max_relative_error(np.array(analytic), np.array(numeric))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])

import numpy as np
import pytest

from aaformer import tensor as T


def central_diff(f, x: np.ndarray, idx, h: float = 1e-5) -> float:
    """d f / d x[idx] by central differences; ``x`` is perturbed in place and restored."""
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grads(loss_fn, tensors, rng, coords_per_tensor: int = 4, h: float = 1e-5):
    """Compare analytic and finite-difference gradients on sampled coordinates.

    Returns the worst relative error seen.
    """
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    T.backward(loss, tensors)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        flat = list(np.ndindex(t.shape))
        picks = rng.choice(len(flat), size=min(coords_per_tensor, len(flat)), replace=False)
        for k in picks:
            idx = flat[k]
            with T.no_grad():
                num = central_diff(lambda: loss_fn().item(), t.data, idx, h)
            worst = max(worst, rel_err(analytic[idx], num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_setup(seed: int = 0, **train_kw):
    """A seconds-scale trainer: 16x8 images, 8 patches, one layer."""
    from aaformer.data import DatasetSpec, SyntheticDataset
    from aaformer.model import ModelConfig
    from aaformer.training import TrainConfig

    spec = DatasetSpec(seed=seed, num_identities=4, num_test_identities=2, images_per_identity=4,
                       query_per_identity=1, height=16, width=8)
    mcfg = ModelConfig(image_h=16, image_w=8, patch_size=4, stride=4, embed_dim=16, heads=2, layers=1,
                       granularity_sets=(2, 3), num_classes=4)
    kw = dict(steps=6, steps_per_epoch=2, ids_per_batch=2, imgs_per_id=2)
    kw.update(train_kw)
    return mcfg, TrainConfig(**kw), SyntheticDataset(spec)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and getattr(mod, "LINES", None):
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)

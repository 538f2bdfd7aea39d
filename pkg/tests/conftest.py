import numpy as np
import pytest

from conflens import LabelSet, SynthSpec, generate_dataset, load_manifest


def mixed_confusion(n: int, diag: float = 0.7) -> np.ndarray:
    """Column-stochastic test matrix with a dominant diagonal and one
    strong off-diagonal confusion per class."""
    T = np.full((n, n), (1.0 - diag) * 0.4 / max(n - 2, 1))
    for l in range(n):
        T[l, l] = diag
        T[(l + 1) % n, l] = (1.0 - diag) * 0.6 + T[(l + 1) % n, l]
    T[:, :] /= T.sum(axis=0, keepdims=True)
    return T


@pytest.fixture(scope="session")
def small_spec() -> SynthSpec:
    return SynthSpec(
        n_classes=4,
        height=24,
        width=24,
        n_estimation=8,
        n_evaluation=8,
        region_scale=8.0,
        true_confusion=mixed_confusion(4),
        sharpness=3.0,
        seed=71,
        min_classes_per_image=2,
        max_classes_per_image=3,
    )


@pytest.fixture(scope="session")
def small_dataset(small_spec, tmp_path_factory):
    """A generated dataset shared across tests: (spec, manifest, directory)."""
    out = tmp_path_factory.mktemp("smallset")
    manifest = generate_dataset(small_spec, out)
    return small_spec, manifest, out


@pytest.fixture(scope="session")
def labels4() -> LabelSet:
    return LabelSet(size=4)

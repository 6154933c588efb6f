import numpy as np
import pytest

from mialab.config import RunConfig
from mialab.data_lab import stratified_split, synth_blobs
from mialab.model_zoo import build_model
from mialab.trainer import overfit_preset, train


def small_run_config(**overrides) -> RunConfig:
    """A config small enough for unit tests (seconds, not minutes)."""
    base = dict(
        run__seed=7, data__classes=4, data__per_class=60, split__attack_val=20, split__attack_test=30,
        train__max_epochs=15, train__patience=15, interrogation__steps=15, sweep__steps=(5, 10),
        sweep__lr=(0.1,), sweep__clip=(True,), sweep__groups=("Late", "All"), ia__shadows=2, ia__max_epochs=5,
        laeq__budget=20, glir__d_sub=300, sif__d_sub=300,
    )
    base.update(overrides)
    return RunConfig().replace(**base)


@pytest.fixture(scope="session")
def blob_data():
    return synth_blobs(4, 60, (1, 8, 8), 2.0, seed=11)


@pytest.fixture(scope="session")
def trained_cnn(blob_data):
    split = stratified_split(blob_data, seed=3, attack_val=10, attack_test=20)
    model = build_model("TinyCNN", blob_data.shape, blob_data.classes, seed=5)
    model, _ = train(model, blob_data, split, overfit_preset(seed=1, max_epochs=30))
    return model, split


@pytest.fixture
def rng():
    return np.random.default_rng(0)

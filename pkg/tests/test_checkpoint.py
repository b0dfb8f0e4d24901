import json

import numpy as np
import pytest

from gpemu.checkpoint import emulator_from_dict, emulator_to_dict, load_emulator, save_emulator
from gpemu.dataset import SynthConfig, prepare, synth_generate
from gpemu.emulators import FAMILIES
from gpemu.training import TrainConfig, train_emulator


@pytest.fixture(scope="module")
def small_ds():
    return prepare(synth_generate(SynthConfig(n_sets=30, n_nuclides=4, seed=1)), seed=1)


@pytest.mark.parametrize("kind", FAMILIES)
def test_round_trip_preserves_predictions(tmp_path, small_ds, kind):
    pair = train_emulator(small_ds, TrainConfig(kind=kind, m=8, epochs=2, batch_size=32, mlp_hidden=(8, 6, 5)))
    em = pair.final
    path = tmp_path / "ck.json"
    save_emulator(path, em, seed=4)
    back = load_emulator(path)
    assert back.kind == kind and back.epoch == em.epoch
    theta = np.linspace(-0.5, 0.5, small_ds.n_params)
    a, b = em.predictive(theta), back.predictive(theta)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_allclose(a.cov, b.cov, rtol=1e-13, atol=1e-15)
    assert json.loads(path.read_text())["seed"] == 4


def test_schema_version_checked(small_ds):
    pair = train_emulator(small_ds, TrainConfig(kind="sgp", m=4, epochs=1))
    d = emulator_to_dict(pair.final)
    d["schema_version"] = 99
    with pytest.raises(ValueError):
        emulator_from_dict(d)

import importlib.util
from pathlib import Path

import numpy as np
import pytest

from deeptsc import experiments as ex
from deeptsc.datasets import DataError, generate_synthetic
from deeptsc.models import ModelSpec, build_model, receptive_field

SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"


def _script(name):
    spec = importlib.util.spec_from_file_location(name, SCRIPTS / f"{name}.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_receptive_field_setup():
    assert receptive_field(ex.RF_SPEC) >= ex.RF_LENGTH
    assert receptive_field(ex.SHORT_RF_SPEC) == 4
    data = ex.rf_dataset(0)
    assert len(data.train.labels) == 2 * ex.RF_TRAIN_PER_CLASS
    (a0, b0), (a1, b1) = data.windows
    assert b0 <= a1


def test_missing_gunpoint_names_the_env_var(monkeypatch, tmp_path):
    monkeypatch.setenv(ex.GUNPOINT_ENV, str(tmp_path / "nowhere"))
    monkeypatch.setattr(ex, "REPO_ROOT", tmp_path)
    monkeypatch.setattr(Path, "home", lambda: tmp_path)
    with pytest.raises(DataError, match=ex.GUNPOINT_ENV):
        ex.load_gunpoint()


def test_gunpoint_env_var_is_honoured(monkeypatch, tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("TRAIN", 6), ("TEST", 4)):
        rows = [f"{1 + i % 2}\t" + "\t".join(f"{v:.6f}" for v in rng.normal(size=20)) for i in range(n)]
        (tmp_path / f"GunPoint_{split}.tsv").write_text("\n".join(rows) + "\n")
    monkeypatch.setenv(ex.GUNPOINT_ENV, str(tmp_path))
    train_set, test_set = ex.load_gunpoint()
    assert len(train_set.labels) == 6 and len(test_set.labels) == 4
    np.testing.assert_allclose(train_set.as_array().mean(axis=2), 0.0, atol=1e-12)


def test_shape_surrogate_is_balanced_and_normalised():
    train_set, test_set = ex.shape_surrogate(n_train=20, n_test=10, length=60, seed=1)
    assert np.bincount(train_set.labels).tolist() == [10, 10]
    x = test_set.as_array()
    np.testing.assert_allclose(x.std(axis=2), 1.0, rtol=1e-9)


@pytest.mark.slow
def test_fcn_pipeline_learns_the_surrogate():
    data = ex.shape_surrogate(n_train=40, n_test=60, length=96, seed=0)
    runs = ex.gunpoint_fcn(seeds=(0,), epochs=60, data=data)
    assert runs[0].accuracy >= 0.9
    s = ex.adversarial_summary(runs[0].state, data[1], epsilon=0.1)
    assert s["max_delta"] <= 0.1
    assert s["fgsm"] <= s["clean"] and s["bim"] <= s["clean"]


def test_cam_hit_rate_counts_only_correct_predictions():
    data = generate_synthetic(4, 40, 2, seed=0)
    state = build_model(ModelSpec("fcn", n_classes=2), seed=0)
    rate, n = ex.cam_hit_rate(state, data)
    assert 0.0 <= rate <= 1.0 and 0 <= n <= len(data.test.labels)


def test_ts_conversion():
    mod = _script("fetch_gunpoint")
    text = "# comment\n@problemName X\n@classLabel true 1 2\n@data\n1.0,2.5,-3:2\n0,0,0:1\n"
    assert mod.ts_to_rows(text) == ["2\t1.0\t2.5\t-3", "1\t0\t0\t0"]

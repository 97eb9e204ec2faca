import pytest
from hypothesis import given, settings, strategies as st

from optsel.errors import ConfigError
from optsel.harness import config as cfgmod
from optsel.harness.config import ExperimentConfig


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.sizes == [32, 16, 8]
    assert cfg.budget == 200
    assert (cfg.schedule.b_tr, cfg.schedule.alpha) == (8, 4)
    assert (cfg.optimizer.beta1, cfg.optimizer.beta2) == (0.9, 0.999)
    assert cfgmod.loads("") == cfg


def test_round_trip_default_and_modified(tmp_path):
    cfg = ExperimentConfig().replace(**{
        "seeds": [1, 2, 3], "strategies": ["random", "two_stage"], "projection.k": 64,
        "schedule.steps": 7, "seed_overrides.pool": 5, "loss_threshold": 1.5,
    })
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg
    path = tmp_path / "c.yaml"
    path.write_text(cfgmod.dumps(cfg))
    assert cfgmod.load(path) == cfg


@settings(max_examples=40, deadline=None)
@given(k=st.integers(1, 512), lr=st.floats(0, 1), seeds=st.lists(st.integers(0, 2**31), min_size=1, max_size=5),
       fixed=st.booleans(), steps=st.one_of(st.none(), st.integers(1, 100)))
def test_round_trip_property(k, lr, seeds, fixed, steps):
    cfg = ExperimentConfig().replace(**{"projection.k": k, "optimizer.lr": lr, "seeds": seeds,
                                        "params.fixed_validation": fixed, "schedule.steps": steps})
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_unknown_key_reports_path_and_line():
    text = "seeds: [1]\ncorpus:\n  n: 100\n  colour: red\n"
    with pytest.raises(ConfigError, match=r"corpus\.colour: unknown field \(line 4\)"):
        cfgmod.loads(text)
    with pytest.raises(ConfigError, match=r"bogus: unknown field \(line 1\)"):
        cfgmod.loads("bogus: 1\n")


@pytest.mark.parametrize("text,pattern", [
    ("corpus:\n  n: ten\n", r"corpus\.n: expected int.*line 2"),
    ("strategies: [nope]\n", r"strategies: unknown strategy"),
    ("corpus:\n  mix: [0.5, 0.6, 0.1]\n", r"corpus\.mix.*line 2"),
    ("schedule:\n  alpha: 0\n", r"schedule\.alpha"),
    ("model:\n  loss: hinge\n", r"model\.loss"),
    ("schema_version: 9\n", r"schema_version"),
    ("seeds: [1\n", r"malformed YAML"),
    ("optimizer:\n  eps: 0\n", r"optimizer"),
])
def test_invalid_configs(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        cfgmod.loads(text)


def test_replace_rejects_unknown_field():
    with pytest.raises(ConfigError):
        ExperimentConfig().replace(**{"corpus.size": 3})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "absent.yaml")

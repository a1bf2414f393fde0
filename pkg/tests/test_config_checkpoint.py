import numpy as np
import pytest

from commbias.checkpoint import (CheckpointShapeError, CheckpointVersionError, load_checkpoint,
                                 restore_rng, rng_state, save_checkpoint)
from commbias.config import (BIASES, ConfigError, ExperimentConfig, classify_good_run,
                             load_config, parse_overrides, preset)
from commbias.nets import digit_forward
from commbias.training import DigitTrainer


def _outputs(tr):
    d = np.arange(10)
    return np.concatenate([digit_forward(tr.speaker, d).ravel(),
                           digit_forward(tr.listener, d, d % tr.cfg.n_messages).ravel()])


def test_presets_follow_published_tables():
    ps = preset("digit", "ps")
    assert (ps.action_entropy, ps.message_entropy, ps.h_target) == (0.03, 0.0, 1.0)
    assert ps.lambda_marginal == 0.1 and ps.lambda_conditional == pytest.approx(0.3)
    pl = preset("digit", "pl")
    assert (pl.pl_weight, pl.ce_weight, pl.message_entropy) == (0.01, 0.001, 0.03)
    si = preset("digit", "si")
    assert (si.action_entropy, si.message_entropy, si.ce_weight) == (0.01, 0.01, 0.001)
    t = preset("treasure", "ps")
    assert (t.ps_weight, t.ps_lambda, t.h_target, t.pl_weight) == (0.001, 3.0, 0.8, 0.0)
    t = preset("treasure", "pl")
    assert (t.pl_weight, t.ce_weight, t.ps_weight) == (0.003, 0.01, 0.0)
    t = preset("treasure", "both")
    assert t.ps_weight and t.pl_weight and t.ce_weight
    assert preset("treasure", "si").si_weight == 0.01
    for b in BIASES:
        c = preset("treasure", b)
        assert (c.batch_size, c.env_copies, c.action_entropy, c.lr) == (16, 32, 0.006, 1e-3)


def test_bias_requires_weights():
    with pytest.raises(ConfigError):
        ExperimentConfig(bias="ps")
    with pytest.raises(ConfigError):
        ExperimentConfig(bias="no-bias", pl_weight=0.1)
    with pytest.raises(ConfigError):
        ExperimentConfig(bias="si")
    with pytest.raises(ConfigError):
        ExperimentConfig(env="maze")
    with pytest.raises(ConfigError):
        preset("digit", "ps", h_target=10.0)


def test_config_file_roundtrip(tmp_path):
    cfg = preset("treasure", "both", seed=3, unroll=10)
    path = tmp_path / "a.cfg"
    cfg.save(path)
    assert load_config(path) == cfg
    assert load_config(path, ["seed=9"]).seed == 9


def test_overrides():
    assert parse_overrides(["lr=0.1", "symbolic=false"]) == {"lr": 0.1, "symbolic": False}
    with pytest.raises(ConfigError, match="bogus"):
        parse_overrides(["bogus=1"])
    with pytest.raises(ConfigError):
        parse_overrides(["seed=abc"])
    with pytest.raises(ConfigError):
        parse_overrides(["seed"])


@pytest.mark.parametrize("env,reward,good", [("digit", 0.25, True), ("treasure", 12.9, False),
                                             ("digit", 0.1, False), ("treasure", 13.5, True)])
def test_classify_good_run(env, reward, good):
    assert classify_good_run(env, reward) is good


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.zeros(0, np.float32),
              "c": np.array(1.5, np.float32)}
    gen = np.random.default_rng(5)
    gen.random(3)
    meta = {"step": 7, "rng": rng_state(gen)}
    save_checkpoint(tmp_path / "x.ecl", arrays, meta)
    got, m = load_checkpoint(tmp_path / "x.ecl")
    for k in arrays:
        assert got[k].tobytes() == arrays[k].tobytes() and got[k].shape == arrays[k].shape
    assert m["step"] == 7
    assert restore_rng(m["rng"]).random() == gen.random()
    raw = (tmp_path / "x.ecl").read_bytes()
    assert raw[:4] == b"ECL1"


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(tmp_path / "x.ecl", {"a": np.ones(3, np.float32)}, {})
    raw = bytearray((tmp_path / "x.ecl").read_bytes())
    bad = tmp_path / "bad.ecl"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)
    raw[4] = 9
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)
    raw = bytearray((tmp_path / "x.ecl").read_bytes())
    raw[12] = ord("!")
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)


def test_trainer_state_roundtrip_and_shape_error(tmp_path):
    tr = DigitTrainer(preset("digit", "ps", seed=1))
    for _ in range(5):
        tr.update()
    arrays, meta = tr.state()
    save_checkpoint(tmp_path / "t.ecl", arrays, meta)
    other = DigitTrainer(preset("digit", "ps", seed=2))
    a2, m2 = load_checkpoint(tmp_path / "t.ecl")
    other.load_state(a2, m2)
    np.testing.assert_array_equal(_outputs(tr), _outputs(other))
    assert tr.update() == other.update()
    small = DigitTrainer(preset("digit", "ps", seed=1, mlp="32,32"))
    with pytest.raises(CheckpointShapeError):
        small.load_state(a2, m2)

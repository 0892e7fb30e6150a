import json
import math

import numpy as np
import pytest

from agegender import ops
from agegender.data import scan_dataset, split_dataset
from agegender.models import build_model
from agegender.serialization import WeightFormatError
from agegender.tensor import Tensor, backward
from agegender.training import (
    Adam,
    Checkpoint,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    load_checkpoint,
    multitask_loss,
    save_checkpoint,
    strip_wall_clock,
    train,
)

import oracles
from helpers import small_attention_spec, tiny_attention_spec, tiny_resnet_spec


@pytest.fixture(scope="module")
def split(utk_dir):
    records, _ = scan_dataset(utk_dir)
    return split_dataset(records, seed=0, ratios=(0.6, 0.2, 0.2))


def _cfg(**kw):
    base = dict(epochs=3, batch_size=8, learning_rate=0.005, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# -- loss ---------------------------------------------------------------------------------

def test_uniform_logits_loss():
    g = Tensor(np.zeros((4, 2)), dtype="f64")
    a = Tensor(np.zeros((4, 11)), dtype="f64")
    loss = multitask_loss(g, a, [0, 1, 0, 1], [0, 3, 10, 5], 1.0).item()
    assert loss == pytest.approx(math.log(2) + math.log(11), abs=1e-12)
    assert round(loss, 4) == 3.0910
    assert multitask_loss(g, a, [0, 1, 0, 1], [0, 3, 10, 5], 0.0).item() == pytest.approx(math.log(2))


def test_random_loss_vs_oracles(rng):
    gl, al = rng.normal(size=(5, 2)), rng.normal(size=(5, 11))
    gy, by = rng.integers(0, 2, 5), rng.integers(0, 11, 5)
    got = multitask_loss(Tensor(gl, dtype="f64"), Tensor(al, dtype="f64"), gy, by, 0.7).item()
    want = oracles.cross_entropy_direct(gl, gy) + 0.7 * oracles.cross_entropy_direct(al, by)
    assert got == pytest.approx(want, abs=1e-12)


def test_loss_label_range():
    with pytest.raises(ValueError):
        multitask_loss(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))), [2], [0], 1.0)
    with pytest.raises(ValueError):
        multitask_loss(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))), [0], [3], 1.0)


def test_lambda_zero_with_detached_gender_gives_zero_age_grads():
    m = build_model(tiny_attention_spec(detach_gender_input=True, precision="f64"))
    out = m(np.random.default_rng(0).random((4, 3, 8, 8)))
    backward(multitask_loss(out.gender_logits, out.age_logits, [0, 1, 0, 1], [0, 1, 2, 3], 0.0))
    for p in (m.age_hidden.weight, m.age_hidden.bias, m.age_head.weight, m.age_head.bias):
        assert p.grad is None or not p.grad.any()
    assert m.gender_head.weight.grad.any()


# -- Adam ---------------------------------------------------------------------------------

def _param(value, grad=None):
    p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    p.grad = None if grad is None else np.array(grad, dtype=np.float64)
    return p


def test_adam_zero_gradient_is_noop():
    p = _param([1.0, -2.0], [0.0, 0.0])
    opt = Adam({"p": p}.items())
    for t in range(1, 4):
        opt.step()
        assert opt.t == t
        np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_hand_value():
    p = _param(1.0, 1.0)
    opt = Adam([("p", p)], lr=0.005)
    opt.step()
    assert p.data == pytest.approx(1.0 - 0.005 / (1 + 1e-8), abs=1e-15)
    assert round(p.data.item(), 3) == 0.995


def test_adam_two_steps_vs_formula():
    p = _param([0.3, -1.2], [0.5, -2.0])
    opt = Adam([("p", p)], lr=0.01)
    opt.step()
    p.grad = np.array([0.5, -2.0])
    opt.step()
    for i, (p0, g) in enumerate([(0.3, 0.5), (-1.2, -2.0)]):
        assert p.data[i] == pytest.approx(oracles.adam_formula(p0, [g, g], 0.01), abs=1e-12)


def test_adam_rejects_nan_naming_parameter():
    opt = Adam([("good", _param(1.0, 0.1)), ("bad.weight", _param(1.0, np.nan))])
    with pytest.raises(FloatingPointError, match="bad.weight"):
        opt.step()
    assert opt.t == 0


def test_adam_step_wrapper():
    p = _param(1.0, 1.0)
    opt = Adam([("p", p)], lr=0.1)
    adam_step({"p": p}, opt, lr=0.005)
    assert opt.lr == 0.005 and opt.t == 1
    with pytest.raises(KeyError):
        adam_step({"q": p}, opt)


def test_one_step_decreases_batch_loss_for_most_seeds():
    x = np.random.default_rng(99).random((8, 3, 32, 32)).astype(np.float32)
    gy, by = np.arange(8) % 2, np.arange(8) % 11
    decreased = 0
    for seed in range(20):
        m = build_model(small_attention_spec(seed=seed))
        opt = Adam(m.named_parameters(), lr=1e-4)
        out = m(x)
        before = multitask_loss(out.gender_logits, out.age_logits, gy, by)
        backward(before)
        opt.step()
        out = m(x)
        after = multitask_loss(out.gender_logits, out.age_logits, gy, by)
        decreased += after.item() < before.item()
    assert decreased >= 18


# -- config -------------------------------------------------------------------------------

def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.learning_rate, c.batch_size, c.epochs, c.lambda_age) == (0.005, 16, 100, 1.0)
    assert TrainConfig(epochs=5).hash() == c.hash()
    assert TrainConfig(learning_rate=0.01).hash() != c.hash()
    assert TrainConfig.from_dict({**c.to_dict(), "unknown": 1}) == c
    for bad in (dict(batch_size=0), dict(learning_rate=-1), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- training loop ------------------------------------------------------------------------

def test_training_log_and_outputs(split, tmp_path):
    res = train(build_model(tiny_attention_spec()), split, _cfg(), out_dir=tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "log.ndjson").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2, 3]
    assert set(lines[0]) == {"epoch", "train_loss", "val_gender_acc", "val_age_acc", "val_aabd", "wall_seconds"}
    assert lines == res.log
    assert (tmp_path / "final.aagw").exists() and (tmp_path / "best.aagw").exists()
    best_score = max(0.5 * (r["val_gender_acc"] + r["val_age_acc"]) for r in lines)
    assert res.best.best_score == pytest.approx(best_score)
    assert res.final.epoch == 3


def test_fixed_seed_gives_identical_logs(split):
    a = train(build_model(tiny_resnet_spec()), split, _cfg())
    b = train(build_model(tiny_resnet_spec()), split, _cfg())
    assert json.dumps(strip_wall_clock(a.log)) == json.dumps(strip_wall_clock(b.log))
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n


def test_zero_learning_rate_keeps_loss_constant(split):
    # one batch per epoch so shuffling cannot change the batch-norm statistics; only the
    # summation order differs between epochs
    cfg = _cfg(learning_rate=0.0, augment=False, epochs=3, batch_size=len(split.train))
    model = build_model(tiny_attention_spec())
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    res = train(model, split, cfg)
    losses = [r["train_loss"] for r in res.log]
    assert max(losses) - min(losses) < 1e-5
    for n, p in model.named_parameters():
        assert p.data.tobytes() == before[n].tobytes()


def test_resume_matches_uninterrupted(split, tmp_path):
    full = train(build_model(tiny_attention_spec()), split, _cfg(epochs=4))
    part = train(build_model(tiny_attention_spec()), split, _cfg(epochs=2), out_dir=tmp_path)
    ckpt = load_checkpoint(tmp_path / "final.aagw")
    resumed = train(ckpt.build_model(), split, _cfg(epochs=4), resume=ckpt, out_dir=tmp_path)
    assert strip_wall_clock(resumed.log) == strip_wall_clock(full.log)
    for (n, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    assert part.final.epoch == 2


def test_resume_config_mismatch(split, tmp_path):
    train(build_model(tiny_attention_spec()), split, _cfg(epochs=1), out_dir=tmp_path)
    ckpt = load_checkpoint(tmp_path / "final.aagw")
    other = _cfg(epochs=2, learning_rate=0.001)
    with pytest.raises(ValueError, match="config hash"):
        train(ckpt.build_model(), split, other, resume=ckpt, strict_config=True)
    res = train(ckpt.build_model(), split, other, resume=ckpt)  # warns, proceeds
    assert res.final.epoch == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_preserves_last_good(split, tmp_path):
    model = build_model(tiny_attention_spec())
    model.gender_head.bias.data[...] = np.inf
    with pytest.raises(TrainingDiverged) as exc:
        train(model, split, _cfg(epochs=1), out_dir=tmp_path)
    assert exc.value.checkpoint.epoch == 0
    assert (tmp_path / "last_good.aagw").exists()


def test_bucket_count_must_cover_labels(split):
    with pytest.raises(ValueError, match="age buckets"):
        train(build_model(tiny_attention_spec(num_age_buckets=3)), split, _cfg())


def test_empty_training_partition(split):
    empty = split_dataset([], seed=0)
    with pytest.raises(ValueError):
        train(build_model(tiny_attention_spec()), empty, _cfg())


def test_early_stop_on_train_accuracy(split):
    res = train(build_model(tiny_attention_spec()), split, _cfg(epochs=5, early_stop_train_accuracy=0.0))
    assert res.stopped_early and len(res.log) == 1
    assert "train_gender_acc" in res.log[0]


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_identical(split, tmp_path):
    res = train(build_model(tiny_attention_spec()), split, _cfg(epochs=1))
    save_checkpoint(tmp_path / "a.aagw", res.final)
    loaded = load_checkpoint(tmp_path / "a.aagw")
    save_checkpoint(tmp_path / "b.aagw", loaded)
    assert (tmp_path / "a.aagw").read_bytes() == (tmp_path / "b.aagw").read_bytes()
    for k, v in res.final.state.items():
        assert loaded.state[k].tobytes() == v.tobytes()
    assert loaded.rng_state == res.final.rng_state
    assert loaded.adam["t"] == res.final.adam["t"] > 0


def test_checkpoint_corrupt_magic(split, tmp_path):
    res = train(build_model(tiny_attention_spec()), split, _cfg(epochs=1))
    save_checkpoint(tmp_path / "c.aagw", res.final)
    raw = bytearray((tmp_path / "c.aagw").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "c.aagw").write_bytes(bytes(raw))
    with pytest.raises(WeightFormatError, match="magic"):
        load_checkpoint(tmp_path / "c.aagw")


def test_weights_file_is_not_a_checkpoint(tmp_path):
    from agegender.serialization import save_model

    save_model(tmp_path / "w.aagw", build_model(tiny_attention_spec()))
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "w.aagw")


def test_checkpoint_capture_is_a_snapshot(split):
    model = build_model(tiny_attention_spec())
    opt = Adam(model.named_parameters())
    ck = Checkpoint.capture(model, opt, 0, np.random.default_rng(0), _cfg())
    model.gender_head.weight.data += 1
    assert not np.array_equal(ck.state["gender_head.weight"], model.gender_head.weight.data)

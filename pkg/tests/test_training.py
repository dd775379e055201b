"""Loss, optimizer, schedule, the train loop, and checkpointing."""

import numpy as np
import pytest

from charnmt.data import ParallelCorpus, batch_from_rows, build_vocab, encode_pair
from charnmt.model import ModelConfig, build_params, model_forward
from charnmt.tensor import MaskError, NonFiniteError, ParameterSet, Tensor, mul, tsum
from charnmt.training import (AdamState, TrainConfig, TrainLog, adam_step,
                              checkpoint_load, checkpoint_save, clip_grad_norm,
                              evaluate, lr_at_step, masked_cross_entropy, train)
from oracles import brute_cross_entropy

from conftest import make_batch, rand_rng


# ---------------------------------------------------------------------------
# masked cross-entropy
# ---------------------------------------------------------------------------

def test_cross_entropy_perfect_prediction():
    tgt = np.array([[1, 2, 0]])
    mask = np.array([[True, True, False]])
    logits = np.zeros((1, 3, 4))
    logits[0, 0, 1] = 60.0
    logits[0, 1, 2] = 60.0
    loss = masked_cross_entropy(Tensor(logits), tgt, mask, smoothing=0.0)
    assert loss.item() < 1e-10


def test_cross_entropy_uniform_logits():
    v = 7
    logits = Tensor(np.zeros((2, 3, v)))
    tgt = np.ones((2, 3), dtype=np.int64)
    mask = np.ones((2, 3), dtype=bool)
    loss = masked_cross_entropy(logits, tgt, mask, smoothing=0.0)
    assert abs(loss.item() - np.log(v)) < 1e-12


@pytest.mark.parametrize("smoothing", [0.0, 0.1])
def test_cross_entropy_matches_brute_oracle(smoothing):
    rng = rand_rng(50)
    logits = rng.normal(size=(3, 5, 9))
    tgt = rng.integers(0, 9, size=(3, 5))
    mask = rng.random((3, 5)) < 0.8
    mask[:, 0] = True
    loss = masked_cross_entropy(Tensor(logits), tgt, mask, smoothing=smoothing)
    assert abs(loss.item() - brute_cross_entropy(logits, tgt, mask, smoothing)) < 1e-10


def test_cross_entropy_all_pad_is_error():
    with pytest.raises(MaskError):
        masked_cross_entropy(Tensor(np.zeros((1, 2, 4))),
                             np.zeros((1, 2), dtype=np.int64),
                             np.zeros((1, 2), dtype=bool))


def test_cross_entropy_gradient():
    from charnmt.tensor import grad_check

    rng = rand_rng(51)
    params = ParameterSet({"z": Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)})
    tgt = rng.integers(0, 6, size=(2, 4))
    mask = np.ones((2, 4), dtype=bool)
    report = grad_check(
        lambda p: masked_cross_entropy(p["z"], tgt, mask, smoothing=0.1),
        params, tol=1e-5)
    assert report.passed, report.per_param


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def _scalar_params(value):
    return ParameterSet({"x": Tensor(np.array([value]), requires_grad=True)})


def test_adam_zero_gradient_is_identity():
    params = _scalar_params(1.5)
    params["x"].grad = np.zeros(1)
    state = AdamState.for_params(params)
    adam_step(params, state, lr=0.1)
    assert params["x"].data[0] == 1.5
    assert state.t == 1


def test_adam_first_step_magnitude_is_lr():
    params = _scalar_params(0.0)
    params["x"].grad = np.array([42.0])
    state = AdamState.for_params(params)
    adam_step(params, state, lr=0.01)
    assert abs(abs(params["x"].data[0]) - 0.01) < 1e-9


def test_adam_descends_quadratic():
    params = _scalar_params(1.0)
    state = AdamState.for_params(params)
    history = [1.0]
    for _ in range(10):
        params.zero_grad()
        tsum(mul(params["x"], params["x"])).backward()
        adam_step(params, state, lr=0.1)
        history.append(abs(float(params["x"].data[0])))
    assert all(b < a for a, b in zip(history, history[1:]))


def test_adam_rejects_non_finite_gradient():
    params = _scalar_params(1.0)
    params["x"].grad = np.array([np.nan])
    state = AdamState.for_params(params)
    with pytest.raises(NonFiniteError):
        adam_step(params, state, lr=0.1)
    assert params["x"].data[0] == 1.0 and state.t == 0


# ---------------------------------------------------------------------------
# schedule and clipping
# ---------------------------------------------------------------------------

def test_lr_peak_at_warmup():
    assert abs(lr_at_step(400, 512, 400) - 512 ** -0.5 * 400 ** -0.5) < 1e-15


def test_lr_linear_ramp():
    assert abs(lr_at_step(200, 64, 400) - 0.5 * lr_at_step(400, 64, 400)) < 1e-15


def test_lr_inverse_sqrt_decay():
    assert abs(lr_at_step(1600, 64, 400) - 0.5 * lr_at_step(400, 64, 400)) < 1e-15


def test_lr_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        lr_at_step(0, 64, 400)


def test_clip_grad_norm_scales_to_max():
    params = ParameterSet({"a": Tensor(np.zeros(3), requires_grad=True),
                           "b": Tensor(np.zeros(4), requires_grad=True)})
    params["a"].grad = np.full(3, 2.0)
    params["b"].grad = np.full(4, -2.0)
    before = np.sqrt((params["a"].grad ** 2).sum() + (params["b"].grad ** 2).sum())
    returned = clip_grad_norm(params, max_norm=1.0)
    assert abs(returned - before) < 1e-12
    after = np.sqrt((params["a"].grad ** 2).sum() + (params["b"].grad ** 2).sum())
    assert abs(after - 1.0) < 1e-12


def test_clip_grad_norm_leaves_small_gradients_alone():
    params = ParameterSet({"a": Tensor(np.zeros(2), requires_grad=True)})
    params["a"].grad = np.array([0.3, 0.4])
    clip_grad_norm(params, max_norm=1.0)
    assert np.allclose(params["a"].grad, [0.3, 0.4])


# ---------------------------------------------------------------------------
# train loop
# ---------------------------------------------------------------------------

def _micro_task(n_pairs=24, seed=60):
    rng = rand_rng(seed)
    alphabet = "abcdef"
    pairs = []
    for _ in range(n_pairs):
        s = "".join(alphabet[i] for i in rng.integers(0, 6, size=rng.integers(3, 9)))
        pairs.append((s, s))
    corpus = ParallelCorpus(pairs=pairs, language="copy")
    vocab = build_vocab([corpus], 1)
    config = ModelConfig(vocab_size=vocab.size, d_model=16, n_layers=1,
                         n_heads=2, d_ff=32, max_len=32, dropout=0.0)
    return corpus, vocab, config


def test_train_zero_epochs_is_noop(tmp_path):
    corpus, vocab, config = _micro_task()
    params = build_params(config, seed=0)
    before = params.copy()
    tc = TrainConfig(epochs=0, max_tokens=256, warmup=10, seed=0)
    log = train(params, config, tc, corpus, vocab, out_dir=tmp_path)
    assert not log.steps and not log.epochs
    for name, t in params.items():
        assert np.array_equal(t.data, before[name].data)
    assert (tmp_path / "latest.ckpt").exists()


def test_train_same_seed_is_bit_identical():
    corpus, vocab, config = _micro_task()
    tc = TrainConfig(epochs=2, max_tokens=64, warmup=20, seed=4)
    runs = []
    for _ in range(2):
        params = build_params(config, seed=0)
        log = train(params, config, tc, corpus, vocab)
        runs.append([s.loss for s in log.steps])
    assert runs[0] == runs[1]


def test_train_lowers_validation_loss():
    corpus, vocab, config = _micro_task()
    val = {"val": ParallelCorpus(pairs=corpus.pairs[:8], language="copy")}
    tc = TrainConfig(epochs=1, max_tokens=256, warmup=10, seed=0,
                     label_smoothing=0.0, bleu_mode="char")
    params = build_params(config, seed=0)
    loss_before, _ = evaluate(params, config, val, vocab, tc)
    log = train(params, config, tc, corpus, vocab, val_sets=val)
    assert log.epochs[0].val_loss < loss_before


def test_train_single_batch_loss_decreases():
    """Smoke property: on one memorizable batch the loss trends down."""
    corpus, vocab, config = _micro_task(n_pairs=6)
    tc = TrainConfig(epochs=50, max_tokens=512, warmup=400, seed=1,
                     label_smoothing=0.0)
    params = build_params(config, seed=1)
    log = train(params, config, tc, corpus, vocab)
    losses = [s.loss for s in log.steps]
    assert len(losses) == 50
    decreases = sum(b < a for a, b in zip(losses, losses[1:]))
    assert decreases >= 45
    assert losses[-1] < 0.5 * losses[0]


def test_train_aborts_on_non_finite_with_restore():
    corpus, vocab, config = _micro_task()
    params = build_params(config, seed=0)
    params["src_embed.weight"].data[:] = 1e200  # forward will overflow
    tc = TrainConfig(epochs=1, max_tokens=256, warmup=10, seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(RuntimeError) as err:
            train(params, config, tc, corpus, vocab)
    assert "restored" in str(err.value)


def test_train_log_csv_layout(tmp_path):
    corpus, vocab, config = _micro_task()
    val = {"val": ParallelCorpus(pairs=corpus.pairs[:4], language="copy")}
    tc = TrainConfig(epochs=1, max_tokens=256, warmup=10, seed=0, bleu_mode="char")
    params = build_params(config, seed=0)
    log = train(params, config, tc, corpus, vocab, val_sets=val)
    path = tmp_path / "train_log.csv"
    log.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,epoch,loss,val_loss,val_bleu,seconds"
    step_rows = [l for l in lines[1:] if l.split(",")[2]]
    val_rows = [l for l in lines[1:] if l.split(",")[3]]
    assert len(step_rows) == len(log.steps)
    assert len(val_rows) == 1
    curves = tmp_path / "curves.csv"
    log.write_curves_csv(curves)
    assert curves.read_text().splitlines()[0] == "epoch,val"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _ckpt_fixture(tmp_path, dtype="float64"):
    corpus, vocab, config = _micro_task()
    params = build_params(config, seed=2)
    adam = AdamState.for_params(params)
    adam.t = 17
    adam.m["out.bias"][:] = 0.25
    path = tmp_path / "model.ckpt"
    checkpoint_save(params, config, vocab, adam, path, step=17, epoch=3, dtype=dtype)
    return params, config, vocab, adam, path


def test_checkpoint_round_trip_exact(tmp_path):
    params, config, vocab, adam, path = _ckpt_fixture(tmp_path)
    bundle = checkpoint_load(path)
    assert bundle.config == config
    assert bundle.vocab.chars == vocab.chars
    assert bundle.step == 17 and bundle.epoch == 3
    for name, t in params.items():
        assert np.array_equal(bundle.params[name].data, t.data)
    assert bundle.adam.t == 17
    assert np.array_equal(bundle.adam.m["out.bias"], adam.m["out.bias"])


def test_checkpoint_round_trip_forward_equivalence(tmp_path):
    params, config, vocab, _, path = _ckpt_fixture(tmp_path)
    bundle = checkpoint_load(path)
    batch = make_batch([("abc", "cba")], vocab)
    a, _ = model_forward(batch, params, config)
    b, _ = model_forward(batch, bundle.params, bundle.config)
    assert np.array_equal(a.data, b.data)


def test_checkpoint_float32_storage_is_close(tmp_path):
    params, config, vocab, _, path = _ckpt_fixture(tmp_path, dtype="float32")
    bundle = checkpoint_load(path)
    for name, t in params.items():
        assert np.allclose(bundle.params[name].data, t.data, atol=1e-6)


def test_checkpoint_rejects_tampered_magic(tmp_path):
    _, _, _, _, path = _ckpt_fixture(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError) as err:
        checkpoint_load(path)
    assert "not a checkpoint" in str(err.value)


def test_checkpoint_rejects_truncation(tmp_path):
    _, _, _, _, path = _ckpt_fixture(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(ValueError) as err:
        checkpoint_load(path)
    assert "truncated" in str(err.value)


@pytest.mark.invariant
def test_checkpoint_resume_equivalence(tmp_path):
    """Stopping at an epoch boundary and resuming reproduces the
    uninterrupted run bit for bit."""
    corpus, vocab, config = _micro_task()
    tc = TrainConfig(epochs=2, max_tokens=64, warmup=20, seed=7)

    straight = build_params(config, seed=3)
    train(straight, config, tc, corpus, vocab)

    resumed = build_params(config, seed=3)
    tc_first = TrainConfig(epochs=1, max_tokens=64, warmup=20, seed=7)
    train(resumed, config, tc_first, corpus, vocab, out_dir=tmp_path)
    bundle = checkpoint_load(tmp_path / "latest.ckpt")
    assert bundle.epoch == 1
    train(bundle.params, bundle.config, tc, corpus, vocab,
          adam=bundle.adam, start_epoch=bundle.epoch)

    for name, t in straight.items():
        assert np.array_equal(t.data, bundle.params[name].data), name

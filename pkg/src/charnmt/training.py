"""Teacher-forced training: smoothed cross-entropy, Adam with a warmup
schedule, the epoch loop with per-epoch validation, and checkpoint I/O.

Everything is deterministic given the root seed: batch order and dropout
draw from per-epoch child seeds, so resuming from an epoch-boundary
checkpoint reproduces the uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bleu import corpus_bleu
from .data import Batch, ParallelCorpus, Vocabulary, make_batches
from .decoding import DecodeConfig, greedy_decode_batch
from .model import ModelConfig, model_forward, param_shapes
from .tensor import (
    MaskError,
    NonFiniteError,
    ParameterSet,
    Tensor,
    log_softmax_lastdim,
    mul,
    neg,
    no_grad,
    seed_for_name,
    tsum,
)


def masked_cross_entropy(logits: Tensor, tgt_out: np.ndarray, tgt_mask: np.ndarray,
                         smoothing: float = 0.1) -> Tensor:
    """Mean negative log-likelihood over non-pad target positions.

    With label smoothing alpha, the per-position target distribution is
    (1-alpha) on the gold id plus alpha/V spread uniformly: so the loss is
    the cross-entropy against that mixture. alpha=0 recovers plain NLL.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    b, t, v = logits.shape
    if tgt_out.shape != (b, t) or tgt_mask.shape != (b, t):
        raise ValueError("targets and mask must both be [B, T]")
    if tgt_out.min() < 0 or tgt_out.max() >= v:
        raise ValueError("target id out of range")
    n_real = int(tgt_mask.sum())
    if n_real == 0:
        raise MaskError("every target position is padding")
    q = np.full((b, t, v), smoothing / v)
    np.put_along_axis(q, tgt_out[..., None], smoothing / v + (1.0 - smoothing), axis=-1)
    q *= tgt_mask[..., None]
    logp = log_softmax_lastdim(logits)
    return neg(tsum(mul(logp, Tensor(q)))) * (1.0 / n_real)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    scale: float = 1.0

    @classmethod
    def for_params(cls, params: ParameterSet) -> "AdamState":
        return cls(m={n: np.zeros_like(p.data) for n, p in params.items()},
                   v={n: np.zeros_like(p.data) for n, p in params.items()})


def adam_step(params: ParameterSet, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from the gradients stored on params.

    A non-finite gradient aborts before any parameter or moment is touched.
    """
    if lr <= 0.0:
        raise ValueError("lr must be positive")
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for '{name}'")
        grads[name] = g
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.data -= state.scale * lr * m_hat / (np.sqrt(v_hat) + state.eps)


def lr_at_step(step: int, d_model: int, warmup: int = 400) -> float:
    """Inverse-sqrt schedule: linear ramp to the peak at step == warmup,
    then decay as step^-0.5, the whole curve scaled by d_model^-0.5."""
    if step < 1 or warmup < 1:
        raise ValueError("step and warmup must be >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_grad_norm(params: ParameterSet, max_norm: float = 1.0) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total ** 0.5
    if np.isfinite(norm) and norm > max_norm:
        factor = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# train loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    max_tokens: int = 4096
    warmup: int = 400
    seed: int = 0
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    bleu_mode: str = "whitespace"  # "char" suits space-free toy corpora
    early_stop_bleu: float = 0.0   # > 0: stop once every val set clears it

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.warmup < 1 or self.max_tokens < 1:
            raise ValueError("warmup and max_tokens must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.bleu_mode not in ("whitespace", "char"):
            raise ValueError("bleu_mode must be 'whitespace' or 'char'")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    seconds: float


@dataclass
class EpochRecord:
    step: int
    epoch: int
    val_loss: float
    val_bleu: dict[str, float]
    seconds: float


@dataclass
class TrainLog:
    """Append-only record of per-step losses and per-epoch validation."""

    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        """step,epoch,loss,val_loss,val_bleu,seconds with one row per step
        and one validation row per epoch (first validation set's BLEU)."""
        rows = ["step,epoch,loss,val_loss,val_bleu,seconds"]
        merged = [(s.step, 0, s) for s in self.steps] + [(e.step, 1, e) for e in self.epochs]
        merged.sort(key=lambda r: (r[0], r[1]))
        for _, kind, rec in merged:
            if kind == 0:
                rows.append(f"{rec.step},{rec.epoch},{rec.loss:.6f},,,{rec.seconds:.3f}")
            else:
                bleu = next(iter(rec.val_bleu.values()), float("nan"))
                rows.append(f"{rec.step},{rec.epoch},,{rec.val_loss:.6f},"
                            f"{bleu:.4f},{rec.seconds:.3f}")
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")

    def write_curves_csv(self, path) -> None:
        """Per-epoch BLEU curves, one column per validation set."""
        names = list(self.epochs[0].val_bleu) if self.epochs else []
        rows = ["epoch," + ",".join(names)]
        for e in self.epochs:
            rows.append(f"{e.epoch}," + ",".join(f"{e.val_bleu[n]:.4f}" for n in names))
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def evaluate(params: ParameterSet, config: ModelConfig, val_sets: dict[str, ParallelCorpus],
             vocab: Vocabulary, train_config: TrainConfig) -> tuple[float, dict[str, float]]:
    """Teacher-forced loss over all validation pairs and greedy-decoding
    BLEU per validation set."""
    losses, weights = [], []
    bleus: dict[str, float] = {}
    dcfg = DecodeConfig()
    with no_grad():
        for name, corpus in val_sets.items():
            for batch in make_batches(corpus, vocab, train_config.max_tokens, seed=0):
                logits, _ = model_forward(batch, params, config)
                loss = masked_cross_entropy(logits, batch.tgt_out_ids, batch.tgt_mask,
                                            train_config.label_smoothing)
                losses.append(loss.item())
                weights.append(batch.n_target_tokens)
            hyps = greedy_decode_batch(params, config, [s for s, _ in corpus.pairs],
                                       vocab, dcfg)
            bleus[name] = corpus_bleu(hyps, [t for _, t in corpus.pairs],
                                      tokenizer=train_config.bleu_mode)
    val_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
    return val_loss, bleus


def train(params: ParameterSet, config: ModelConfig, train_config: TrainConfig,
          corpus: ParallelCorpus, vocab: Vocabulary,
          val_sets: dict[str, ParallelCorpus] | None = None,
          out_dir=None, adam: AdamState | None = None,
          start_epoch: int = 0, log: TrainLog | None = None) -> TrainLog:
    """Run the epoch loop: shuffle, batch, forward, loss, backward, clip,
    Adam step; validate once per epoch.

    Batch order and dropout are drawn from child seeds of
    (train_config.seed, epoch), so a run resumed from an epoch-boundary
    checkpoint (pass ``start_epoch``, ``adam``) continues the exact
    uninterrupted trajectory. A non-finite loss or gradient aborts with
    parameters restored to the last completed epoch; checkpoints already
    on disk are left in place.
    """
    adam = adam if adam is not None else AdamState.for_params(params)
    log = log if log is not None else TrainLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    snapshot = params.copy()
    best_bleu = -1.0
    try:
        for epoch in range(start_epoch, train_config.epochs):
            batches = make_batches(corpus, vocab, train_config.max_tokens,
                                   seed=seed_for_name(train_config.seed, f"batches.{epoch}"))
            drop_rng = np.random.Generator(np.random.PCG64(
                seed_for_name(train_config.seed, f"dropout.{epoch}")))
            for batch in batches:
                lr = lr_at_step(adam.t + 1, config.d_model, train_config.warmup)
                params.zero_grad()
                logits, _ = model_forward(batch, params, config, train_mode=True, rng=drop_rng)
                loss = masked_cross_entropy(logits, batch.tgt_out_ids, batch.tgt_mask,
                                            train_config.label_smoothing)
                loss.backward()
                clip_grad_norm(params, train_config.clip_norm)
                adam_step(params, adam, lr)
                log.steps.append(StepRecord(adam.t, epoch, loss.item(),
                                            time.perf_counter() - t0))
            val_loss, val_bleu = (evaluate(params, config, val_sets, vocab, train_config)
                                  if val_sets else (float("nan"), {}))
            log.epochs.append(EpochRecord(adam.t, epoch, val_loss, val_bleu,
                                          time.perf_counter() - t0))
            snapshot = params.copy()
            if out_dir is not None:
                checkpoint_save(params, config, vocab, adam, out_dir / "latest.ckpt",
                                step=adam.t, epoch=epoch + 1)
                mean_bleu = float(np.mean(list(val_bleu.values()))) if val_bleu else 0.0
                if not val_bleu or mean_bleu >= best_bleu:
                    best_bleu = mean_bleu
                    checkpoint_save(params, config, vocab, adam, out_dir / "best.ckpt",
                                    step=adam.t, epoch=epoch + 1)
            if (train_config.early_stop_bleu > 0 and val_bleu
                    and all(b >= train_config.early_stop_bleu for b in val_bleu.values())):
                break
    except NonFiniteError as e:
        params.load_data(snapshot)
        raise RuntimeError(f"training aborted: {e}; parameters restored to the "
                           f"last completed epoch") from e
    if out_dir is not None and not (out_dir / "latest.ckpt").exists():
        checkpoint_save(params, config, vocab, adam, out_dir / "latest.ckpt",
                        step=adam.t, epoch=start_epoch)
    return log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CXF1"
CKPT_VERSION = 1
_DTYPE_TAGS = {"float64": 0, "float32": 1}
_TAG_DTYPES = {0: np.float64, 1: np.float32}


@dataclass
class CheckpointBundle:
    params: ParameterSet
    config: ModelConfig
    vocab: Vocabulary
    adam: AdamState | None
    step: int
    epoch: int


def _write_record(f, name: str, arr: np.ndarray, dtype: str) -> None:
    payload = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
    raw_name = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw_name)))
    f.write(raw_name)
    f.write(struct.pack("<BB", _DTYPE_TAGS[dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
    f.write(payload.tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def _read_record(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    tag, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag} in checkpoint")
    shape = struct.unpack(f"<{ndim}q", _read_exact(f, 8 * ndim))
    dtype = np.dtype(_TAG_DTYPES[tag]).newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    arr = np.frombuffer(_read_exact(f, count * dtype.itemsize), dtype=dtype)
    return name, arr.astype(np.float64).reshape(shape)


def checkpoint_save(params: ParameterSet, config: ModelConfig, vocab: Vocabulary,
                    adam: AdamState | None, path, step: int = 0, epoch: int = 0,
                    dtype: str = "float64") -> None:
    """Binary checkpoint: magic, version byte, JSON header, then one record
    per array (parameters, then Adam moments) in sorted name order."""
    if dtype not in _DTYPE_TAGS:
        raise ValueError("dtype must be 'float64' or 'float32'")
    header = {
        "config": config.to_dict(),
        "vocab_chars": "".join(vocab.chars),
        "step": int(step),
        "epoch": int(epoch),
        "dtype": dtype,
        "adam": None if adam is None else {"t": adam.t, "beta1": adam.beta1,
                                           "beta2": adam.beta2, "eps": adam.eps,
                                           "scale": adam.scale},
    }
    records: list[tuple[str, np.ndarray]] = [(f"param/{n}", p.data) for n, p in params.items()]
    if adam is not None:
        records += [(f"adam.m/{n}", adam.m[n]) for n in params.names()]
        records += [(f"adam.v/{n}", adam.v[n]) for n in params.names()]
    records.sort(key=lambda r: r[0])
    raw_header = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<B", CKPT_VERSION))
        f.write(struct.pack("<I", len(raw_header)))
        f.write(raw_header)
        f.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_record(f, name, arr, dtype)


def checkpoint_load(path) -> CheckpointBundle:
    """Restore a checkpoint_save file; rejects wrong magic or version and
    shapes that disagree with the header's architecture."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<B", _read_exact(f, 1))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", _read_exact(f, 4))
        header = json.loads(_read_exact(f, header_len).decode("utf-8"))
        (n_records,) = struct.unpack("<I", _read_exact(f, 4))
        records = dict(_read_record(f) for _ in range(n_records))
    config = ModelConfig.from_dict(header["config"])
    vocab = Vocabulary(chars=tuple(header["vocab_chars"]))
    expected = param_shapes(config)
    params = ParameterSet()
    for name, shape in expected.items():
        key = f"param/{name}"
        if key not in records:
            raise ValueError(f"checkpoint is missing parameter '{name}'")
        arr = records[key]
        if arr.shape != shape:
            raise ValueError(f"checkpoint parameter '{name}' has shape {arr.shape}, "
                             f"model wants {shape}")
        params.add(name, Tensor(arr, requires_grad=True))
    adam = None
    if header["adam"] is not None:
        h = header["adam"]
        adam = AdamState(m={n: records[f"adam.m/{n}"] for n in expected},
                         v={n: records[f"adam.v/{n}"] for n in expected},
                         t=h["t"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"],
                         scale=h.get("scale", 1.0))
    return CheckpointBundle(params=params, config=config, vocab=vocab, adam=adam,
                            step=header["step"], epoch=header["epoch"])

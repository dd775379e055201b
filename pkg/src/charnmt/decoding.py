"""Greedy and beam-search decoding.

Both strategies are deterministic: argmax ties break toward the lowest
token id, and beam candidates are ranked by (score, ids) so equal scores
resolve lexicographically. A hard length cap derived from the source
length guarantees termination on arbitrary (e.g. untrained) models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    BOS_ID,
    EOS_ID,
    Batch,
    Vocabulary,
    decode,
    encode,
    encode_pair,
    batch_from_rows,
)
from .model import (
    AttentionMap,
    ModelConfig,
    decoder_forward,
    encoder_forward,
    extract_cross_attention,
)
from .tensor import ParameterSet, Tensor, no_grad

DECODE_STRATEGIES = ("greedy", "beam")


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    beam_size: int = 1
    max_len_ratio: float = 3.0    # cap = ratio * source length + 10
    length_penalty: float = 0.0   # score = logP / length^penalty

    def __post_init__(self):
        if self.strategy not in DECODE_STRATEGIES:
            raise ValueError(f"strategy must be one of {DECODE_STRATEGIES}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.strategy == "beam" and self.beam_size < 2:
            raise ValueError("beam strategy requires beam_size >= 2")
        if self.max_len_ratio <= 0:
            raise ValueError("max_len_ratio must be positive")
        if self.length_penalty < 0:
            raise ValueError("length_penalty must be >= 0")


def _length_cap(src_len: int, cfg: DecodeConfig, config: ModelConfig) -> int:
    cap = int(cfg.max_len_ratio * src_len) + 10
    return max(1, min(cap, config.max_len - 1))


def _gen_batch(src_ids: np.ndarray, src_mask: np.ndarray, tgt_in: np.ndarray) -> Batch:
    mask = np.ones_like(tgt_in, dtype=bool)
    return Batch(src_ids, tgt_in, tgt_in, src_mask, mask)


def _src_rows(srcs: list[str], vocab: Vocabulary) -> list[list[int]]:
    return [encode(s, vocab) + [EOS_ID] for s in srcs]


def greedy_decode_batch(params: ParameterSet, config: ModelConfig, srcs: list[str],
                        vocab: Vocabulary, cfg: DecodeConfig | None = None) -> list[str]:
    """Greedy-decode many sources at once; equivalent to sentence-by-sentence
    decoding because padded positions are masked out of every sub-layer."""
    cfg = cfg if cfg is not None else DecodeConfig()
    if not srcs:
        return []
    rows = _src_rows(srcs, vocab)
    caps = np.asarray([_length_cap(len(r), cfg, config) for r in rows])
    b, t_s = len(rows), max(len(r) for r in rows)
    src = np.zeros((b, t_s), dtype=np.int64)
    src_mask = np.zeros((b, t_s), dtype=bool)
    for i, r in enumerate(rows):
        src[i, :len(r)] = r
        src_mask[i, :len(r)] = True
    with no_grad():
        enc_out = encoder_forward(_gen_batch(src, src_mask, np.full((b, 1), BOS_ID)),
                                  params, config)
        gen = np.zeros((b, 0), dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for step in range(int(caps.max())):
            tgt_in = np.concatenate([np.full((b, 1), BOS_ID, dtype=np.int64), gen], axis=1)
            batch = _gen_batch(src, src_mask, tgt_in)
            logits, _ = decoder_forward(batch, enc_out, params, config)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            gen = np.concatenate([gen, nxt[:, None]], axis=1)
            done |= (nxt == EOS_ID) | (step + 1 >= caps)
            if done.all():
                break
    outs = []
    for i in range(b):
        ids = gen[i, :caps[i]].tolist()
        if EOS_ID in ids:
            ids = ids[:ids.index(EOS_ID)]
        outs.append(decode(ids, vocab))
    return outs


def greedy_decode(params: ParameterSet, config: ModelConfig, src: str,
                  vocab: Vocabulary, cfg: DecodeConfig | None = None
                  ) -> tuple[str, list[AttentionMap]]:
    """Decode one sentence by stepwise argmax (ties to the lowest id).

    The returned attention maps are the last-layer, head-averaged
    cross-attention of the model teacher-forced on its own output, so the
    rows cover every produced position, the EOS-producing one included.
    """
    out = greedy_decode_batch(params, config, [src], vocab, cfg)[0]
    batch = batch_from_rows([encode_pair(src, out, vocab)])
    maps = extract_cross_attention(batch, params, config)
    return out, maps


def beam_decode(params: ParameterSet, config: ModelConfig, src: str,
                vocab: Vocabulary, cfg: DecodeConfig | None = None) -> str:
    """Length-normalized beam search over one sentence.

    Hypotheses are scored by logP / length^penalty; finished hypotheses
    keep competing for beam slots with frozen scores. beam_size=1
    reproduces the greedy output exactly.
    """
    cfg = cfg if cfg is not None else DecodeConfig(strategy="beam", beam_size=4)
    src_ids = _src_rows([src], vocab)[0]
    cap = _length_cap(len(src_ids), cfg, config)
    src_row = np.asarray([src_ids], dtype=np.int64)
    src_mask = np.ones((1, len(src_ids)), dtype=bool)

    def score(logp: float, ids: tuple[int, ...]) -> float:
        return logp / (len(ids) ** cfg.length_penalty) if ids else logp

    with no_grad():
        enc_out = encoder_forward(_gen_batch(src_row, src_mask, np.full((1, 1), BOS_ID)),
                                  params, config)
        hyps: list[tuple[tuple[int, ...], float, bool]] = [((), 0.0, False)]
        while True:
            live = [h for h in hyps if not h[2]]
            if not live:
                break
            b = len(live)
            tgt_in = np.asarray([(BOS_ID,) + ids for ids, _, _ in live], dtype=np.int64)
            enc_rep = Tensor(np.repeat(enc_out.data, b, axis=0))
            batch = _gen_batch(np.repeat(src_row, b, axis=0),
                               np.repeat(src_mask, b, axis=0), tgt_in)
            logits, _ = decoder_forward(batch, enc_rep, params, config)
            last = logits.data[:, -1, :]
            last = last - last.max(axis=-1, keepdims=True)
            logp_tok = last - np.log(np.exp(last).sum(axis=-1, keepdims=True))
            candidates = [h for h in hyps if h[2]]
            for row, (ids, logp, _) in enumerate(live):
                for tok in range(logp_tok.shape[1]):
                    new_ids = ids + (tok,)
                    new_logp = logp + float(logp_tok[row, tok])
                    finished = tok == EOS_ID or len(new_ids) >= cap
                    candidates.append((new_ids, new_logp, finished))
            candidates.sort(key=lambda h: (-score(h[1], h[0]), h[0]))
            hyps = candidates[:cfg.beam_size]
    best_ids, _, _ = min(hyps, key=lambda h: (-score(h[1], h[0]), h[0]))
    ids = list(best_ids)
    if EOS_ID in ids:
        ids = ids[:ids.index(EOS_ID)]
    return decode(ids, vocab)

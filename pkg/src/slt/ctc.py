"""Connectionist temporal classification.

Blank is column 0; gloss ids run 1..K. All dynamic programming happens in
log space on numpy arrays. ``CTCLoss`` wraps the forward-backward pass as a
torch autograd function so the visual encoder can be trained with it.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch

from .errors import InfeasibleTargetError, VocabularyError

BLANK = 0
NEG_INF = -np.inf


@dataclass
class GlossVocab:
    """Gloss labels; id 0 is the CTC blank, glosses are 1..K."""

    labels: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise VocabularyError("duplicate gloss labels")
        self.index = {g: i + 1 for i, g in enumerate(self.labels)}

    @property
    def size(self) -> int:
        return len(self.labels)

    def encode(self, glosses: Sequence[str]) -> list[int]:
        try:
            return [self.index[g] for g in glosses]
        except KeyError as e:
            raise VocabularyError(f"unknown gloss {e.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if not 1 <= i <= self.size:
                raise VocabularyError(f"gloss id {i} outside 1..{self.size}")
            out.append(self.labels[i - 1])
        return out

    @classmethod
    def from_sequences(cls, sequences) -> "GlossVocab":
        return cls(sorted({g for seq in sequences for g in seq}))


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != BLANK:
            out.append(int(p))
        prev = p
    return tuple(out)


def _check_target(target: Sequence[int], n_classes: int) -> np.ndarray:
    tgt = np.asarray(target, dtype=np.int64).reshape(-1)
    if tgt.size and (tgt.min() < 1 or tgt.max() >= n_classes):
        raise VocabularyError(f"target ids must lie in 1..{n_classes - 1}, got {tgt.tolist()}")
    return tgt


def _extend(tgt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved target and mask of states allowed to skip a blank."""
    ext = np.zeros(2 * len(tgt) + 1, dtype=np.int64)
    ext[1::2] = tgt
    skip = np.zeros(len(ext), dtype=bool)
    skip[3::2] = tgt[1:] != tgt[:-1]
    return ext, skip


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def _forward_backward(logp: np.ndarray, tgt: np.ndarray):
    """Log alpha and beta over the extended target.

    alpha[t, s] includes the emission at t; beta[t, s] covers frames after t
    only, so alpha[t] + beta[t] log-sums to log p(target) for every t.
    """
    n_frames = logp.shape[0]
    ext, skip = _extend(tgt)
    n_states = len(ext)
    emit = logp[:, ext]
    alpha = np.full((n_frames, n_states), NEG_INF)
    beta = np.full((n_frames, n_states), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    beta[-1, -1] = 0.0
    if n_states > 1:
        beta[-1, -2] = 0.0
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    return ext, alpha, beta


def _ctc_nll_logp(logp: np.ndarray, tgt: np.ndarray) -> float:
    if logp.shape[0] == 0:
        return 0.0 if tgt.size == 0 else math.inf
    ext, alpha, _ = _forward_backward(logp, tgt)
    tail = alpha[-1, -2:] if len(ext) > 1 else alpha[-1, -1:]
    ll = np.logaddexp.reduce(tail)
    return -float(ll)


def ctc_forward(probs, target: Sequence[int]) -> float:
    """-ln p(target | posterior); +inf when no alignment path exists.

    ``probs`` is a (T', K+1) matrix of per-frame probabilities with blank in
    column 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"posterior must be 2-D, got shape {probs.shape}")
    tgt = _check_target(target, probs.shape[1])
    return _ctc_nll_logp(_log(probs), tgt)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ctc_loss_and_grad(logits, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Loss on softmax(logits) and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    logp = _log_softmax_np(logits)
    tgt = _check_target(target, logits.shape[1])
    if logits.shape[0] == 0 and tgt.size == 0:
        return 0.0, np.zeros_like(logits)
    if logits.shape[0] == 0:
        raise InfeasibleTargetError("target is non-empty but there are no frames")
    ext, alpha, beta = _forward_backward(logp, tgt)
    tail = alpha[-1, -2:] if len(ext) > 1 else alpha[-1, -1:]
    ll = np.logaddexp.reduce(tail)
    if not np.isfinite(ll):
        raise InfeasibleTargetError(
            f"no alignment of {len(tgt)} glosses into {logits.shape[0]} frames"
        )
    occupancy = np.exp(alpha + beta - ll)
    posterior = np.zeros_like(logits)
    for s, label in enumerate(ext):
        posterior[:, label] += occupancy[:, s]
    return -float(ll), np.exp(logp) - posterior


def ctc_gradient(logits, target: Sequence[int]) -> np.ndarray:
    """d ctc_forward(softmax(logits), target) / d logits."""
    return ctc_loss_and_grad(logits, target)[1]


def is_feasible(n_frames: int, target: Sequence[int]) -> bool:
    tgt = list(target)
    repeats = sum(1 for a, b in zip(tgt, tgt[1:]) if a == b)
    return n_frames >= len(tgt) + repeats


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, target):
        loss, grad = ctc_loss_and_grad(logits.detach().cpu().numpy(), target)
        ctx.save_for_backward(torch.from_numpy(grad).to(logits))
        return logits.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None


def ctc_loss(logits: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """Differentiable CTC negative log likelihood of one (T', K+1) logit matrix."""
    return _CTCFunction.apply(logits, [int(t) for t in target])


def ctc_greedy_decode(probs) -> list[int]:
    probs = np.asarray(probs)
    if probs.shape[0] == 0:
        return []
    return list(collapse(np.argmax(probs, axis=1)))


def ctc_beam_decode_scored(probs, width: int) -> tuple[list[int], float]:
    """Prefix beam search; returns the best surviving label sequence and its log mass."""
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    logp = _log(np.asarray(probs, dtype=np.float64))
    # prefix -> (log mass of paths ending in blank, ending in a label)
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    n_classes = logp.shape[1] if logp.ndim == 2 else 1
    for t in range(logp.shape[0]):
        row = logp[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def add(prefix, pb=NEG_INF, pnb=NEG_INF):
            cur = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            cur[0] = np.logaddexp(cur[0], pb)
            cur[1] = np.logaddexp(cur[1], pnb)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            add(prefix, pb=total + row[BLANK])
            last = prefix[-1] if prefix else None
            for c in range(1, n_classes):
                if row[c] == NEG_INF:
                    continue
                if c == last:
                    add(prefix, pnb=pnb + row[c])
                    add(prefix + (c,), pnb=pb + row[c])
                else:
                    add(prefix + (c,), pnb=total + row[c])
        ranked = sorted(
            nxt.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0])
        )
        beams = {k: (v[0], v[1]) for k, v in ranked[:width]}
    best, (pb, pnb) = min(
        beams.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0])
    )
    return list(best), float(np.logaddexp(pb, pnb))


def ctc_beam_decode(probs, width: int) -> list[int]:
    return ctc_beam_decode_scored(probs, width)[0]


MAX_ORACLE_FRAMES = 8
MAX_ORACLE_GLOSSES = 4


@lru_cache(maxsize=64)
def _enumerate(n_frames: int, n_classes: int):
    paths = np.array(list(itertools.product(range(n_classes), repeat=n_frames)), dtype=np.int64)
    paths = paths.reshape(-1, n_frames)
    # base-n_classes code of the collapsed sequence; labels are >= 1 so codes are unique
    key = np.zeros(len(paths), dtype=np.int64)
    prev = np.full(len(paths), -1)
    for t in range(n_frames):
        col = paths[:, t]
        emit = (col != BLANK) & (col != prev)
        key = np.where(emit, key * n_classes + col, key)
        prev = col
    keys, inverse = np.unique(key, return_inverse=True)
    return paths, keys, inverse.reshape(-1)


def _decode_key(key: int, n_classes: int) -> tuple[int, ...]:
    out = []
    while key:
        key, d = divmod(int(key), n_classes)
        out.append(d)
    return tuple(reversed(out))


def ctc_brute_force_marginals(probs) -> dict[tuple[int, ...], float]:
    """Probability of every label sequence by enumerating all (K+1)^T' paths."""
    probs = np.asarray(probs, dtype=np.float64)
    n_frames, n_classes = probs.shape
    if n_frames > MAX_ORACLE_FRAMES or n_classes - 1 > MAX_ORACLE_GLOSSES:
        raise ValueError(
            f"enumeration refused for T'={n_frames}, K={n_classes - 1} "
            f"(limits T'<={MAX_ORACLE_FRAMES}, K<={MAX_ORACLE_GLOSSES})"
        )
    if n_frames == 0:
        return {(): 1.0}
    paths, keys, inverse = _enumerate(n_frames, n_classes)
    path_prob = np.ones(len(paths))
    for t in range(n_frames):
        path_prob *= probs[t, paths[:, t]]
    mass = np.bincount(inverse, weights=path_prob, minlength=len(keys))
    return {_decode_key(k, n_classes): float(m) for k, m in zip(keys, mass)}


def ctc_brute_force_oracle(probs) -> tuple[list[int], float, float]:
    """(MAP label sequence, its marginal probability, total mass over all sequences)."""
    marg = ctc_brute_force_marginals(probs)
    best = min(marg.items(), key=lambda kv: (-kv[1], kv[0]))
    return list(best[0]), best[1], math.fsum(marg.values())

"""Gloss2Text translation network.

A pre-norm encoder-decoder transformer with learned absolute positions,
a whitespace tokenizer and beam search with length normalization.

The source embedding table is indexed by CTC gloss ids (row 0 is the blank
and never fed as a token) followed by one row for the language-id symbol,
which is appended as the end-of-source marker. The decoder starts from the
language-id symbol of the text vocabulary.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .errors import (
    CheckpointRequiredError,
    ConfigurationError,
    EmptySequenceError,
    VocabularyError,
)

PAD, UNK, EOS = "<pad>", "<unk>", "</s>"


class TextVocab:
    """Token <-> id map. Specials come first: PAD, UNK, EOS, then language ids."""

    def __init__(self, tokens: Sequence[str], langs: Sequence[str] = ("de_DE",)):
        self.langs = list(langs)
        specials = [PAD, UNK, EOS] + self.langs
        self.itos = specials + [t for t in tokens if t not in specials]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.n_special = len(specials)

    pad_id = 0
    unk_id = 1
    eos_id = 2

    def lang_id(self, lang: str | None = None) -> int:
        lang = self.langs[0] if lang is None else lang
        try:
            return self.stoi[lang]
        except KeyError:
            raise VocabularyError(f"unknown language id {lang!r}") from None

    def __len__(self):
        return len(self.itos)

    def tokenize(self, raw: str) -> list[int]:
        return [self.stoi.get(w, self.unk_id) for w in raw.split()]

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids if i >= self.n_special)

    @classmethod
    def build(cls, sentences: Sequence[str], langs=("de_DE",)) -> "TextVocab":
        return cls(sorted({w for s in sentences for w in s.split()}), langs)

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path, n_langs: int = 1) -> "TextVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:3] != [PAD, UNK, EOS]:
            raise VocabularyError(f"{path}: vocabulary must start with {PAD}, {UNK}, {EOS}")
        return cls(lines[3 + n_langs :], lines[3 : 3 + n_langs])

    def to_dict(self):
        return {"tokens": self.itos[self.n_special :], "langs": self.langs}

    @classmethod
    def from_dict(cls, d) -> "TextVocab":
        return cls(d["tokens"], d["langs"])


@dataclass
class TranslationConfig:
    layers_enc: int = 2
    layers_dec: int = 2
    d_model: int = 128
    heads: int = 4
    d_ff: int = 512
    dropout: float = 0.3
    label_smoothing: float = 0.2
    max_len: int = 64
    num_glosses: int = 20
    tgt_vocab_size: int = 0
    freeze_embeddings: bool = False

    def validate(self):
        if self.d_model % self.heads:
            raise ConfigurationError(
                f"d_model {self.d_model} is not divisible by {self.heads} heads"
            )
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError("label_smoothing must be in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")

    def to_dict(self):
        return asdict(self)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d_head).transpose(1, 2)

    def forward(self, query, key, allowed):
        """``allowed`` broadcasts to (B, 1, Lq, Lk); False entries are masked out."""
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(key))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~allowed, float("-inf"))
        out = nx.softmax(scores) @ v
        b, _, n, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(b, n, -1))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.fc2(nx.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: TranslationConfig):
        super().__init__()
        self.attn_norm = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.ff_norm = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, allowed):
        h = self.attn_norm(x)
        x = x + self.drop(self.attn(h, h, allowed))
        return x + self.drop(self.ff(self.ff_norm(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: TranslationConfig):
        super().__init__()
        self.self_norm = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.cross_norm = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.ff_norm = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, self_allowed, cross_allowed):
        h = self.self_norm(y)
        y = y + self.drop(self.self_attn(h, h, self_allowed))
        y = y + self.drop(self.cross_attn(self.cross_norm(y), memory, cross_allowed))
        return y + self.drop(self.ff(self.ff_norm(y)))


class TranslationModel(nn.Module):
    def __init__(self, cfg: TranslationConfig, vocab: TextVocab):
        super().__init__()
        cfg.tgt_vocab_size = len(vocab)
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        d = cfg.d_model
        # rows: blank, glosses 1..K, language id
        self.src_embed = nn.Embedding(cfg.num_glosses + 2, d)
        self.tgt_embed = nn.Embedding(len(vocab), d)
        self.enc_pos = nn.Embedding(cfg.max_len, d)
        self.dec_pos = nn.Embedding(cfg.max_len, d)
        for emb in (self.src_embed, self.tgt_embed, self.enc_pos, self.dec_pos):
            nn.init.normal_(emb.weight, std=d**-0.5)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers_enc))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers_dec))
        self.enc_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)
        self.out_proj = nn.Linear(d, len(vocab))
        self.trained = False
        if cfg.freeze_embeddings:
            self.freeze_embeddings()

    @property
    def src_lang_index(self) -> int:
        return self.cfg.num_glosses + 1

    def freeze_embeddings(self):
        self.cfg.freeze_embeddings = True
        self.src_embed.weight.requires_grad_(False)
        self.tgt_embed.weight.requires_grad_(False)

    def import_embeddings(self, source=None, target=None, freeze: bool = True):
        """Load externally produced embedding tables, frozen by default."""
        with torch.no_grad():
            for table, emb in ((source, self.src_embed), (target, self.tgt_embed)):
                if table is None:
                    continue
                table = torch.as_tensor(np.asarray(table), dtype=nx.DTYPE)
                if table.shape != emb.weight.shape:
                    raise ConfigurationError(
                        f"embedding table {tuple(table.shape)} does not fit {tuple(emb.weight.shape)}"
                    )
                emb.weight.copy_(table)
        if freeze:
            self.freeze_embeddings()

    # -- source side -----------------------------------------------------------------

    def embed_glosses(self, gloss_ids: Sequence[Sequence[int]]):
        """Padded (B, L, d) gloss embeddings and lengths, without positions."""
        lengths = torch.tensor([len(g) for g in gloss_ids])
        ids = torch.zeros(len(gloss_ids), max(int(lengths.max()), 1), dtype=torch.long)
        for i, g in enumerate(gloss_ids):
            ids[i, : len(g)] = torch.as_tensor(list(g), dtype=torch.long)
        return self.src_embed(ids), lengths

    def append_lang(self, emb: torch.Tensor, lengths: torch.Tensor):
        """Place the language-id embedding right after each sequence's last item."""
        b, n, d = emb.shape
        out = torch.cat([emb, emb.new_zeros(b, 1, d)], dim=1)
        lang = self.src_embed.weight[self.src_lang_index]
        pos = torch.zeros(b, n + 1, 1)
        pos[torch.arange(b), lengths] = 1.0
        keep = (torch.arange(n + 1)[None, :] < lengths[:, None]).to(emb.dtype)[..., None]
        return out * keep + pos * lang, lengths + 1

    def encode(self, src_emb: torch.Tensor, src_mask: torch.Tensor) -> torch.Tensor:
        """Encoder stack over (B, L, d) inputs; positions are added here."""
        if src_emb.ndim == 2:
            return self.encode(src_emb[None], src_mask[None])[0]
        n = src_emb.shape[1]
        if n == 0:
            raise EmptySequenceError("encoder input is empty")
        if n > self.cfg.max_len:
            raise ConfigurationError(f"source length {n} exceeds max_len {self.cfg.max_len}")
        x = self.drop(src_emb + self.enc_pos.weight[:n])
        allowed = src_mask[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, allowed)
        return self.enc_norm(x)

    def prepare_source(self, emb: torch.Tensor, lengths: torch.Tensor):
        """Append language id, build mask, run the encoder."""
        emb, lengths = self.append_lang(emb, lengths)
        mask = torch.arange(emb.shape[1])[None, :] < lengths[:, None]
        return self.encode(emb, mask), mask

    # -- target side -----------------------------------------------------------------

    def decode(self, tgt_in: torch.Tensor, memory: torch.Tensor, src_mask: torch.Tensor):
        """Logits (B, U, V) for decoder input ids (B, U); causal and padding masked."""
        u = tgt_in.shape[1]
        if u > self.cfg.max_len:
            raise ConfigurationError(f"target length {u} exceeds max_len {self.cfg.max_len}")
        y = self.drop(self.tgt_embed(tgt_in) + self.dec_pos.weight[:u])
        causal = torch.tril(torch.ones(u, u, dtype=torch.bool))
        self_allowed = causal[None, None] & (tgt_in != TextVocab.pad_id)[:, None, None, :]
        # the first position (language id) is never padding, so no row is fully masked
        cross_allowed = src_mask[:, None, None, :]
        for layer in self.decoder:
            y = layer(y, memory, self_allowed, cross_allowed)
        return self.out_proj(self.dec_norm(y))

    def teacher_forcing(self, texts: Sequence[Sequence[int]]):
        """Decoder inputs (lang + s) and targets (s + EOS), padded."""
        lang = self.vocab.lang_id()
        u = max(len(t) for t in texts) + 1
        tgt_in = torch.full((len(texts), u), TextVocab.pad_id, dtype=torch.long)
        tgt_out = torch.full((len(texts), u), TextVocab.pad_id, dtype=torch.long)
        for i, t in enumerate(texts):
            if len(t) == 0:
                raise ValueError(f"sample {i} has an empty target sentence")
            tgt_in[i, : len(t) + 1] = torch.tensor([lang] + list(t))
            tgt_out[i, : len(t) + 1] = torch.tensor(list(t) + [TextVocab.eos_id])
        return tgt_in, tgt_out

    def loss_from_source(self, emb, lengths, texts, eps: float | None = None):
        memory, mask = self.prepare_source(emb, lengths)
        tgt_in, tgt_out = self.teacher_forcing(texts)
        logits = self.decode(tgt_in, memory, mask)
        eps = self.cfg.label_smoothing if eps is None else eps
        return nx.cross_entropy_label_smoothed(
            logits.reshape(-1, logits.shape[-1]), tgt_out.reshape(-1), eps, TextVocab.pad_id
        )

    def gloss2text_loss(self, gloss_ids, texts, eps: float | None = None):
        emb, lengths = self.embed_glosses(gloss_ids)
        return self.loss_from_source(emb, lengths, texts, eps)

    # -- inference -------------------------------------------------------------------

    def _generation_mask(self) -> np.ndarray:
        banned = np.zeros(len(self.vocab), dtype=bool)
        banned[: self.vocab.n_special] = True
        banned[TextVocab.eos_id] = False
        return banned

    @torch.no_grad()
    def translate_source(self, emb, lengths, width: int = 4, alpha: float = 1.0, max_len=None):
        """Token id lists for a batch of source embeddings (no positions yet).

        Generation stops at ``max_len`` tokens, by default 2 * source length + 10.
        """
        was = self.training
        self.eval()
        try:
            memory, mask = self.prepare_source(emb, lengths)
            if max_len is None:
                max_len = min(self.cfg.max_len - 1, 2 * int(lengths.max()) + 10)
            banned = self._generation_mask()
            if width == 1:
                return self._greedy(memory, mask, max_len, banned)
            out = []
            for i in range(memory.shape[0]):
                mem, m = memory[i : i + 1], mask[i : i + 1]

                def step(prefixes, mem=mem, m=m):
                    ids = torch.tensor(prefixes, dtype=torch.long)
                    logits = self.decode(ids, mem.expand(len(prefixes), -1, -1), m.expand(len(prefixes), -1))
                    lp = nx.log_softmax(logits[:, -1]).numpy().copy()
                    lp[:, banned] = -np.inf
                    return lp

                tokens, _ = beam_search(
                    step, self.vocab.lang_id(), TextVocab.eos_id, width, alpha, max_len
                )
                out.append(tokens)
            return out
        finally:
            self.train(was)

    def _greedy(self, memory, mask, max_len, banned):
        b = memory.shape[0]
        ids = torch.full((b, 1), self.vocab.lang_id(), dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        ban = torch.as_tensor(banned)
        for _ in range(max_len):
            logits = self.decode(ids, memory, mask)[:, -1]
            lp = nx.log_softmax(logits).masked_fill(ban, float("-inf"))
            nxt = lp.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, TextVocab.pad_id), nxt)
            ids = torch.cat([ids, nxt[:, None]], dim=1)
            done |= nxt == TextVocab.eos_id
            if bool(done.all()):
                break
        out = []
        for row in ids[:, 1:].tolist():
            toks = []
            for t in row:
                if t in (TextVocab.eos_id, TextVocab.pad_id):
                    break
                toks.append(t)
            out.append(toks)
        return out

    def gloss2text_predict(self, gloss_ids: Sequence[int], width: int = 4, alpha: float = 1.0) -> str:
        if not self.trained:
            raise CheckpointRequiredError("translation network has not been trained or loaded")
        emb, lengths = self.embed_glosses([gloss_ids])
        (tokens,) = self.translate_source(emb, lengths, width, alpha)
        return self.vocab.detokenize(tokens)


def hypothesis_score(logprob: float, length: int, alpha: float) -> float:
    """Length-normalized score: logprob / length**alpha."""
    if length == 0:
        return logprob
    return logprob / length**alpha


def beam_search(
    step: Callable[[list[list[int]]], np.ndarray],
    bos: int,
    eos: int,
    width: int = 4,
    alpha: float = 1.0,
    max_len: int = 32,
) -> tuple[list[int], float]:
    """Beam search over a next-token log-probability function.

    ``step`` maps a list of prefixes (each starting with ``bos``) to an
    (n, V) array of next-token log probabilities. At every step the ``width``
    best expansions by cumulative log probability survive; those ending in
    ``eos`` are finished. Hypotheses still open at ``max_len`` are finished
    as they are. The returned hypothesis maximizes the length-normalized
    score among all finished ones; EOS is stripped from the tokens.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    active: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        lp = step([[bos, *h] for h, _ in active])
        cands = []
        for (h, s), row in zip(active, lp):
            for v in np.flatnonzero(np.isfinite(row)):
                cands.append((h + (int(v),), s + float(row[v])))
        cands.sort(key=lambda c: (-c[1], c[0]))
        active = []
        for h, s in cands[:width]:
            (finished if h[-1] == eos else active).append((h, s))
        if not active:
            break
    finished.extend(active)
    if not finished:
        return [], 0.0
    best_h, best_s = min(
        finished, key=lambda c: (-hypothesis_score(c[1], len(c[0]), alpha), c[0])
    )
    tokens = list(best_h[:-1] if best_h and best_h[-1] == eos else best_h)
    return tokens, hypothesis_score(best_s, len(best_h), alpha)

import itertools

import numpy as np
import pytest
import torch

from slt import numerics as nx
from slt.errors import CheckpointRequiredError, ConfigurationError, EmptySequenceError, VocabularyError
from slt.translation import (
    EOS,
    PAD,
    UNK,
    TextVocab,
    TranslationConfig,
    TranslationModel,
    beam_search,
    hypothesis_score,
)

WORDS = ["heute", "nacht", "regen", "sonne", "und", "wind"]


def tiny(seed=0, num_glosses=5, **kw):
    cfg = dict(layers_enc=2, layers_dec=2, d_model=8, heads=2, d_ff=16, dropout=0.0,
               label_smoothing=0.0, max_len=16, num_glosses=num_glosses)
    cfg.update(kw)
    torch.manual_seed(seed)
    return TranslationModel(TranslationConfig(**cfg), TextVocab(WORDS))


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=nx.DTYPE)


class TestVocab:
    def test_round_trip(self):
        v = TextVocab(WORDS)
        ids = v.tokenize("heute nacht")
        assert ids == [v.stoi["heute"], v.stoi["nacht"]]
        assert v.detokenize(ids) == "heute nacht"

    def test_oov_and_empty(self):
        v = TextVocab(WORDS)
        assert v.tokenize("heute morgen") == [v.stoi["heute"], v.unk_id]
        assert v.tokenize("") == []

    def test_whitespace_normalised(self):
        v = TextVocab(WORDS)
        assert v.detokenize(v.tokenize("  heute   nacht ")) == "heute nacht"

    def test_specials_order(self):
        v = TextVocab(WORDS, langs=("de_DE", "zh_CN"))
        assert v.itos[:5] == [PAD, UNK, EOS, "de_DE", "zh_CN"]
        assert v.lang_id("zh_CN") == 4
        with pytest.raises(VocabularyError):
            v.lang_id("fr_FR")

    def test_file_round_trip(self, tmp_path):
        v = TextVocab.build(["b a", "c a"], langs=("de_DE",))
        v.save(tmp_path / "vocab.txt")
        lines = (tmp_path / "vocab.txt").read_text(encoding="utf-8").splitlines()
        assert lines == [PAD, UNK, EOS, "de_DE", "a", "b", "c"]
        assert TextVocab.load(tmp_path / "vocab.txt").itos == v.itos


class TestEncoder:
    def test_shape(self):
        m = tiny().eval()
        assert m.encode(rand(5, 8), torch.ones(5, dtype=torch.bool)).shape == (5, 8)

    def test_empty(self):
        with pytest.raises(EmptySequenceError):
            tiny().encode(torch.zeros(0, 8), torch.ones(0, dtype=torch.bool))

    def test_padded_position_is_invisible(self):
        m = tiny().eval()
        x = rand(1, 4, 8)
        base = m.encode(x, torch.ones(1, 4, dtype=torch.bool))
        padded = torch.cat([x, rand(1, 1, 8, seed=9)], dim=1)
        mask = torch.tensor([[True] * 4 + [False]])
        assert torch.allclose(m.encode(padded, mask)[:, :4], base, atol=1e-9, rtol=0)

    def test_gradient(self):
        m = tiny(seed=1).eval()
        x = rand(4, 8, seed=2)
        w = rand(4, 8, seed=3)
        mask = torch.ones(4, dtype=torch.bool)
        assert nx.finite_difference_check(lambda v: (m.encode(v, mask) * w).sum(), x.requires_grad_()) <= 1e-4
        for name, p in list(m.encoder.named_parameters())[:6]:
            err = nx.finite_difference_check(lambda _: (m.encode(x.detach(), mask) * w).sum(), p)
            assert err <= 1e-4, name

    def test_too_long(self):
        with pytest.raises(ConfigurationError):
            tiny().encode(rand(17, 8), torch.ones(17, dtype=torch.bool))


class TestDecoder:
    def test_causal(self):
        m = tiny().eval()
        memory, mask = m.prepare_source(*m.embed_glosses([[1, 2, 3]]))
        a = torch.tensor([[3, 4, 5, 6, 7]])
        b = a.clone()
        b[0, 3:] = torch.tensor([9, 8])
        la, lb = m.decode(a, memory, mask), m.decode(b, memory, mask)
        assert torch.allclose(la[:, :3], lb[:, :3], atol=1e-9, rtol=0)
        assert not torch.allclose(la[:, 3:], lb[:, 3:])

    def test_teacher_forcing_layout(self):
        m = tiny()
        tgt_in, tgt_out = m.teacher_forcing([[5, 6], [7]])
        lang = m.vocab.lang_id()
        assert tgt_in.tolist() == [[lang, 5, 6], [lang, 7, 0]]
        assert tgt_out.tolist() == [[5, 6, 2], [7, 2, 0]]

    def test_lang_id_closes_the_source(self):
        m = tiny()
        emb, lengths = m.embed_glosses([[1, 2], [3]])
        out, new_len = m.append_lang(emb, lengths)
        lang = m.src_embed.weight[m.src_lang_index]
        assert new_len.tolist() == [3, 2]
        assert torch.equal(out[0, 2], lang) and torch.equal(out[1, 1], lang)
        assert torch.count_nonzero(out[1, 2]) == 0


class TestLoss:
    def test_non_negative(self):
        m = tiny()
        for seed in range(5):
            torch.manual_seed(seed)
            assert m.gloss2text_loss([[1, 2, 3]], [[5, 6, 7]], eps=0.0).item() >= 0

    def test_peaked_decoder_gives_zero(self, monkeypatch):
        m = tiny()
        texts = [[5, 6, 7]]
        _, tgt_out = m.teacher_forcing(texts)

        def peaked(tgt_in, memory, src_mask):
            logits = torch.full((*tgt_in.shape, len(m.vocab)), -1e4)
            return logits.scatter(-1, tgt_out[..., None], 0.0)

        monkeypatch.setattr(m, "decode", peaked)
        assert m.gloss2text_loss([[1, 2]], texts, eps=0.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_empty_target(self):
        with pytest.raises(ValueError):
            tiny().gloss2text_loss([[1]], [[]])

    def test_first_steps_decrease(self):
        m = tiny(seed=2, dropout=0.3, label_smoothing=0.2)
        m.train()
        opt = torch.optim.AdamW(m.parameters(), lr=1e-3, weight_decay=1e-3)
        src, tgt = [[1, 2], [3, 4, 5], [2]], [[5, 4], [7, 6, 4, 8], [9]]
        losses = []
        for _ in range(5):
            torch.manual_seed(0)  # identical dropout masks across steps
            loss = m.gloss2text_loss(src, tgt)
            losses.append(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_memorises_single_pair(self):
        m = tiny(seed=3, d_model=16, d_ff=32)
        m.train()
        opt = torch.optim.AdamW(m.parameters(), lr=3e-3, weight_decay=0.0)
        src, tgt = [[1, 3, 2]] * 4, [[6, 5, 9, 7]] * 4
        for step in range(500):
            loss = m.gloss2text_loss(src, tgt, eps=0.0)
            if loss.item() < 0.01:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert loss.item() < 0.01, (step, loss.item())


def table_step(table):
    """Next-token log-probs looked up by prefix (BOS stripped)."""

    def step(prefixes):
        return np.stack([table[tuple(p[1:])] for p in prefixes])

    return step


def random_table(rng, vocab, max_len):
    table = {}
    for n in range(max_len):
        for prefix in itertools.product(range(vocab), repeat=n):
            r = rng.normal(size=vocab) * 2
            table[prefix] = r - np.log(np.exp(r).sum())
    return table


def exhaustive(table, eos, vocab, max_len, alpha):
    best = None
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(vocab), repeat=n):
            if eos in seq[:-1] or (n < max_len and seq[-1] != eos):
                continue
            lp = sum(table[seq[:i]][t] for i, t in enumerate(seq))
            key = (-hypothesis_score(lp, n, alpha), seq)
            best = min(best, key) if best else key
    return list(best[1][:-1] if best[1][-1] == eos else best[1]), -best[0]


class TestBeamSearch:
    def test_alpha_zero_is_raw_logprob(self):
        assert hypothesis_score(-3.5, 7, 0.0) == -3.5
        assert hypothesis_score(-3.5, 7, 1.0) == -0.5

    def test_width_validation(self):
        with pytest.raises(ValueError):
            beam_search(lambda p: np.zeros((len(p), 3)), 0, 2, 0)

    def test_width_one_is_greedy(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            table = random_table(rng, 3, 4)
            seq, greedy = [], []
            while len(greedy) < 4:
                t = int(np.argmax(table[tuple(greedy)]))
                greedy.append(t)
                if t == 2:
                    break
            tokens, _ = beam_search(table_step(table), -1, 2, 1, 1.0, 4)
            assert tokens == [t for t in greedy if t != 2]

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            table = random_table(rng, 3, 3)
            for alpha in (0.0, 1.0):
                tokens, score = beam_search(table_step(table), -1, 2, 27, alpha, 3)
                ref_tokens, ref_score = exhaustive(table, 2, 3, 3, alpha)
                assert tokens == ref_tokens
                assert score == pytest.approx(ref_score, abs=1e-12)

    def test_forced_finish_at_max_len(self):
        # EOS is never likely: the hypothesis is cut at max_len
        lp = np.log(np.array([0.05, 0.9, 0.05]))
        tokens, _ = beam_search(lambda p: np.tile(lp, (len(p), 1)), -1, 2, 2, 1.0, 5)
        assert tokens == [1] * 5


class TestTranslate:
    def test_width_one_matches_beam_search_greedy(self):
        m = tiny(seed=4).eval()
        emb, lengths = m.embed_glosses([[1, 2, 3], [4], [2, 5]])
        batched = m.translate_source(emb, lengths, width=1, max_len=8)
        memory, mask = m.prepare_source(emb, lengths)
        banned = m._generation_mask()
        for i, expected in enumerate(batched):
            def step(prefixes, i=i):
                ids = torch.tensor(prefixes)
                logits = m.decode(ids, memory[i : i + 1].expand(len(prefixes), -1, -1),
                                  mask[i : i + 1].expand(len(prefixes), -1))
                lp = nx.log_softmax(logits[:, -1]).detach().numpy().copy()
                lp[:, banned] = -np.inf
                return lp
            assert beam_search(step, m.vocab.lang_id(), 2, 1, 1.0, 8)[0] == expected

    def test_no_special_tokens_and_deterministic(self):
        m = tiny(seed=5)
        m.trained = True
        out = m.gloss2text_predict([1, 2, 3])
        assert out == m.gloss2text_predict([1, 2, 3])
        assert not set(out.split()) & {PAD, UNK, EOS, "de_DE"}

    def test_untrained_refuses(self):
        with pytest.raises(CheckpointRequiredError):
            tiny().gloss2text_predict([1])

    def test_source_padding_never_changes_translation(self):
        m = tiny(seed=6).eval()
        emb, lengths = m.embed_glosses([[1, 2]])
        wide = torch.cat([emb, m.src_embed.weight[0].expand(1, 3, -1)], dim=1)
        for w in (1, 4):
            assert m.translate_source(emb, lengths, w) == m.translate_source(wide, lengths, w)

    def test_wider_beam_never_scores_lower_on_model_inputs(self):
        m = tiny(seed=7).eval()
        rng = np.random.default_rng(7)
        for _ in range(40):
            src = [int(g) for g in rng.integers(1, 6, size=int(rng.integers(1, 5)))]
            emb, lengths = m.embed_glosses([src])
            memory, mask = m.prepare_source(emb, lengths)
            banned = m._generation_mask()

            def step(prefixes):
                logits = m.decode(torch.tensor(prefixes), memory.expand(len(prefixes), -1, -1),
                                  mask.expand(len(prefixes), -1))
                lp = nx.log_softmax(logits[:, -1]).detach().numpy().copy()
                lp[:, banned] = -np.inf
                return lp

            _, s1 = beam_search(step, m.vocab.lang_id(), 2, 1, 1.0, 10)
            _, s4 = beam_search(step, m.vocab.lang_id(), 2, 4, 1.0, 10)
            assert s4 >= s1 - 1e-12


def test_imported_embeddings_are_frozen():
    m = tiny()
    src = rand(7, 8, seed=1)
    m.import_embeddings(source=src)
    assert torch.equal(m.src_embed.weight, src) and not m.src_embed.weight.requires_grad
    with pytest.raises(ConfigurationError):
        tiny().import_embeddings(source=rand(3, 8))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TranslationModel(TranslationConfig(d_model=10, heads=4), TextVocab(WORDS))

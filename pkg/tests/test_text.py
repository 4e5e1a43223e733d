import re
from pathlib import Path

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrtext.exceptions import ContractViolation
from ehrtext.numerics import gradcheck
from ehrtext.text import (
    CLS,
    PAD,
    UNK,
    TextEncoder,
    Vocab,
    chunk,
    encode_note,
    normalize_text,
    pad_chunks,
    preprocess_note,
    strip_sections,
)

FIXTURES = Path(__file__).parent / "fixtures" / "notes"
NOTES = sorted(p.stem for p in FIXTURES.glob("*.txt"))


@pytest.mark.parametrize("name", NOTES)
class TestGolden:
    def test_strip_sections(self, name):
        raw = (FIXTURES / f"{name}.txt").read_text()
        assert strip_sections(raw) == (FIXTURES / f"{name}.stripped").read_text()

    def test_normalize(self, name):
        raw = (FIXTURES / f"{name}.txt").read_text()
        out = preprocess_note(raw)
        assert out == (FIXTURES / f"{name}.normalized").read_text()
        assert not re.search(r"[\d\W_]", out.replace(" ", ""))
        assert normalize_text(out) == out


class TestNormalize:
    def test_dates_removed_whole(self):
        for raw in ("seen 2130-04-12 ok", "seen 04/12/2130 ok", "seen 12-Apr-2130 ok",
                    "seen April 12, 2130 ok", "seen 12th April 2130 ok"):
            assert normalize_text(raw) == "seen ok"

    def test_decimal_and_grouped_numbers(self):
        assert normalize_text("wbc 12.5 plt 1,250") == "wbc plt"

    def test_punctuation_becomes_space(self):
        assert normalize_text("s/p CABG; hx-of DM") == "s p cabg hx of dm"

    def test_empty(self):
        assert normalize_text("  \n\t") == ""

    @settings(max_examples=200, deadline=None)
    @given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126)))
    def test_properties_on_ascii(self, raw):
        out = normalize_text(raw)
        assert not re.search(r"[0-9]", out)
        assert not re.search(r"[^a-z ]", out)
        assert "  " not in out and out == out.strip()
        assert normalize_text(out) == out


class TestStripSections:
    def test_case_insensitive_and_custom_headers(self):
        raw = "Plan: rest\nSOCIAL HISTORY: smoker\nExam: clear\n"
        assert strip_sections(raw, ["social history"]) == "Plan: rest\nExam: clear\n"

    def test_no_header_passthrough(self):
        raw = "free text without structure"
        assert strip_sections(raw) is raw

    def test_preamble_kept(self):
        raw = "preamble line\nName: John\nHPI: cough\n"
        assert strip_sections(raw) == "preamble line\nHPI: cough\n"


class TestVocab:
    def test_build_order_and_min_freq(self):
        v = Vocab.build(["b a a", "c b a", "d"], min_freq=2)
        assert v.tokens == ["a", "b"]
        assert v.id("a") == 3 and v.id("b") == 4 and v.id("zzz") == UNK
        assert len(v) == 5

    def test_round_trip(self, tmp_path):
        v = Vocab.build(["x y y z z z"], min_freq=1)
        v.save(tmp_path / "v.json")
        assert Vocab.load(tmp_path / "v.json") == v

    def test_gap_rejected(self):
        payload = {"entries": [{"token": "a", "id": 3, "frequency": 1},
                               {"token": "b", "id": 5, "frequency": 1}]}
        with pytest.raises(ContractViolation):
            Vocab.from_dict(payload)


class TestChunk:
    @pytest.mark.parametrize("n,expected", [(0, 1), (1, 1), (255, 1), (256, 2), (510, 2), (511, 3)])
    def test_chunk_count(self, n, expected):
        out = chunk(list(range(10, 10 + n)))
        assert out.l == expected
        assert all(c[0] == CLS and len(c) <= 256 for c in out.chunks)
        assert [t for c in out.chunks for t in c[1:]] == list(range(10, 10 + n))

    def test_pad(self):
        ids, valid = pad_chunks([[CLS, 5, 6], [CLS]])
        assert ids.tolist() == [[CLS, 5, 6], [CLS, PAD, PAD]]
        assert valid.tolist() == [[True, True, True], [True, False, False]]


def tiny_encoder(**kw):
    torch.manual_seed(0)
    args = dict(vocab_size=20, dim=16, n_layers=2, n_heads=2, ffn_dim=32, max_len=16, n_frozen=1)
    args.update(kw)
    return TextEncoder(**args).double()


class TestEncoder:
    def test_shapes_and_pooling(self):
        enc = tiny_encoder()
        note = chunk(list(range(3, 18)), chunk_size=8)
        cls = enc.cls_embeddings(note.chunks)
        assert cls.shape == (note.l, 16)
        torch.testing.assert_close(encode_note(enc, note), cls.mean(0))

    def test_padding_does_not_leak(self):
        enc = tiny_encoder()
        alone = enc.cls_embeddings([[CLS, 4, 5]])
        padded = enc.cls_embeddings([[CLS, 4, 5], [CLS, 6, 7, 8, 9, 10]])[:1]
        torch.testing.assert_close(alone, padded)

    def test_attention_rows_sum_to_one_and_ignore_pad(self):
        enc = tiny_encoder()
        w = enc.attention_weights([[CLS, 4, 5], [CLS, 6, 7, 8]])
        torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)))
        assert (w[0, :, :, 3] == 0).all()

    def test_last_layer_cls_shortcut_matches_full(self):
        enc = tiny_encoder(n_frozen=0)
        ids, valid = pad_chunks([[CLS, 4, 5, 6]])
        x = enc.token_emb(ids) + enc.pos_emb(torch.arange(4))[None]
        for layer in enc.layers:
            x = layer(x, valid)
        torch.testing.assert_close(enc.suffix_cls(enc.prefix(ids, valid), valid), enc.final_norm(x[:, 0]))

    def test_freeze_groups(self):
        enc = tiny_encoder(n_layers=4, n_frozen=2)
        frozen = enc.apply_freeze()
        assert frozen == {"embeddings", "layer_0", "layer_1"}
        groups = enc.parameter_groups()
        assert all(not p.requires_grad for p in groups["layer_1"])
        assert all(p.requires_grad for p in groups["layer_2"])

    def test_too_long_chunk(self):
        with pytest.raises(ContractViolation):
            tiny_encoder().cls_embeddings([[CLS] + [4] * 20])

    def test_gradcheck_attention_and_pooling(self):
        enc = tiny_encoder(n_frozen=0, max_len=8)
        note = chunk([4, 5, 6, 7, 8, 9, 10, 11, 12, 13], chunk_size=8)
        ids, valid = pad_chunks(note.chunks)
        x0 = (enc.token_emb(ids) + enc.pos_emb(torch.arange(ids.shape[1]))[None]).detach()

        def f(x):
            return enc.suffix_cls(x.view_as(x0), valid).mean(0).pow(2).sum()

        assert gradcheck(f, x0.flatten().clone(), coords=range(0, x0.numel(), 7)) < 1e-5

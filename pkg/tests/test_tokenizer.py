import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edlm import tokenizer as tok
from edlm.errors import ConfigError, FormatError, InputError


@pytest.fixture
def toy_vocab():
    return tok.build_vocab(["aa aa b"], target_size=10, min_freq=1)


class TestBuildVocab:
    def test_hand_enumerated_frequency_table(self, toy_vocab):
        # corpus "aa aa b": word freqs aa=2, b=1; char freqs a=4, b=1.
        for expected in ["aa", "a", "b", "##a", "##b"]:
            assert expected in toy_vocab
        assert toy_vocab.tokens[:5] == tok.SPECIALS
        # Ranked by (-freq, token): ##a/a at 4, aa at 2, ##b/b at 1.
        assert toy_vocab.tokens[5:] == ["##a", "a", "aa", "##b", "b"]

    def test_capacity_boundary(self):
        vocab = tok.build_vocab(["x y z x x y"], target_size=6, min_freq=1)
        assert len(vocab) == 6
        assert vocab.tokens[5] == "##x"  # x has top char frequency 3; '##x' < 'x'

    def test_determinism(self):
        lines = ["the quick brown fox", "the lazy dog", "quick quick"]
        v1 = tok.build_vocab(lines, target_size=40, min_freq=1)
        v2 = tok.build_vocab(lines, target_size=40, min_freq=1)
        assert v1.tokens == v2.tokens

    def test_empty_corpus(self):
        with pytest.raises(InputError):
            tok.build_vocab(["   "], target_size=10)

    def test_target_size_too_small(self):
        with pytest.raises(InputError):
            tok.build_vocab(["a"], target_size=5)

    def test_min_freq_filters(self):
        vocab = tok.build_vocab(["aa aa b"], target_size=20, min_freq=2)
        assert "aa" in vocab and "a" in vocab
        assert "b" not in vocab and "##b" not in vocab


class TestWordpieceSplit:
    def test_greedy_match_hand_trace(self):
        vocab = tok.Vocab(tok.SPECIALS + ["un", "##aff", "##able", "##a"])
        assert tok.wordpiece_split("unaffable", vocab) == ["un", "##aff", "##able"]

    def test_whole_word_hit(self, toy_vocab):
        assert tok.wordpiece_split("aa", toy_vocab) == ["aa"]

    def test_unmatchable_char(self, toy_vocab):
        assert tok.wordpiece_split("aqa", toy_vocab) == [tok.UNK]

    def test_longest_match_preferred(self):
        vocab = tok.Vocab(tok.SPECIALS + ["ab", "a", "##b", "##c"])
        assert tok.wordpiece_split("abc", vocab) == ["ab", "##c"]


class TestEncode:
    def test_empty_text(self, toy_vocab):
        seq = tok.encode("", toy_vocab, max_len=5)
        assert seq.ids.tolist() == [tok.CLS_ID, tok.SEP_ID, 0, 0, 0]
        assert seq.attention_mask.tolist() == [1, 1, 0, 0, 0]

    def test_boundary_fit_no_padding(self, toy_vocab):
        seq = tok.encode("aa b", toy_vocab, max_len=4)
        assert tok.PAD_ID not in seq.ids.tolist()
        assert seq.attention_mask.sum() == 4

    def test_hand_traced_ids(self, toy_vocab):
        seq = tok.encode("aa b", toy_vocab, max_len=6)
        aa, b = toy_vocab.id_of["aa"], toy_vocab.id_of["b"]
        assert seq.ids.tolist() == [tok.CLS_ID, aa, b, tok.SEP_ID, 0, 0]
        assert seq.segment_ids.tolist() == [0] * 6

    def test_truncation_keeps_head(self, toy_vocab):
        seq = tok.encode("b aa aa aa", toy_vocab, max_len=4)
        b = toy_vocab.id_of["b"]
        assert seq.ids.tolist()[:2] == [tok.CLS_ID, b]
        assert seq.ids.tolist()[3] == tok.SEP_ID

    def test_truncation_tail_option(self, toy_vocab):
        seq = tok.encode("b aa aa aa", toy_vocab, max_len=4)
        tail = tok.encode("b aa aa aa", toy_vocab, max_len=4, keep="tail")
        assert seq.ids.tolist() != tail.ids.tolist()
        assert tail.ids.tolist()[1] == toy_vocab.id_of["aa"]

    def test_max_len_too_small(self, toy_vocab):
        with pytest.raises(ConfigError):
            tok.encode("aa", toy_vocab, max_len=2)

    def test_unknown_keep_policy(self, toy_vocab):
        with pytest.raises(ConfigError):
            tok.encode("aa", toy_vocab, max_len=5, keep="middle")

    def test_source_spans_point_into_normalized_text(self, toy_vocab):
        seq = tok.encode("AA  b", toy_vocab, max_len=6)
        assert seq.source_span[0] == (-1, -1)
        assert seq.source_span[1] == (0, 2)
        assert seq.source_span[2] == (4, 5)


class TestDecode:
    def test_round_trip(self, toy_vocab):
        text = "aa b aa"
        assert tok.decode(tok.encode(text, toy_vocab, max_len=10).ids, toy_vocab) == text

    def test_merges_continuations(self):
        vocab = tok.Vocab(tok.SPECIALS + ["un", "##aff", "##able"])
        ids = [vocab.id_of[t] for t in ["un", "##aff", "##able"]]
        assert tok.decode(ids, vocab) == "unaffable"

    def test_specials_only(self, toy_vocab):
        assert tok.decode([tok.CLS_ID, tok.SEP_ID, tok.PAD_ID], toy_vocab) == ""

    def test_out_of_range_id(self, toy_vocab):
        with pytest.raises(InputError):
            tok.decode([999], toy_vocab)


class TestVocabFile:
    def test_save_load_round_trip(self, toy_vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        toy_vocab.save(path)
        lines = path.read_text().splitlines()
        assert lines[:5] == tok.SPECIALS
        assert tok.Vocab.load(path).tokens == toy_vocab.tokens

    def test_bad_specials_rejected(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("[PAD]\n[UNK]\nfoo\n[SEP]\n[MASK]\nword\n")
        with pytest.raises(FormatError):
            tok.Vocab.load(path)


words = st.text(alphabet="abcdef", min_size=1, max_size=8)


class TestProperties:
    @given(st.lists(words, min_size=1, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_for_in_vocab_text(self, ws):
        text = " ".join(ws)
        vocab = tok.build_vocab([text], target_size=400, min_freq=1)
        max_len = len(ws) * 9 + 2
        seq = tok.encode(text, vocab, max_len=max_len)
        assert tok.decode(seq.ids, vocab) == text
        assert len(seq.ids) == max_len
        assert seq.attention_mask.sum() == (seq.ids != tok.PAD_ID).sum()

    @given(st.lists(words, min_size=1, max_size=6), st.integers(5, 40))
    @settings(max_examples=40, deadline=None)
    def test_no_unk_when_all_chars_known(self, ws, max_len):
        text = " ".join(ws)
        vocab = tok.build_vocab([text], target_size=500, min_freq=1)
        seq = tok.encode(text, vocab, max_len=max_len)
        assert tok.UNK_ID not in seq.ids.tolist()

    @given(words)
    @settings(max_examples=60, deadline=None)
    def test_split_deterministic(self, w):
        vocab = tok.build_vocab(["ab cd ef fa"], target_size=30)
        assert tok.wordpiece_split(w, vocab) == tok.wordpiece_split(w, vocab)

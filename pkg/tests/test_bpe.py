import pytest
from hypothesis import given, strategies as st

from treeattn.bpe import BPE, join_pieces, learn_bpe
from treeattn.errors import DataError

WORDS = ["low"] * 5 + ["lower"] * 2 + ["newest"] * 6 + ["widest"] * 3


def test_learned_merges():
    merges = learn_bpe(WORDS, 4)
    assert merges[0] == ("e", "s")
    assert merges[:3] == [("e", "s"), ("es", "t</w>"), ("l", "o")]


def test_segmentation_markers():
    bpe = BPE(learn_bpe(WORDS, 10))
    assert bpe("low") == ["low"]
    pieces = bpe("lowest")
    assert pieces[-1] == "est" and all(p.endswith("@@") for p in pieces[:-1])
    assert bpe("q") == ["q"]


def test_codes_round_trip(tmp_path):
    bpe = BPE(learn_bpe(WORDS, 6))
    p = tmp_path / "codes"
    p.write_text(bpe.dumps())
    assert BPE.load(p).merges == bpe.merges


def test_bad_codes():
    with pytest.raises(DataError):
        BPE.from_codes("a b c\n")
    with pytest.raises(DataError):
        BPE([])("")


@given(st.lists(st.text("abcdef", min_size=1, max_size=8), min_size=1, max_size=6), st.integers(0, 15))
def test_join_inverts_split(words, k):
    bpe = BPE(learn_bpe(words, k))
    pieces = [p for w in words for p in bpe(w)]
    assert join_pieces(pieces) == words

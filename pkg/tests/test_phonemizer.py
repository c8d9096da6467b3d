import logging

import pytest
from hypothesis import given, strategies as st

from streamtts.errors import ParseError
from streamtts.phonemizer import (INVENTORY, PAD, WORD_BOUNDARY, default_lexicon, load_lexicon,
                                  normalize_word, phonemize_text, phonemize_word)


@pytest.fixture(scope="module")
def lex():
    return default_lexicon()


def test_inventory_reserved_ids():
    assert INVENTORY[PAD] == "<pad>" and INVENTORY[WORD_BOUNDARY] == "<wb>"
    assert len(set(INVENTORY)) == len(INVENTORY)


def test_parse_single_entry(tmp_path):
    p = tmp_path / "lex.tsv"
    p.write_text("# comment\ncat\tK AE T\n", encoding="utf-8")
    lex = load_lexicon(p)
    assert lex.symbols(lex.entries["cat"]) == ["K", "AE", "T"]


def test_empty_file_gives_fallback_only(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("", encoding="utf-8")
    lex = load_lexicon(p)
    assert len(lex) == 0
    assert lex.symbols(phonemize_word("cat", lex)) == ["K", "AE", "T"]


def test_duplicate_keeps_last(tmp_path, caplog):
    p = tmp_path / "dup.tsv"
    p.write_text("a\tAH\na\tEY\n", encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        lex = load_lexicon(p)
    assert lex.symbols(lex.entries["a"]) == ["EY"]
    assert "duplicate" in caplog.text


def test_unknown_phoneme_names_line(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("ok\tK\nbad\tK QQ\n", encoding="utf-8")
    with pytest.raises(ParseError, match=":2:"):
        load_lexicon(p)


def test_reserved_symbols_rejected(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("x\t<pad>\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_lexicon(p)


def test_lexicon_hit_with_punctuation(lex):
    assert lex.symbols(phonemize_word("Cat,", lex)) == ["K", "AE", "T"]


def test_letter_fallback(lex):
    assert "zzq" not in lex
    assert lex.symbols(phonemize_word("zzq", lex)) == ["Z", "Z", "K"]


def test_no_letters_is_empty(lex):
    assert phonemize_word("\u2014", lex) == []
    assert phonemize_word("...", lex) == []


def test_digits_spelled_out(lex):
    assert phonemize_word("2", lex) == phonemize_word("two", lex)


def test_apostrophe_kept(lex):
    assert normalize_word("Don't!") == "don't"


@given(st.lists(st.text(alphabet="abcdefghijklmnopqrstuvwxyz'0123456789,.!", min_size=1, max_size=8),
                min_size=1, max_size=6))
def test_stream_order_preserved(words):
    lex = default_lexicon()
    per_word = [p for w in words for p in phonemize_word(w, lex)]
    assert per_word == phonemize_text(" ".join(words), lex)
    assert per_word == [p for w in words for p in phonemize_word(w, lex)]


@given(st.text(min_size=1, max_size=12))
def test_never_empty_with_a_letter(word):
    lex = default_lexicon()
    out = phonemize_word(word, lex)
    if any(c.isalnum() for c in normalize_word(word)):
        assert out and all(2 <= p < len(INVENTORY) for p in out)

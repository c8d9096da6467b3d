"""Word-level grapheme-to-phoneme conversion: lexicon lookup with a letter fallback."""
from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ParseError

logger = logging.getLogger(__name__)

PAD = 0
WORD_BOUNDARY = 1

# Reserved symbols first; ids are dense from 0.
INVENTORY: tuple[str, ...] = (
    "<pad>", "<wb>",
    "AA", "AE", "AH", "AO", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "UW",
    "B", "D", "F", "G", "HH", "JH", "K", "L", "M", "N", "P", "R", "S", "T",
    "V", "W", "Y", "Z",
)

LETTER_FALLBACK: dict[str, tuple[str, ...]] = {
    "a": ("AE",), "b": ("B",), "c": ("K",), "d": ("D",), "e": ("EH",),
    "f": ("F",), "g": ("G",), "h": ("HH",), "i": ("IH",), "j": ("JH",),
    "k": ("K",), "l": ("L",), "m": ("M",), "n": ("N",), "o": ("AA",),
    "p": ("P",), "q": ("K",), "r": ("R",), "s": ("S",), "t": ("T",),
    "u": ("AH",), "v": ("V",), "w": ("W",), "x": ("K", "S"), "y": ("Y",),
    "z": ("Z",),
}

DIGIT_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")

_KEEP = re.compile(r"[^a-z0-9']")


@dataclass
class Lexicon:
    inventory: tuple[str, ...] = INVENTORY
    entries: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {p: i for i, p in enumerate(self.inventory)}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    @property
    def num_phonemes(self) -> int:
        return len(self.inventory)

    def ids(self, symbols) -> list[int]:
        return [self._index[s] for s in symbols]

    def symbols(self, ids) -> list[str]:
        return [self.inventory[i] for i in ids]

    def words(self) -> list[str]:
        return sorted(self.entries)


def load_lexicon(path, inventory: tuple[str, ...] = INVENTORY) -> Lexicon:
    """Parse a ``word<TAB>PH1 PH2 ...`` file; ``#`` starts a comment line."""
    lex = Lexicon(inventory=inventory)
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "\t" not in line:
            raise ParseError(f"{path}:{lineno}: expected word<TAB>phonemes")
        word, pron = line.split("\t", 1)
        word = word.strip().lower()
        phones = pron.split()
        unknown = [p for p in phones if p not in lex._index or lex._index[p] < 2]
        if unknown or not phones:
            raise ParseError(f"{path}:{lineno}: unknown phoneme(s) {unknown or pron!r}")
        if word in lex.entries:
            logger.warning("%s:%d: duplicate entry for %r, keeping the later one", path, lineno, word)
        lex.entries[word] = lex.ids(phones)
    return lex


def default_lexicon() -> Lexicon:
    with resources.as_file(resources.files("streamtts") / "data" / "lexicon.tsv") as p:
        return load_lexicon(p)


def normalize_word(word: str) -> str:
    s = unicodedata.normalize("NFKD", word.lower())
    s = "".join(c for c in s if not unicodedata.combining(c))
    return _KEEP.sub("", s)


def phonemize_word(word: str, lex: Lexicon) -> list[int]:
    """Phoneme ids for one word; empty when nothing pronounceable remains."""
    w = normalize_word(word)
    if not any(c.isalnum() for c in w):
        return []
    if w in lex.entries:
        return list(lex.entries[w])
    out: list[int] = []
    for c in w:
        if c.isdigit():
            spelled = DIGIT_WORDS[int(c)]
            out.extend(lex.entries.get(spelled) or _fallback(spelled, lex))
        elif c != "'":
            out.extend(lex.ids(LETTER_FALLBACK[c]))
    return out


def _fallback(word: str, lex: Lexicon) -> list[int]:
    return [i for c in word for i in lex.ids(LETTER_FALLBACK[c])]


def phonemize_text(text: str, lex: Lexicon) -> list[int]:
    """Whitespace-split the text and phonemize word by word."""
    return [p for w in text.split() for p in phonemize_word(w, lex)]

"""Joint byte-pair encoding: learn merges over both languages at once,
apply them to token sequences, and reverse the segmentation exactly."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DataError

END_OF_WORD = "</w>"
MERGE_FILE_HEADER = "# bpe merge table v1"


@dataclass
class BpeModel:
    """Ordered merge list plus the learned symbol vocabulary.

    ``vocab`` is empty for models loaded from a merge file; only the
    merges are needed to segment text.
    """

    merges: list[tuple[str, str]]
    vocab: frozenset[str] = frozenset()
    end_of_word: str = END_OF_WORD
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, tuple[str, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache = {}

    def segment_word(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word) + [self.end_of_word]
        while len(symbols) > 1:
            best_rank = None
            best_pair = None
            for pair in zip(symbols, symbols[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_pair = pair
            if best_pair is None:
                break
            symbols = _merge_symbols(symbols, best_pair)
        result = tuple(symbols)
        self._cache[word] = result
        return result

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(MERGE_FILE_HEADER + "\n")
            for a, b in self.merges:
                fh.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path: str) -> "BpeModel":
        merges: list[tuple[str, str]] = []
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                line = line.rstrip("\n")
                if i == 0 and line.startswith("#"):
                    continue
                if not line:
                    continue
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(merges)


def _merge_symbols(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    """Replace every non-overlapping occurrence of `pair`, left to right."""
    merged = []
    i = 0
    while i < len(symbols):
        if (i + 1 < len(symbols)
                and symbols[i] == pair[0] and symbols[i + 1] == pair[1]):
            merged.append(pair[0] + pair[1])
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return merged


def learn_bpe(sentences: Iterable[Sequence[str]],
              target_vocab: int = 28000) -> BpeModel:
    """Greedy most-frequent-pair merging over word types weighted by
    frequency, until the symbol vocabulary reaches ``target_vocab`` or no
    pair occurs at least twice.  Frequency ties break lexicographically,
    so learning is deterministic and independent of corpus order.
    """
    word_freq: Counter[str] = Counter()
    for sent in sentences:
        word_freq.update(sent)
    if not word_freq:
        raise DataError("cannot learn BPE merges from an empty corpus")

    words = {w: list(w) + [END_OF_WORD] for w in word_freq}
    vocab: set[str] = set()
    for symbols in words.values():
        vocab.update(symbols)

    merges: list[tuple[str, str]] = []
    while len(vocab) < target_vocab:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for word, symbols in words.items():
            freq = word_freq[word]
            for pair in zip(symbols, symbols[1:]):
                pair_counts[pair] += freq
        if not pair_counts:
            break
        best_pair, best_count = min(
            pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best_count < 2:
            break
        merges.append(best_pair)
        vocab.add(best_pair[0] + best_pair[1])
        for word in words:
            words[word] = _merge_symbols(words[word], best_pair)
    return BpeModel(merges, frozenset(vocab))


def apply_bpe(model: BpeModel, tokens: Sequence[str]) -> list[str]:
    """Segment each token into subword units; the unit that closes a word
    carries the end-of-word marker.  Unseen characters pass through as
    singleton symbols."""
    out: list[str] = []
    for token in tokens:
        out.extend(model.segment_word(token))
    return out


def decode_bpe(subwords: Sequence[str],
               end_of_word: str = END_OF_WORD) -> list[str]:
    """Exact inverse of apply_bpe: concatenate and split at the markers."""
    text = "".join(subwords)
    if not text:
        return []
    words = text.split(end_of_word)
    if words and words[-1] == "":
        words = words[:-1]
    return words

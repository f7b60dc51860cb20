"""Subword tokenizer: deterministic greedy pair-merge BPE over characters.

Specials (PAD=0, BOS=1, EOS=2, UNK=3) live outside the requested vocab size
and are never produced by merges. Encoding replays merges by training rank,
so any string seen during training round-trips losslessly with zero UNKs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class VocabError(ValueError):
    pass


@dataclass
class Vocab:
    pieces: list[str]                      # id -> piece, specials first
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self._piece_to_id = {}
        for i, p in enumerate(self.pieces):
            self._piece_to_id.setdefault(p, i)
        self._merge_rank = {pair: r for r, pair in enumerate(self.merges)}

    @property
    def size(self) -> int:
        """Vocabulary size excluding the four specials."""
        return len(self.pieces) - len(SPECIALS)

    @property
    def total_size(self) -> int:
        return len(self.pieces)

    def piece_id(self, piece: str) -> int:
        return self._piece_to_id.get(piece, UNK_ID)


@dataclass
class TokenSequence:
    ids: list[int]


def _merge_seq(seq: list[str], pair: tuple[str, str]) -> list[str]:
    out = []
    i = 0
    merged = pair[0] + pair[1]
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def train_tokenizer(corpus: Iterable[str], vocab_size: int) -> Vocab:
    corpus = list(corpus)
    alphabet = sorted({ch for s in corpus for ch in s})
    if vocab_size < len(alphabet):
        raise VocabError(
            f"vocab_size {vocab_size} below corpus alphabet size {len(alphabet)}"
        )
    pieces = list(SPECIALS) + alphabet
    seqs = [list(s) for s in corpus if s]
    merges: list[tuple[str, str]] = []
    while len(pieces) - len(SPECIALS) < vocab_size:
        counts: Counter = Counter()
        for seq in seqs:
            counts.update(zip(seq, seq[1:]))
        if not counts:
            break
        # tie-break: highest count, then lexicographically smallest pair
        top = max(counts.values())
        pair = min(p for p, c in counts.items() if c == top)
        merges.append(pair)
        pieces.append(pair[0] + pair[1])
        seqs = [_merge_seq(s, pair) if (pair[0] in s and pair[1] in s) else s for s in seqs]
    return Vocab(pieces, merges)


def _segment(s: str, v: Vocab) -> list[str]:
    seq = list(s)
    if not seq:
        return seq
    ranks = v._merge_rank
    while True:
        best_rank = None
        best_pair = None
        for a, b in zip(seq, seq[1:]):
            r = ranks.get((a, b))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
                best_pair = (a, b)
        if best_pair is None:
            return seq
        seq = _merge_seq(seq, best_pair)


def encode(s: str, v: Vocab, add_specials: bool = False) -> TokenSequence:
    ids = [v.piece_id(p) for p in _segment(s, v)]
    if add_specials:
        ids = [BOS_ID] + ids + [EOS_ID]
    return TokenSequence(ids)


def decode(t: TokenSequence | Sequence[int], v: Vocab) -> str:
    ids = t.ids if isinstance(t, TokenSequence) else list(t)
    out = []
    for i in ids:
        if i < 0 or i >= len(v.pieces):
            raise VocabError(f"token id {i} out of range (vocab {len(v.pieces)})")
        if i == EOS_ID:
            break
        if i in (PAD_ID, BOS_ID, UNK_ID):
            continue
        out.append(v.pieces[i])
    return "".join(out)


def _escape(p: str) -> str:
    return p.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def _unescape(p: str) -> str:
    out = []
    i = 0
    while i < len(p):
        if p[i] == "\\" and i + 1 < len(p):
            c = p[i + 1]
            out.append({"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(c, c))
            i += 2
        else:
            out.append(p[i])
            i += 1
    return "".join(out)


def save_vocab(v: Vocab, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, p in enumerate(v.pieces):
            f.write(f"{i}\t{_escape(p)}\n")
        f.write("#MERGES\n")
        for a, b in v.merges:
            f.write(f"{_escape(a)}\t{_escape(b)}\n")


def load_vocab(path: str) -> Vocab:
    pieces: list[str] = []
    merges: list[tuple[str, str]] = []
    in_merges = False
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line == "#MERGES":
                in_merges = True
                continue
            if not line:
                continue
            a, b = line.split("\t", 1)
            if in_merges:
                merges.append((_unescape(a), _unescape(b)))
            else:
                idx = int(a)
                if idx != len(pieces):
                    raise VocabError(f"non-contiguous piece id {idx} in {path}")
                pieces.append(_unescape(b))
    return Vocab(pieces, merges)


def vocab_to_text(v: Vocab) -> str:
    lines = [f"{i}\t{_escape(p)}" for i, p in enumerate(v.pieces)]
    lines.append("#MERGES")
    lines += [f"{_escape(a)}\t{_escape(b)}" for a, b in v.merges]
    return "\n".join(lines) + "\n"


def vocab_from_text(text: str) -> Vocab:
    pieces: list[str] = []
    merges: list[tuple[str, str]] = []
    in_merges = False
    for line in text.split("\n"):
        if line == "#MERGES":
            in_merges = True
            continue
        if not line:
            continue
        a, b = line.split("\t", 1)
        if in_merges:
            merges.append((_unescape(a), _unescape(b)))
        else:
            pieces.append(_unescape(b))
    return Vocab(pieces, merges)

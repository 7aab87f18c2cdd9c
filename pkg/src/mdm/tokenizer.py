"""Subword tokenizer trained as a unigram language model.

A sentence is scored as the product of independent piece probabilities, so
the best segmentation of a string is the max-sum path through its
segmentation lattice (Viterbi) and training is plain EM: the E-step runs
the forward-backward recursions over that lattice to collect expected piece
counts, the M-step renormalizes them.  Rounds of EM alternate with pruning
until the vocabulary fits the requested size; corpus log-likelihood is
non-decreasing across EM iterations at a fixed vocabulary, which the
trainer records so callers can check it.

Text is NFC-normalized and spaces become a visible marker character before
segmentation, so pieces can span word boundaries and round-tripping is
exact for covered text.  Characters outside the covered set (and control
whitespace, which the model file format reserves) encode to UNK.

A trained model is immutable: one process may share it across threads for
encode/decode.  On disk it is a JSON header line followed by one
piece<TAB>log_prob line per piece.
"""

from __future__ import annotations

import json
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .numerics import ArgumentError

SPECIALS: Dict[str, int] = {"pad": 0, "bos": 1, "eos": 2, "unk": 3}
N_SPECIALS = len(SPECIALS)
MARKER = "▁"  # visible stand-in for the space character

# control whitespace never gets a piece: the model file is line/tab delimited
_RESERVED_CHARS = frozenset("\t\n\r\v\f")

# log-probability charged per UNK character in a segmentation
UNK_LOG_PROB = -100.0


class TokenizerFormatError(RuntimeError):
    """The on-disk tokenizer model violates an invariant."""


def normalize_text(text: str) -> str:
    """NFC normalization with spaces mapped to the marker character."""
    return unicodedata.normalize("NFC", text).replace(" ", MARKER)


def denormalize_text(text: str) -> str:
    return text.replace(MARKER, " ")


@dataclass(frozen=True)
class TokenizerModel:
    """Immutable piece inventory with log-probabilities.

    Piece ids follow the specials, so id = index in pieces + len(specials).
    """
    pieces: Tuple[Tuple[str, float], ...]
    coverage: float
    vocab_size: int
    specials: Dict[str, int] = field(default_factory=lambda: dict(SPECIALS))

    def __post_init__(self) -> None:
        if not self.pieces:
            raise ArgumentError("TokenizerModel: pieces must be non-empty")
        if self.specials != SPECIALS:
            raise ArgumentError(
                f"TokenizerModel: specials must be {SPECIALS}, got {self.specials}")
        if not (0.0 < self.coverage <= 1.0):
            raise ArgumentError(
                f"TokenizerModel: coverage must lie in (0, 1], got {self.coverage}")
        if self.vocab_size != len(self.pieces) + N_SPECIALS:
            raise ArgumentError(
                f"TokenizerModel: vocab_size {self.vocab_size} != "
                f"{len(self.pieces)} pieces + {N_SPECIALS} specials")
        surfaces = [p for p, _ in self.pieces]
        if len(set(surfaces)) != len(surfaces):
            raise ArgumentError("TokenizerModel: duplicate piece surfaces")
        singles = {p for p in surfaces if len(p) == 1}
        total = 0.0
        for piece, lp in self.pieces:
            if not piece or _RESERVED_CHARS & set(piece):
                raise ArgumentError(
                    f"TokenizerModel: piece {piece!r} is empty or contains "
                    "reserved control whitespace")
            if math.isnan(lp) or lp > 1e-12:
                raise ArgumentError(
                    f"TokenizerModel: piece {piece!r} has log-prob {lp}")
            for ch in piece:
                if ch not in singles:
                    raise ArgumentError(
                        f"TokenizerModel: piece {piece!r} uses character "
                        f"{ch!r} that has no single-character piece")
            total += math.exp(lp)
        if abs(total - 1.0) > 1e-6:
            raise ArgumentError(
                f"TokenizerModel: piece probabilities sum to {total}, not 1")

    @cached_property
    def piece_log_probs(self) -> Dict[str, float]:
        return dict(self.pieces)

    @cached_property
    def piece_ids(self) -> Dict[str, int]:
        return {p: i + N_SPECIALS for i, (p, _) in enumerate(self.pieces)}

    @cached_property
    def single_chars(self) -> frozenset:
        return frozenset(p for p, _ in self.pieces if len(p) == 1)

    @cached_property
    def max_piece_len(self) -> int:
        return max(len(p) for p, _ in self.pieces)


def check_train_args(vocab_size: int, character_coverage: float) -> None:
    """Range validation shared by the trainer and the CLI."""
    if vocab_size < N_SPECIALS + 1:
        raise ArgumentError(
            f"check_train_args: vocab_size must be >= {N_SPECIALS + 1} "
            f"(specials plus at least one piece), got {vocab_size}")
    if not (0.0 < character_coverage <= 1.0):
        raise ArgumentError(
            f"check_train_args: character_coverage must lie in (0, 1], "
            f"got {character_coverage}")


def covered_characters(lines: Sequence[str], coverage: float) -> frozenset:
    """Most frequent characters whose occurrence mass reaches coverage.

    Operates on normalized lines; reserved control whitespace never counts.
    """
    counts: Counter = Counter()
    for line in lines:
        for ch in line:
            if ch not in _RESERVED_CHARS:
                counts[ch] += 1
    total = sum(counts.values())
    if total == 0:
        return frozenset()
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept, mass = [], 0
    for ch, c in ranked:
        if mass >= coverage * total:
            break
        kept.append(ch)
        mass += c
    return frozenset(kept)


def _covered_fragments(lines: Sequence[str], covered: frozenset) -> Counter:
    """Maximal runs of covered characters, with multiplicities."""
    frags: Counter = Counter()
    for line in lines:
        run: List[str] = []
        for ch in line:
            if ch in covered:
                run.append(ch)
            elif run:
                frags["".join(run)] += 1
                run = []
        if run:
            frags["".join(run)] += 1
    return frags


def seed_pieces(fragments: Mapping[str, int], covered: frozenset, *,
                max_piece_len: int = 6, cap: int,
                count_floor: int = 2) -> Dict[str, float]:
    """Initial vocabulary: every covered character plus the most frequent
    substrings, with log-probs proportional to raw counts."""
    counts: Counter = Counter()
    for frag, mult in fragments.items():
        n = len(frag)
        for i in range(n):
            for j in range(i + 1, min(i + max_piece_len, n) + 1):
                counts[frag[i:j]] += mult
    keep: Dict[str, int] = {ch: max(counts.get(ch, 0), 1) for ch in covered}
    multi = [(s, c) for s, c in counts.items()
             if len(s) > 1 and c >= count_floor]
    multi.sort(key=lambda kv: (-kv[1], kv[0]))
    for s, c in multi[:max(cap - len(keep), 0)]:
        keep[s] = c
    log_total = math.log(sum(keep.values()))
    return {s: math.log(c) - log_total for s, c in keep.items()}


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def _fragment_estep(log_probs: Mapping[str, float], max_len: int,
                    frag: str, mult: int,
                    counts: Dict[str, float]) -> float:
    """Forward-backward over one fragment's segmentation lattice.

    Adds mult * expected piece counts into counts and returns the fragment
    log-likelihood (times mult is the corpus contribution).
    """
    n = len(frag)
    alpha = [-math.inf] * (n + 1)
    alpha[0] = 0.0
    edges: List[List[Tuple[int, str, float]]] = [[] for _ in range(n + 1)]
    for i in range(1, n + 1):
        for l in range(1, min(max_len, i) + 1):
            piece = frag[i - l:i]
            lp = log_probs.get(piece)
            if lp is None:
                continue
            edges[i].append((i - l, piece, lp))
            alpha[i] = _log_add(alpha[i], alpha[i - l] + lp)
    ll = alpha[n]
    beta = [-math.inf] * (n + 1)
    beta[n] = 0.0
    for i in range(n, 0, -1):
        if beta[i] == -math.inf:
            continue
        for j, piece, lp in edges[i]:
            beta[j] = _log_add(beta[j], lp + beta[i])
            post = math.exp(alpha[j] + lp + beta[i] - ll)
            counts[piece] = counts.get(piece, 0.0) + mult * post
    return ll


def _estep(log_probs: Mapping[str, float],
           fragments: Mapping[str, int]) -> Tuple[Dict[str, float], float]:
    max_len = max(len(p) for p in log_probs)
    counts: Dict[str, float] = {}
    ll = 0.0
    for frag, mult in fragments.items():
        ll += mult * _fragment_estep(log_probs, max_len, frag, mult, counts)
    return counts, ll


def _mstep(counts: Mapping[str, float],
           vocabulary: Iterable[str]) -> Dict[str, float]:
    total = sum(counts.values())
    log_total = math.log(total)
    out = {}
    for piece in vocabulary:
        c = counts.get(piece, 0.0)
        out[piece] = math.log(c) - log_total if c > 0.0 else -math.inf
    return out


def em_update(log_probs: Mapping[str, float],
              fragments: Mapping[str, int]) -> Tuple[Dict[str, float], float]:
    """One EM iteration at fixed vocabulary.

    Returns the re-estimated log-probs and the corpus log-likelihood under
    the INPUT parameters (the E-step computes it for free), so iterating
    this function yields a non-decreasing likelihood sequence.
    """
    counts, ll = _estep(log_probs, fragments)
    return _mstep(counts, log_probs.keys()), ll


def _viterbi(log_probs: Mapping[str, float], singles: frozenset,
             max_len: int, text: str) -> Tuple[List[Optional[str]], float]:
    """Max-likelihood segmentation; None entries are UNK characters."""
    n = len(text)
    best = [-math.inf] * (n + 1)
    best[0] = 0.0
    back: List[Tuple[int, Optional[str]]] = [(0, None)] * (n + 1)
    for i in range(1, n + 1):
        for l in range(1, min(max_len, i) + 1):
            piece = text[i - l:i]
            lp = log_probs.get(piece)
            if lp is None:
                continue
            cand = best[i - l] + lp
            if cand > best[i]:
                best[i] = cand
                back[i] = (i - l, piece)
        if text[i - 1] not in singles:
            cand = best[i - 1] + UNK_LOG_PROB
            if cand > best[i]:
                best[i] = cand
                back[i] = (i - 1, None)
        if best[i] == -math.inf:
            # all paths here have zero probability; keep the trace walkable
            ch = text[i - 1]
            back[i] = (i - 1, ch if ch in singles else None)
    out: List[Optional[str]] = []
    i = n
    while i > 0:
        j, piece = back[i]
        out.append(piece)
        i = j
    out.reverse()
    return out, best[n]


def _prune(log_probs: Dict[str, float], counts: Mapping[str, float],
           excess: int, prune_fraction: float) -> Dict[str, float]:
    """Drop the lowest-value multi-character pieces.

    A piece's value is its expected count times the likelihood it saves
    over re-segmenting its own surface with the remaining pieces.  Single
    characters are never pruned, so every covered string stays segmentable.
    """
    singles = frozenset(p for p in log_probs if len(p) == 1)
    multi = [p for p in log_probs if len(p) > 1]
    losses = []
    for piece in multi:
        others = dict(log_probs)
        del others[piece]
        _, alt = _viterbi(others, singles, max(len(s) for s in others), piece)
        c = counts.get(piece, 0.0)
        loss = c * (log_probs[piece] - alt) if c > 0.0 else 0.0
        losses.append((loss, piece))
    losses.sort(key=lambda kv: (kv[0], kv[1]))
    k = min(max(math.ceil(prune_fraction * len(multi)), 1), excess)
    out = dict(log_probs)
    for _, piece in losses[:k]:
        del out[piece]
    return out


def train_unigram(corpus: Sequence[str], vocab_size: int,
                  character_coverage: float = 1.0, *,
                  max_piece_len: int = 6, seed_cap_factor: int = 20,
                  em_iters: int = 2, prune_fraction: float = 0.2,
                  ll_history: Optional[List[List[float]]] = None) -> TokenizerModel:
    """EM-train a unigram tokenizer on UTF-8 lines.

    Alternates em_iters EM iterations with pruning until the vocabulary
    (pieces plus specials) is at most vocab_size.  When ll_history is given
    it receives one list per round holding the corpus log-likelihood each
    E-step observed; entries within a round are non-decreasing.
    """
    check_train_args(vocab_size, character_coverage)
    if len(corpus) == 0:
        raise ArgumentError("train_unigram: corpus must be non-empty")
    lines = [normalize_text(line) for line in corpus]
    covered = covered_characters(lines, character_coverage)
    floor = len(covered) + N_SPECIALS
    if vocab_size < floor:
        raise ArgumentError(
            f"train_unigram: vocab_size {vocab_size} is below the character "
            f"floor {floor} ({len(covered)} covered characters + "
            f"{N_SPECIALS} specials)")
    fragments = _covered_fragments(lines, covered)
    if not fragments:
        raise ArgumentError("train_unigram: corpus has no covered text")

    target_pieces = vocab_size - N_SPECIALS
    log_probs = seed_pieces(fragments, covered, max_piece_len=max_piece_len,
                            cap=seed_cap_factor * vocab_size)
    while True:
        round_ll: List[float] = []
        counts: Dict[str, float] = {}
        for _ in range(em_iters):
            counts, ll = _estep(log_probs, fragments)
            log_probs = _mstep(counts, log_probs.keys())
            round_ll.append(ll)
        if ll_history is not None:
            ll_history.append(round_ll)
        excess = len(log_probs) - target_pieces
        if excess <= 0:
            break
        log_probs = _prune(log_probs, counts, excess, prune_fraction)

    pieces = tuple(sorted(log_probs.items(), key=lambda kv: (-kv[1], kv[0])))
    return TokenizerModel(pieces=pieces, coverage=character_coverage,
                          vocab_size=len(pieces) + N_SPECIALS)


def best_segmentation(model: TokenizerModel,
                      text: str) -> Tuple[List[int], float]:
    """Token ids of the max-likelihood segmentation and its log-likelihood.

    Uncovered characters appear as UNK and are charged UNK_LOG_PROB each.
    """
    surfaces, ll = _viterbi(model.piece_log_probs, model.single_chars,
                            model.max_piece_len, normalize_text(text))
    ids = [SPECIALS["unk"] if s is None else model.piece_ids[s]
           for s in surfaces]
    return ids, ll


def encode(model: TokenizerModel, text: str) -> List[int]:
    return best_segmentation(model, text)[0]


def decode(model: TokenizerModel, ids: Sequence[int]) -> str:
    """Concatenated piece surfaces; special ids contribute nothing."""
    out: List[str] = []
    for i in ids:
        i = int(i)
        if 0 <= i < N_SPECIALS:
            continue
        if not (N_SPECIALS <= i < model.vocab_size):
            raise ArgumentError(
                f"decode: id {i} out of range [0, {model.vocab_size})")
        out.append(model.pieces[i - N_SPECIALS][0])
    return denormalize_text("".join(out))


def save_tokenizer(model: TokenizerModel, path) -> None:
    header = {"format": "mdm-tokenizer", "version": 1,
              "vocab_size": model.vocab_size, "coverage": model.coverage,
              "specials": model.specials}
    lines = [json.dumps(header)]
    lines += [f"{piece}\t{lp!r}" for piece, lp in model.pieces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tokenizer(path) -> TokenizerModel:
    raw = Path(path).read_text(encoding="utf-8").splitlines()
    if not raw:
        raise TokenizerFormatError(f"{path}: empty model file")
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as e:
        raise TokenizerFormatError(f"{path}: bad header line: {e}") from e
    if not isinstance(header, dict) or header.get("format") != "mdm-tokenizer":
        raise TokenizerFormatError(f"{path}: not a tokenizer model file")
    if header.get("version") != 1:
        raise TokenizerFormatError(
            f"{path}: unsupported version {header.get('version')}")
    pieces: List[Tuple[str, float]] = []
    for lineno, line in enumerate(raw[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 2:
            raise TokenizerFormatError(
                f"{path}: line {lineno}: expected piece<TAB>log_prob")
        try:
            pieces.append((parts[0], float(parts[1])))
        except ValueError as e:
            raise TokenizerFormatError(
                f"{path}: line {lineno}: bad log-prob {parts[1]!r}") from e
    try:
        model = TokenizerModel(pieces=tuple(pieces),
                               coverage=float(header.get("coverage", 0.0)),
                               vocab_size=len(pieces) + N_SPECIALS,
                               specials=dict(header.get("specials", {})))
    except (ArgumentError, TypeError) as e:
        raise TokenizerFormatError(f"{path}: invalid model: {e}") from e
    if header.get("vocab_size") != model.vocab_size:
        raise TokenizerFormatError(
            f"{path}: header vocab_size {header.get('vocab_size')} != "
            f"{model.vocab_size} actual")
    return model

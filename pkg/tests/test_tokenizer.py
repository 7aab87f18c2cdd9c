"""Unigram tokenizer: training, segmentation optimality, persistence.

The segmentation oracle enumerates all 2^(n-1) cut patterns and folds each
segment's log-prob left to right, exactly as the lattice DP accumulates its
winning path, so optimal scores must agree bitwise.
"""

import itertools
import math
import random

import pytest

from mdm.numerics import ArgumentError
from mdm.tokenizer import (
    MARKER,
    N_SPECIALS,
    SPECIALS,
    UNK_LOG_PROB,
    TokenizerFormatError,
    TokenizerModel,
    best_segmentation,
    check_train_args,
    covered_characters,
    decode,
    em_update,
    encode,
    load_tokenizer,
    normalize_text,
    save_tokenizer,
    seed_pieces,
    train_unigram,
)


def brute_force_best(log_probs, text):
    """Max log-likelihood over every segmentation of text.

    Single characters without a piece cost UNK_LOG_PROB; longer segments
    without a piece are not valid segments.
    """
    n = len(text)
    if n == 0:
        return 0.0
    best = -math.inf
    for mask in range(1 << (n - 1)):
        cuts = [0] + [i + 1 for i in range(n - 1) if mask >> i & 1] + [n]
        total = 0.0
        for a, b in zip(cuts, cuts[1:]):
            seg = text[a:b]
            lp = log_probs.get(seg)
            if lp is not None:
                total += lp
            elif b - a == 1:
                total += UNK_LOG_PROB
            else:
                break
        else:
            if total > best:
                best = total
    return best


def _four_char_corpus(n_lines=60, seed=0):
    rnd = random.Random(seed)
    return ["".join(rnd.choice("abcd") for _ in range(rnd.randint(5, 30)))
            for _ in range(n_lines)]


def _word_corpus(n_lines=200, seed=1):
    rnd = random.Random(seed)
    words = ["sun", "moon", "star", "dust", "wide", "night", "over", "the",
             "cold", "warm", "light", "dark", "sky", "sea"]
    return [" ".join(rnd.choice(words) for _ in range(rnd.randint(3, 8)))
            for _ in range(n_lines)]


@pytest.fixture(scope="module")
def four_char_model():
    return train_unigram(_four_char_corpus(), vocab_size=30,
                         character_coverage=1.0)


class TestNormalization:
    def test_space_round_trip(self):
        from mdm.tokenizer import denormalize_text
        s = "a b  c"
        assert denormalize_text(normalize_text(s)) == s
        assert normalize_text(s) == f"a{MARKER}b{MARKER}{MARKER}c"

    def test_nfc_composition(self):
        decomposed = "é"  # e + combining acute
        assert normalize_text(decomposed) == "é"


class TestCheckArgs:
    def test_full_scale_settings_accepted(self):
        check_train_args(32000, 0.9995)

    def test_vocab_too_small(self):
        with pytest.raises(ArgumentError):
            check_train_args(N_SPECIALS, 1.0)

    def test_coverage_out_of_range(self):
        for cov in (0.0, -0.1, 1.5):
            with pytest.raises(ArgumentError):
                check_train_args(100, cov)


class TestCoverage:
    def test_full_coverage_keeps_all(self):
        assert covered_characters(["abcab"], 1.0) == frozenset("abc")

    def test_partial_coverage_drops_rare(self):
        # 'a' alone reaches the 0.9 mass target
        lines = ["a" * 9 + "b"]
        assert covered_characters(lines, 0.9) == frozenset("a")
        assert covered_characters(lines, 0.95) == frozenset("ab")

    def test_reserved_whitespace_never_covered(self):
        assert covered_characters(["a\tb\nc"], 1.0) == frozenset("abc")


class TestSeeding:
    def test_single_chars_always_present(self):
        seeds = seed_pieces({"abab": 1}, frozenset("ab"), cap=3)
        assert "a" in seeds and "b" in seeds

    def test_cap_respected(self):
        frags = {"abcdefabcdef": 4}
        seeds = seed_pieces(frags, frozenset("abcdef"), cap=10)
        assert len(seeds) <= 10

    def test_probabilities_normalized(self):
        seeds = seed_pieces({"aabb": 3}, frozenset("ab"), cap=8)
        assert abs(sum(math.exp(lp) for lp in seeds.values()) - 1.0) < 1e-12


class TestTraining:
    def test_single_symbol_corpus_mass_on_char(self):
        # with only 'a'-tilings available, the best model is all mass on 'a'
        model = train_unigram(["aaaa"], vocab_size=6, em_iters=10)
        probs = {p: math.exp(lp) for p, lp in model.pieces}
        assert "a" in probs
        assert probs["a"] > 0.95

    def test_vocab_size_reached(self):
        model = train_unigram(_four_char_corpus(), vocab_size=16)
        assert model.vocab_size <= 16
        assert {p for p, _ in model.pieces if len(p) == 1} == set("abcd")

    def test_probability_sum(self, four_char_model):
        total = sum(math.exp(lp) for _, lp in four_char_model.pieces)
        assert abs(total - 1.0) < 1e-6

    def test_log_likelihood_monotone_within_rounds(self):
        hist = []
        train_unigram(_word_corpus(), vocab_size=64, em_iters=4,
                      ll_history=hist)
        assert len(hist) >= 2
        for round_ll in hist:
            for a, b in zip(round_ll, round_ll[1:]):
                assert b >= a - 1e-9

    def test_em_update_monotone_at_fixed_vocab(self):
        lines = [normalize_text(l) for l in _word_corpus(60, seed=3)]
        covered = covered_characters(lines, 1.0)
        from mdm.tokenizer import _covered_fragments
        frags = _covered_fragments(lines, covered)
        log_probs = seed_pieces(frags, covered, cap=120)
        lls = []
        for _ in range(12):
            log_probs, ll = em_update(log_probs, frags)
            lls.append(ll)
        for a, b in zip(lls, lls[1:]):
            assert b >= a - 1e-9

    def test_empty_corpus_rejected(self):
        with pytest.raises(ArgumentError):
            train_unigram([], vocab_size=10)

    def test_vocab_below_character_floor_rejected(self):
        with pytest.raises(ArgumentError, match="character"):
            train_unigram(["abcdefgh"], vocab_size=8)

    def test_corpus_without_covered_text_rejected(self):
        with pytest.raises(ArgumentError, match="covered"):
            train_unigram(["\t\t"], vocab_size=10)

    def test_deterministic(self):
        corpus = _word_corpus(40, seed=5)
        m1 = train_unigram(corpus, vocab_size=40)
        m2 = train_unigram(corpus, vocab_size=40)
        assert m1.pieces == m2.pieces


class TestViterbi:
    def test_empty_string(self, four_char_model):
        assert encode(four_char_model, "") == []

    def test_single_char_when_no_multi_alternative(self):
        model = TokenizerModel(
            pieces=(("a", math.log(0.4)), ("b", math.log(0.3)),
                    ("ab", math.log(0.3))),
            coverage=1.0, vocab_size=3 + N_SPECIALS)
        assert encode(model, "a") == [model.piece_ids["a"]]

    def test_uncovered_maps_to_unk(self, four_char_model):
        ids, ll = best_segmentation(four_char_model, "aXa")
        assert ids[1] == SPECIALS["unk"]
        id_a = four_char_model.piece_ids["a"]
        assert ids[0] == id_a and ids[2] == id_a
        lp_a = four_char_model.piece_log_probs["a"]
        assert ll == lp_a + UNK_LOG_PROB + lp_a

    def test_exhaustive_short_strings(self, four_char_model):
        lp = four_char_model.piece_log_probs
        for n in range(1, 7):
            for chars in itertools.product("abcd", repeat=n):
                text = "".join(chars)
                _, got = best_segmentation(four_char_model, text)
                assert got == brute_force_best(lp, text), text

    def test_sampled_longer_strings(self, four_char_model):
        lp = four_char_model.piece_log_probs
        rnd = random.Random(99)
        for _ in range(150):
            n = rnd.randint(7, 12)
            text = "".join(rnd.choice("abcd") for _ in range(n))
            _, got = best_segmentation(four_char_model, text)
            assert got == brute_force_best(lp, text), text

    def test_reported_likelihood_matches_ids(self, four_char_model):
        text = "abcdabcaadd"
        ids, ll = best_segmentation(four_char_model, text)
        pieces = [four_char_model.pieces[i - N_SPECIALS][0] for i in ids]
        total = 0.0
        for p in pieces:
            total += four_char_model.piece_log_probs[p]
        assert total == ll
        assert "".join(pieces) == text


class TestDecode:
    def test_round_trip_corpus(self):
        corpus = _word_corpus(200, seed=7)
        model = train_unigram(corpus, vocab_size=72)
        for line in corpus:
            assert decode(model, encode(model, line)) == line

    def test_specials_dropped(self, four_char_model):
        ids = encode(four_char_model, "abc")
        framed = [SPECIALS["bos"]] + ids + [SPECIALS["eos"], SPECIALS["pad"]]
        assert decode(four_char_model, framed) == "abc"

    def test_empty(self, four_char_model):
        assert decode(four_char_model, []) == ""

    def test_out_of_range_id(self, four_char_model):
        with pytest.raises(ArgumentError, match="out of range"):
            decode(four_char_model, [four_char_model.vocab_size])


class TestModelValidation:
    def _pieces(self):
        return (("a", math.log(0.5)), ("b", math.log(0.5)))

    def test_probability_sum_checked(self):
        with pytest.raises(ArgumentError, match="sum"):
            TokenizerModel(pieces=(("a", math.log(0.5)), ("b", math.log(0.6))),
                           coverage=1.0, vocab_size=2 + N_SPECIALS)

    def test_duplicate_pieces_rejected(self):
        with pytest.raises(ArgumentError, match="duplicate"):
            TokenizerModel(pieces=(("a", math.log(0.5)), ("a", math.log(0.5))),
                           coverage=1.0, vocab_size=2 + N_SPECIALS)

    def test_piece_char_without_single_rejected(self):
        with pytest.raises(ArgumentError, match="single-character"):
            TokenizerModel(pieces=(("a", math.log(0.5)), ("ax", math.log(0.5))),
                           coverage=1.0, vocab_size=2 + N_SPECIALS)

    def test_vocab_size_mismatch_rejected(self):
        with pytest.raises(ArgumentError, match="vocab_size"):
            TokenizerModel(pieces=self._pieces(), coverage=1.0, vocab_size=99)

    def test_coverage_range_checked(self):
        with pytest.raises(ArgumentError, match="coverage"):
            TokenizerModel(pieces=self._pieces(), coverage=0.0,
                           vocab_size=2 + N_SPECIALS)


class TestPersistence:
    def test_round_trip(self, tmp_path, four_char_model):
        path = tmp_path / "tok.model"
        save_tokenizer(four_char_model, path)
        loaded = load_tokenizer(path)
        assert loaded.pieces == four_char_model.pieces
        assert loaded.coverage == four_char_model.coverage
        assert loaded.specials == four_char_model.specials
        text = "abcdabcd"
        assert encode(loaded, text) == encode(four_char_model, text)

    def test_unicode_pieces_survive(self, tmp_path):
        model = train_unigram(["café ole", "ole café"], vocab_size=24)
        path = tmp_path / "tok.model"
        save_tokenizer(model, path)
        loaded = load_tokenizer(path)
        assert loaded.pieces == model.pieces
        assert decode(loaded, encode(loaded, "café ole")) == "café ole"

    def test_bad_header(self, tmp_path):
        path = tmp_path / "tok.model"
        path.write_text("not json\n", encoding="utf-8")
        with pytest.raises(TokenizerFormatError, match="header"):
            load_tokenizer(path)

    def test_wrong_format(self, tmp_path):
        path = tmp_path / "tok.model"
        path.write_text('{"format": "other"}\n', encoding="utf-8")
        with pytest.raises(TokenizerFormatError, match="not a tokenizer"):
            load_tokenizer(path)

    def test_unsupported_version(self, tmp_path, four_char_model):
        path = tmp_path / "tok.model"
        save_tokenizer(four_char_model, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        lines[0] = lines[0].replace('"version": 1', '"version": 9')
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(TokenizerFormatError, match="version"):
            load_tokenizer(path)

    def test_malformed_piece_line_cites_number(self, tmp_path, four_char_model):
        path = tmp_path / "tok.model"
        save_tokenizer(four_char_model, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        lines[2] = "nontab line"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(TokenizerFormatError, match="line 3"):
            load_tokenizer(path)

    def test_header_vocab_size_cross_checked(self, tmp_path, four_char_model):
        path = tmp_path / "tok.model"
        save_tokenizer(four_char_model, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        del lines[1]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(TokenizerFormatError, match="vocab_size"):
            load_tokenizer(path)

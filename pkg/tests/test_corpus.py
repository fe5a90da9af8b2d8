import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndkit.corpus import (
    EOS_ID,
    PAD_ID,
    UNK_ID,
    Dataset,
    EntropyTable,
    build_vocab,
    normalized_string,
    rank_and_split,
    read_pairs_tsv,
    source_entropy,
    tokenize,
    write_pairs_tsv,
)
from ndkit.errors import ConfigError, DataError, EmptyInputError

from oracles import brute_force_entropy


def make_dataset(raw_pairs, max_vocab=5000):
    vocab = build_vocab([t for p in raw_pairs for t in p], max_vocab)
    return Dataset.from_raw_pairs(raw_pairs, vocab), vocab


class TestTokenize:
    def test_direct_lookup(self):
        vocab = build_vocab(["hello there"], 100)
        assert tokenize("Hello there", vocab) == [
            vocab.lookup("hello"), vocab.lookup("there")]

    def test_unknown_maps_to_unk(self):
        vocab = build_vocab(["hello there"], 100)
        assert tokenize("zzzunseen", vocab) == [UNK_ID]

    def test_normalization_is_casefold_plus_split(self):
        vocab = build_vocab(["a b"], 100)
        assert tokenize("  A  a ", vocab) == [vocab.lookup("a"), vocab.lookup("a")]

    def test_empty_after_normalization(self):
        vocab = build_vocab(["a"], 100)
        with pytest.raises(EmptyInputError):
            tokenize("   ", vocab)


class TestBuildVocab:
    def test_keeps_counts(self):
        vocab = build_vocab(["a a b"], 10)
        assert vocab.freq("a") == 2
        assert vocab.freq("b") == 1
        assert len(vocab) == 6  # 4 reserved + a + b

    def test_cap_drops_lowest_frequency(self):
        vocab = build_vocab(["a a b"], 5)
        assert vocab.lookup("a") > UNK_ID
        assert vocab.lookup("b") == UNK_ID

    def test_tie_break_first_occurrence(self):
        vocab = build_vocab(["z q z q x"], 6)
        # z and q both occur twice; z came first and wins the last two slots
        assert vocab.lookup("z") > UNK_ID
        assert vocab.lookup("q") > UNK_ID
        assert vocab.lookup("x") == UNK_ID

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            build_vocab([], 10)

    def test_max_size_below_reserved_rejected(self):
        with pytest.raises(ConfigError):
            build_vocab(["a"], 3)


class TestSourceEntropy:
    def test_single_query_zero(self):
        ds, _ = make_dataset([("how are you", "fine")])
        table = source_entropy(ds)
        assert table.of("fine") == 0.0

    def test_two_distinct_queries_ln2(self):
        ds, _ = make_dataset([("q one", "dunno"), ("q two", "dunno")])
        table = source_entropy(ds)
        assert table.of("dunno") == pytest.approx(math.log(2), abs=1e-12)

    def test_three_one_split(self):
        ds, _ = make_dataset([("q1", "meh")] * 3 + [("q2", "meh")])
        expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        table = source_entropy(ds)
        assert table.of("meh") == pytest.approx(expected, abs=1e-12)

    def test_normalized_response_identity(self):
        ds, _ = make_dataset([("q1", "So  FINE"), ("q2", "so fine")])
        table = source_entropy(ds)
        assert table.of("so fine") == pytest.approx(math.log(2), abs=1e-12)

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            source_entropy(Dataset(pairs=[]))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(
        st.tuples(st.sampled_from([f"q{i}" for i in range(8)]),
                  st.sampled_from([f"r{i}" for i in range(5)])),
        min_size=1, max_size=60,
    ))
    def test_matches_brute_force(self, raw_pairs):
        ds, _ = make_dataset(raw_pairs)
        table = source_entropy(ds)
        expected = brute_force_entropy(raw_pairs)
        assert set(table.entropy) == set(expected)
        for response, value in expected.items():
            assert table.entropy[response] == pytest.approx(value, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.dictionaries(st.sampled_from([f"q{i}" for i in range(6)]),
                           st.integers(min_value=1, max_value=5),
                           min_size=1, max_size=6),
           st.integers(min_value=1, max_value=5))
    def test_new_distinct_query_never_decreases(self, counts, new_count):
        def entropy_of(count_map):
            pairs = [(q, "resp") for q, c in count_map.items() for _ in range(c)]
            ds, _ = make_dataset(pairs)
            return source_entropy(ds).of("resp")

        before = entropy_of(counts)
        extended = dict(counts)
        extended["brandnewquery"] = new_count
        assert entropy_of(extended) >= before - 1e-12


class TestRankAndSplit:
    def test_selects_high_entropy_pairs(self):
        raw = [("a1", "u1"), ("b1", "x"), ("b2", "x"), ("a2", "u2")]
        ds, _ = make_dataset(raw)
        table = source_entropy(ds)
        negative, remaining = rank_and_split(ds, table, 0.5)
        assert [p.raw_response for p in negative.pairs] == ["x", "x"]
        assert [p.raw_response for p in remaining.pairs] == ["u1", "u2"]

    def test_tie_break_keeps_original_order(self):
        raw = [(f"q{i}", f"r{i}") for i in range(4)]  # all entropies zero
        ds, _ = make_dataset(raw)
        table = source_entropy(ds)
        negative, remaining = rank_and_split(ds, table, 0.5)
        assert [p.raw_query for p in negative.pairs] == ["q0", "q1"]
        assert [p.raw_query for p in remaining.pairs] == ["q2", "q3"]

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
    def test_ratio_bounds(self, ratio):
        ds, _ = make_dataset([("q", "r")])
        table = source_entropy(ds)
        with pytest.raises(ConfigError):
            rank_and_split(ds, table, ratio)

    def test_partition_and_ordering_random(self):
        rng = random.Random(7)
        for _ in range(25):
            raw = [(f"q{rng.randrange(10)}", f"r{rng.randrange(4)}")
                   for _ in range(rng.randrange(1, 40))]
            ds, _ = make_dataset(raw)
            table = source_entropy(ds)
            ratio = rng.choice([0.25, 0.5, 0.75])
            negative, remaining = rank_and_split(ds, table, ratio)
            assert len(negative.pairs) == math.ceil(ratio * len(raw))
            combined = sorted((p.raw_query, p.raw_response)
                              for p in negative.pairs + remaining.pairs)
            assert combined == sorted(raw)
            if negative.pairs and remaining.pairs:
                lowest_kept = min(table.of(p.raw_response) for p in negative.pairs)
                highest_dropped = max(table.of(p.raw_response) for p in remaining.pairs)
                assert lowest_kept >= highest_dropped - 1e-12


class TestTsvIO:
    def test_round_trip(self, tmp_path):
        pairs = [("How are you", "fine thanks"), ("b", "c")]
        path = tmp_path / "pairs.tsv"
        write_pairs_tsv(path, pairs)
        assert read_pairs_tsv(path) == pairs

    def test_bad_lines_rejected_with_line_numbers(self, tmp_path):
        path = tmp_path / "pairs.tsv"
        path.write_text("good\tpair\nonly one field\na\tb\tc\n \t\n", encoding="utf-8")
        with pytest.raises(DataError) as err:
            read_pairs_tsv(path)
        message = str(err.value)
        assert "2" in message and "3" in message and "4" in message

    def test_entropy_table_export(self, tmp_path):
        ds, _ = make_dataset([("q1", "x"), ("q2", "x"), ("q3", "solo")])
        table = source_entropy(ds)
        out = tmp_path / "entropy.tsv"
        table.export_tsv(out)
        lines = out.read_text().splitlines()
        first = lines[0].split("\t")
        assert first[0] == "x"
        assert float(first[1]) == pytest.approx(math.log(2), abs=1e-9)
        assert first[2] == "2"
        assert lines[1].split("\t")[0] == "solo"


def test_reserved_ids_are_stable():
    assert (PAD_ID, EOS_ID) == (0, 2)
    assert normalized_string(" A  b ") == "a b"

"""Structure and cell tokenization, both directions."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_table_tree
from wstabnet.table import Node, parse_html
from wstabnet.tokens import (
    CELL_TRIGGER_TOKENS,
    STRUCT_TOKENS,
    IllFormedSequence,
    SpanOutOfVocab,
    TooLong,
    Vocab,
    cell_vocab,
    count_cell_tokens,
    detokenize_cell,
    detokenize_structure,
    struct_vocab,
    tokenize_cell,
    tokenize_structure,
    unknown_count,
)

SV = struct_vocab()


def toks(ids):
    return [SV.token(i) for i in ids]


def ids_of(tokens):
    return [SV.id(t) for t in tokens]


def table_of(*cells: Node) -> Node:
    return Node("table", children=(Node("tbody", children=(Node("tr", children=cells),)),))


class TestVocab:
    def test_struct_vocab_layout(self):
        assert SV.tokens[0] == "<pad>"
        assert SV.token(SV.id("<td></td>")) == "<td></td>"
        assert len(set(SV.tokens)) == len(SV.tokens)
        assert [SV.id(t) for t in STRUCT_TOKENS] == list(range(len(STRUCT_TOKENS)))
        assert SV.tokens[-9:] == tuple(str(n) for n in range(2, 11))

    def test_cell_vocab_dense(self):
        cv = cell_vocab("abc")
        assert len(cv) == 7
        assert cv.id("a") == 4

    def test_save_load_roundtrip(self, tmp_path):
        cv = cell_vocab("ab c")  # space character is a real token
        path = tmp_path / "vocab.txt"
        cv.save(path)
        loaded = Vocab.load(path)
        assert loaded.tokens == cv.tokens

    def test_duplicate_alphabet_rejected(self):
        with pytest.raises(ValueError):
            cell_vocab("aa")


class TestTokenizeStructure:
    def test_single_cell_sequence(self):
        tree = table_of(Node("td"))
        assert toks(tokenize_structure(tree)) == [
            "<tbody>", "<tr>", "<td></td>", "</tr>", "</tbody>", "<eos>",
        ]

    def test_rowspan_subsequence(self):
        tree = table_of(Node("td", rowspan=2))
        assert toks(tokenize_structure(tree)) == [
            "<tbody>", "<tr>", "<td", "rowspan=", "2", ">", "</td>", "</tr>", "</tbody>", "<eos>",
        ]

    def test_both_spans_rowspan_first(self):
        tree = table_of(Node("td", rowspan=2, colspan=3))
        assert toks(tokenize_structure(tree)) == [
            "<tbody>", "<tr>", "<td", "rowspan=", "2", "colspan=", "3", ">", "</td>",
            "</tr>", "</tbody>", "<eos>",
        ]

    def test_table_wrapper_not_emitted(self):
        tree = table_of(Node("td"))
        assert "<table>" not in toks(tokenize_structure(tree))

    def test_span_out_of_vocab(self):
        tree = table_of(Node("td", rowspan=11))
        with pytest.raises(SpanOutOfVocab):
            tokenize_structure(tree)
        clamped = tokenize_structure(tree, strict=False)
        assert "10" in toks(clamped)

    def test_too_long(self):
        tree = table_of(*[Node("td") for _ in range(10)])
        with pytest.raises(TooLong):
            tokenize_structure(tree, max_len=5)


class TestDetokenizeStructure:
    def test_inverse_of_single_cell(self):
        seq = ids_of(["<tbody>", "<tr>", "<td></td>", "</tr>", "</tbody>", "<eos>"])
        assert detokenize_structure(seq) == table_of(Node("td"))

    def test_unbalanced_raises(self):
        with pytest.raises(IllFormedSequence):
            detokenize_structure(ids_of(["<tr>", "</tbody>"]))

    def test_colspan_group(self):
        seq = ids_of(["<tbody>", "<tr>", "<td", "colspan=", "2", ">", "</td>", "</tr>", "</tbody>"])
        tree = detokenize_structure(seq)
        assert tree.cells()[0].colspan == 2

    @pytest.mark.parametrize(
        "tokens",
        [
            ["<tbody>", "<tr>", "2", "</tr>", "</tbody>"],  # bare numeric
            ["<tbody>", "<tr>", ">", "</tr>", "</tbody>"],  # '>' without '<td'
            ["<tbody>", "<tr>", "</td>", "</tr>", "</tbody>"],
            ["<tbody>", "<tr>", "rowspan=", "2", "</tr>", "</tbody>"],
            ["<tbody>", "<tr>", "<td", "rowspan=", ">", "</td>", "</tr>", "</tbody>"],
            ["<tbody>", "<tr>", "<td></td>", "</tr>"],  # unclosed tbody
            ["<tbody>", "<tr>", "<td></td>", "</tr>", "</tbody>", "<eos>", "<tr>"],
        ],
    )
    def test_strict_rejections(self, tokens):
        with pytest.raises(IllFormedSequence):
            detokenize_structure(ids_of(tokens))

    def test_trailing_eos_and_pad_ignored(self):
        seq = ids_of(["<tbody>", "<tr>", "<td></td>", "</tr>", "</tbody>", "<eos>", "<pad>", "<pad>"])
        assert detokenize_structure(seq) == table_of(Node("td"))

    def test_repair_closes_open_tags(self):
        seq = ids_of(["<tbody>", "<tr>", "<td></td>"])
        tree = detokenize_structure(seq, repair=True)
        assert tree == table_of(Node("td"))

    def test_repair_never_raises(self, rng):
        n = len(STRUCT_TOKENS)
        for _ in range(500):
            seq = list(rng.integers(0, n, size=rng.integers(0, 20)))
            tree = detokenize_structure(seq, repair=True)
            assert tree.tag == "table"

    def test_repair_keeps_cell_count(self, rng):
        trigger_ids = {SV.id(t) for t in CELL_TRIGGER_TOKENS}
        n = len(STRUCT_TOKENS)
        for _ in range(500):
            seq = [int(i) for i in rng.integers(0, n, size=rng.integers(0, 24))]
            if SV.eos_id in seq:
                body = seq[: seq.index(SV.eos_id)]
            else:
                body = seq
            tree = detokenize_structure(seq, repair=True)
            assert len(tree.cells()) == sum(1 for i in body if i in trigger_ids)


class TestRoundtrip:
    def test_structure_roundtrip_random(self, rng):
        for _ in range(500):
            tree = random_table_tree(rng)
            seq = tokenize_structure(tree)
            assert detokenize_structure(seq) == tree.strip_content()

    def test_count_invariant(self, rng):
        for _ in range(200):
            tree = random_table_tree(rng)
            seq = tokenize_structure(tree)
            assert count_cell_tokens(seq) == len(tree.cells())

    def test_roundtrip_from_html(self):
        html = (
            '<table><thead><tr><td>h1</td><td>h2</td></tr></thead>'
            '<tbody><tr><td rowspan="2">a</td><td>b</td></tr>'
            "<tr><td>c</td></tr></tbody></table>"
        )
        tree = parse_html(html)
        assert detokenize_structure(tokenize_structure(tree)) == tree.strip_content()


class TestCellTokens:
    CV = cell_vocab("ABx7")

    def test_two_chars(self):
        ids = tokenize_cell("AB", self.CV)
        assert ids == [self.CV.id("A"), self.CV.id("B"), self.CV.eos_id]

    def test_empty_cell(self):
        assert tokenize_cell("", self.CV) == [self.CV.eos_id]

    def test_roundtrip(self):
        assert detokenize_cell(tokenize_cell("x7", self.CV), self.CV) == "x7"

    def test_unknown_substituted_and_counted(self):
        ids = tokenize_cell("A?B", self.CV)
        assert ids[1] == self.CV.unk_id
        assert unknown_count("A?B", self.CV) == 1

    def test_too_long(self):
        with pytest.raises(TooLong):
            tokenize_cell("AAAA", self.CV, max_len=3)

    @given(st.text(alphabet="ABx7", max_size=20))
    def test_roundtrip_property(self, text):
        assert detokenize_cell(tokenize_cell(text, self.CV), self.CV) == text

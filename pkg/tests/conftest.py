"""Shared fixtures and random tree builders."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from wstabnet.table import Node

settings.register_profile("suite", deadline=None, max_examples=60)
settings.load_profile("suite")


def random_table_tree(
    rng: np.random.Generator,
    max_rows: int = 3,
    max_cols: int = 3,
    max_span: int = 3,
    alphabet: str = "abxy",
    max_text: int = 3,
    header_prob: float = 0.3,
    span_prob: float = 0.25,
) -> Node:
    """A random grammatical table tree (not necessarily rectangular).

    TEDS and the tokenizer accept any tree of the grammar, so this sampler
    is deliberately looser than the image generator: ragged rows, empty
    rows, and arbitrary spans all occur.
    """
    def random_td() -> Node:
        rowspan = colspan = 1
        if rng.random() < span_prob:
            if rng.random() < 0.5:
                rowspan = int(rng.integers(2, max_span + 1))
            else:
                colspan = int(rng.integers(2, max_span + 1))
        length = int(rng.integers(0, max_text + 1))
        text = "".join(alphabet[k] for k in rng.integers(0, len(alphabet), size=length))
        return Node("td", rowspan=rowspan, colspan=colspan, content=text)

    def random_tr() -> Node:
        n = int(rng.integers(0, max_cols + 1))
        return Node("tr", children=tuple(random_td() for _ in range(n)))

    def random_section(tag: str) -> Node:
        n = int(rng.integers(1, max_rows + 1))
        return Node(tag, children=tuple(random_tr() for _ in range(n)))

    sections = []
    if rng.random() < header_prob:
        sections.append(random_section("thead"))
    sections.append(random_section("tbody"))
    return Node("table", children=tuple(sections))


def small_tree(rng: np.random.Generator, max_nodes: int = 12) -> Node:
    """Random tree capped at ``max_nodes`` elements, for the oracle tests."""
    while True:
        tree = random_table_tree(rng, max_rows=2, max_cols=3, max_text=2)
        if tree.node_count() <= max_nodes:
            return tree


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)

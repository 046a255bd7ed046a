"""Token sequences for table structure and cell text.

Structure tags are tokenized at tag level with one merged token for a plain
cell, ``<td></td>``. A spanning cell decomposes into ``<td``, the span
keyword(s) with a separate numeric token each (rowspan before colspan), and
``>`` followed by ``</td>``. The ``<table>`` wrapper carries no information
and is never emitted; consumers re-add it. Cell text is tokenized one
character per token.

Detokenization is strict by default (ground truth must be well formed) and
has a repair mode for model output: it never raises, skipping tokens that do
not fit and closing whatever was left open.
"""

from __future__ import annotations

from .table import Node

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"

MAX_SPAN = 10

STRUCT_TOKENS = (
    PAD,
    SOS,
    EOS,
    UNK,
    "<thead>",
    "</thead>",
    "<tbody>",
    "</tbody>",
    "<tr>",
    "</tr>",
    "<td></td>",
    "<td",
    ">",
    "</td>",
    "rowspan=",
    "colspan=",
    *(str(n) for n in range(2, MAX_SPAN + 1)),
)

# Emitting either of these tokens opens a new cell and fires the cell decoder.
CELL_TRIGGER_TOKENS = ("<td></td>", "<td")

# Default alphabet shared by the desk presets: digits, sixteen letters, space.
DEFAULT_ALPHABET = "0123456789ABCDEFGHIJKLMNOP "


class SpanOutOfVocab(ValueError):
    """A cell span exceeds the largest numeric token."""


class IllFormedSequence(ValueError):
    """A structure token sequence cannot be decoded under the grammar."""


class TooLong(ValueError):
    """A token sequence exceeds its configured maximum length."""


class Vocab:
    """Bijective token <-> dense id mapping; ``<pad>`` is always id 0."""

    def __init__(self, tokens):
        self.tokens = tuple(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        if self.tokens[0] != PAD:
            raise ValueError("token 0 must be <pad>")
        self.pad_id = 0
        self.sos_id = self.index[SOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index[token]

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path) -> None:
        """One token per line; the line number is the id."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "r", encoding="utf-8", newline="\n") as fh:
            raw = fh.read()
        if raw.endswith("\n"):
            raw = raw[:-1]
        return cls(raw.split("\n"))


def struct_vocab() -> Vocab:
    return Vocab(STRUCT_TOKENS)


def cell_vocab(alphabet: str = DEFAULT_ALPHABET) -> Vocab:
    if len(set(alphabet)) != len(alphabet):
        raise ValueError("alphabet contains duplicate characters")
    return Vocab((PAD, SOS, EOS, UNK, *alphabet))


_STRUCT = struct_vocab()


def tokenize_structure(
    tree: Node,
    vocab: Vocab | None = None,
    *,
    max_len: int | None = None,
    strict: bool = True,
) -> list[int]:
    """Token ids for a tree's structure, ``<eos>``-terminated.

    Spans above the numeric vocabulary raise :class:`SpanOutOfVocab` when
    strict, and are clamped to the largest token otherwise.
    """
    vocab = vocab or _STRUCT
    out: list[str] = []
    _emit(tree, out, strict)
    out.append(EOS)
    ids = [vocab.id(tok) for tok in out]
    if max_len is not None and len(ids) > max_len:
        raise TooLong(f"structure sequence length {len(ids)} exceeds {max_len}")
    return ids


def _emit(node: Node, out: list[str], strict: bool) -> None:
    if node.tag == "table":
        for child in node.children:
            _emit(child, out, strict)
        return
    if node.tag == "td":
        if node.rowspan == 1 and node.colspan == 1:
            out.append("<td></td>")
            return
        out.append("<td")
        for keyword, span in (("rowspan=", node.rowspan), ("colspan=", node.colspan)):
            if span == 1:
                continue
            if span > MAX_SPAN:
                if strict:
                    raise SpanOutOfVocab(f"{keyword}{span} exceeds max span {MAX_SPAN}")
                span = MAX_SPAN
            out.append(keyword)
            out.append(str(span))
        out.append(">")
        out.append("</td>")
        return
    out.append(f"<{node.tag}>")
    for child in node.children:
        _emit(child, out, strict)
    out.append(f"</{node.tag}>")


def count_cell_tokens(ids: list[int], vocab: Vocab | None = None) -> int:
    """How many cells a structure sequence opens (the trigger count)."""
    vocab = vocab or _STRUCT
    trigger_ids = {vocab.id(tok) for tok in CELL_TRIGGER_TOKENS}
    return sum(1 for i in ids if i in trigger_ids)


class _TokRun:
    """Cursor over structure tokens as strings, stripped of sos/eos/pad."""

    def __init__(self, ids, vocab: Vocab, repair: bool):
        toks = [vocab.token(i) for i in ids]
        if toks and toks[0] == SOS:
            toks = toks[1:]
        if EOS in toks:
            cut = toks.index(EOS)
            tail = toks[cut + 1 :]
            if not repair and any(t != PAD for t in tail):
                raise IllFormedSequence("tokens after <eos>")
            toks = toks[:cut]
        elif not repair and PAD in toks:
            # Right padding without a terminator: accept pads only.
            cut = toks.index(PAD)
            if any(t != PAD for t in toks[cut:]):
                raise IllFormedSequence("tokens after padding")
            toks = toks[:cut]
        self.toks = toks
        self.pos = 0

    def peek(self) -> str | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def next(self) -> str:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok


def detokenize_structure(
    ids: list[int],
    vocab: Vocab | None = None,
    *,
    repair: bool = False,
) -> Node:
    """Rebuild the tree skeleton (empty cell contents) from structure ids.

    Strict mode raises :class:`IllFormedSequence` on unbalanced tags, a
    numeric token without a preceding span keyword, ``>`` without an open
    ``<td``, and similar. Repair mode always returns a valid tree.
    """
    vocab = vocab or _STRUCT
    run = _TokRun(ids, vocab, repair)
    # Stack of open containers: table at the bottom, then thead/tbody, tr.
    stack: list[tuple[str, list[Node]]] = [("table", [])]

    def fail(msg: str) -> None:
        raise IllFormedSequence(msg)

    def close_to(tag: str) -> bool:
        if not any(frame[0] == tag for frame in stack):
            return False
        while stack[-1][0] != tag:
            close_top()
        return True

    def close_top() -> None:
        tag, children = stack.pop()
        stack[-1][1].append(Node(tag, children=tuple(children)))

    def add_cell(rowspan: int, colspan: int) -> None:
        if stack[-1][0] != "tr":
            if not repair:
                fail("cell token outside <tr>")
            if stack[-1][0] == "table":
                stack.append(("tbody", []))
            stack.append(("tr", []))
        stack[-1][1].append(Node("td", rowspan=rowspan, colspan=colspan))

    while (tok := run.peek()) is not None:
        run.next()
        if tok in ("<thead>", "<tbody>"):
            tag = tok[1:-1]
            if stack[-1][0] != "table":
                if not repair:
                    fail(f"{tok} not allowed inside <{stack[-1][0]}>")
                while stack[-1][0] != "table":
                    close_top()
            stack.append((tag, []))
        elif tok in ("</thead>", "</tbody>", "</tr>"):
            tag = tok[2:-1]
            if stack[-1][0] != tag:
                if not repair:
                    fail(f"unbalanced {tok}")
                if not close_to(tag):
                    continue
            close_top()
        elif tok == "<tr>":
            if stack[-1][0] not in ("thead", "tbody"):
                if not repair:
                    fail(f"<tr> not allowed inside <{stack[-1][0]}>")
                if stack[-1][0] == "tr":
                    close_top()
                if stack[-1][0] == "table":
                    stack.append(("tbody", []))
            stack.append(("tr", []))
        elif tok == "<td></td>":
            add_cell(1, 1)
        elif tok == "<td":
            rowspan, colspan = _read_spans(run, repair, fail)
            add_cell(rowspan, colspan)
        elif tok in (">", "</td>"):
            if not repair:
                fail(f"{tok!r} without an opening <td")
        elif tok in ("rowspan=", "colspan="):
            if not repair:
                fail(f"{tok!r} outside a <td ...> group")
        elif tok.isdigit():
            if not repair:
                fail(f"numeric token {tok!r} not preceded by a span keyword")
        else:  # <sos>/<pad>/<unk> inside the body
            if not repair:
                fail(f"unexpected token {tok!r}")
    if len(stack) > 1 and not repair:
        fail(f"unclosed <{stack[-1][0]}>")
    while len(stack) > 1:
        close_top()
    return Node("table", children=tuple(stack[0][1]))


# Tokens that end a dangling "<td ..." attribute group in repair mode; the
# cell is closed with whatever spans were collected and the token replayed.
_GROUP_BREAKERS = frozenset(
    ("<td></td>", "<td", "<tr>", "</tr>", "<thead>", "</thead>", "<tbody>", "</tbody>")
)


def _read_spans(run: _TokRun, repair: bool, fail) -> tuple[int, int]:
    """Consume ``rowspan=/colspan= <n> ... > </td>`` after an opening ``<td``."""
    spans = {"rowspan=": 1, "colspan=": 1}
    seen: set[str] = set()
    while True:
        tok = run.peek()
        if tok in ("rowspan=", "colspan="):
            run.next()
            if tok in seen and not repair:
                fail(f"duplicate {tok!r} in one cell")
            num = run.peek()
            if num is not None and num.isdigit():
                run.next()
                seen.add(tok)
                spans[tok] = int(num)
            elif not repair:
                fail(f"{tok!r} not followed by a numeric token")
        elif tok == ">":
            run.next()
            closer = run.peek()
            if closer == "</td>":
                run.next()
            elif not repair:
                fail("'>' not followed by '</td>'")
            return spans["rowspan="], spans["colspan="]
        elif tok == "</td>":
            run.next()
            if not repair:
                fail("'</td>' without closing '>'")
            return spans["rowspan="], spans["colspan="]
        elif tok is None or tok in _GROUP_BREAKERS:
            if not repair:
                fail(f"unterminated <td group (next token {tok!r})")
            return spans["rowspan="], spans["colspan="]
        else:
            # Debris inside the group: bare numerals, <unk>, <sos>, <pad>.
            if not repair:
                fail(f"unexpected token {tok!r} inside a <td ...> group")
            run.next()


def tokenize_cell(
    text: str,
    vocab: Vocab,
    *,
    max_len: int | None = None,
) -> list[int]:
    """Character ids for one cell's text, ``<eos>``-terminated.

    Characters outside the alphabet become ``<unk>`` (count them with
    :func:`unknown_count` when that matters).
    """
    ids = [vocab.index.get(ch, vocab.unk_id) for ch in text]
    ids.append(vocab.eos_id)
    if max_len is not None and len(ids) > max_len:
        raise TooLong(f"cell sequence length {len(ids)} exceeds {max_len}")
    return ids


def detokenize_cell(ids: list[int], vocab: Vocab) -> str:
    """Text for one cell; control tokens are dropped, ``<eos>`` terminates."""
    chars: list[str] = []
    control = {vocab.pad_id, vocab.sos_id, vocab.unk_id}
    for i in ids:
        if i == vocab.eos_id:
            break
        if i in control:
            continue
        chars.append(vocab.token(i))
    return "".join(chars)


def unknown_count(text: str, vocab: Vocab) -> int:
    """How many characters of ``text`` fall outside the alphabet."""
    return sum(1 for ch in text if ch not in vocab.index)

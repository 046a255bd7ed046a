"""Deterministic generator of (table image, ground-truth HTML) pairs.

Structures are sampled on a grid-occupancy model so every row keeps the same
effective width; spans of 2-3 are inserted per anchor cell with a configured
probability whenever one fits. Rendering draws 1-pixel borders on a light
background and cell text with a built-in 5x7 glyph font; merged cells get no
interior borders. Everything is a pure function of the seed, and each sample
index derives its own random stream, so generation parallelizes without
changing the output.

Dataset layout on disk: ``images/{id}.pgm`` (binary 8-bit PGM) plus
``annotations.jsonl`` with ``{"id", "html", "split"}`` per line. Token
sequences are re-derived from the HTML at load time; the HTML is the single
source of truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .table import Node, parse_html, to_html
from .tokens import DEFAULT_ALPHABET, cell_vocab, tokenize_cell, tokenize_structure


class Unsatisfiable(ValueError):
    """The configured ranges cannot produce a drawable table."""


class Overflow(ValueError):
    """Cell text does not fit its box."""


class DecodeError(ValueError):
    """A dataset record or image file is corrupt."""


# 5x7 bitmaps; 'X' is ink. Covers digits, A-Z and space.
_GLYPH_ROWS = {
    "0": (".XXX.", "X...X", "X..XX", "X.X.X", "XX..X", "X...X", ".XXX."),
    "1": ("..X..", ".XX..", "..X..", "..X..", "..X..", "..X..", ".XXX."),
    "2": (".XXX.", "X...X", "....X", "...X.", "..X..", ".X...", "XXXXX"),
    "3": ("XXXXX", "....X", "...X.", "..XX.", "....X", "X...X", ".XXX."),
    "4": ("...X.", "..XX.", ".X.X.", "X..X.", "XXXXX", "...X.", "...X."),
    "5": ("XXXXX", "X....", "XXXX.", "....X", "....X", "X...X", ".XXX."),
    "6": ("..XX.", ".X...", "X....", "XXXX.", "X...X", "X...X", ".XXX."),
    "7": ("XXXXX", "....X", "...X.", "..X..", ".X...", ".X...", ".X..."),
    "8": (".XXX.", "X...X", "X...X", ".XXX.", "X...X", "X...X", ".XXX."),
    "9": (".XXX.", "X...X", "X...X", ".XXXX", "....X", "...X.", ".XX.."),
    "A": (".XXX.", "X...X", "X...X", "XXXXX", "X...X", "X...X", "X...X"),
    "B": ("XXXX.", "X...X", "X...X", "XXXX.", "X...X", "X...X", "XXXX."),
    "C": (".XXX.", "X...X", "X....", "X....", "X....", "X...X", ".XXX."),
    "D": ("XXXX.", "X...X", "X...X", "X...X", "X...X", "X...X", "XXXX."),
    "E": ("XXXXX", "X....", "X....", "XXXX.", "X....", "X....", "XXXXX"),
    "F": ("XXXXX", "X....", "X....", "XXXX.", "X....", "X....", "X...."),
    "G": (".XXX.", "X...X", "X....", "X.XXX", "X...X", "X...X", ".XXXX"),
    "H": ("X...X", "X...X", "X...X", "XXXXX", "X...X", "X...X", "X...X"),
    "I": (".XXX.", "..X..", "..X..", "..X..", "..X..", "..X..", ".XXX."),
    "J": ("..XXX", "...X.", "...X.", "...X.", "...X.", "X..X.", ".XX.."),
    "K": ("X...X", "X..X.", "X.X..", "XX...", "X.X..", "X..X.", "X...X"),
    "L": ("X....", "X....", "X....", "X....", "X....", "X....", "XXXXX"),
    "M": ("X...X", "XX.XX", "X.X.X", "X.X.X", "X...X", "X...X", "X...X"),
    "N": ("X...X", "X...X", "XX..X", "X.X.X", "X..XX", "X...X", "X...X"),
    "O": (".XXX.", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX."),
    "P": ("XXXX.", "X...X", "X...X", "XXXX.", "X....", "X....", "X...."),
    "Q": (".XXX.", "X...X", "X...X", "X...X", "X.X.X", "X..X.", ".XX.X"),
    "R": ("XXXX.", "X...X", "X...X", "XXXX.", "X.X..", "X..X.", "X...X"),
    "S": (".XXXX", "X....", "X....", ".XXX.", "....X", "....X", "XXXX."),
    "T": ("XXXXX", "..X..", "..X..", "..X..", "..X..", "..X..", "..X.."),
    "U": ("X...X", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX."),
    "V": ("X...X", "X...X", "X...X", "X...X", "X...X", ".X.X.", "..X.."),
    "W": ("X...X", "X...X", "X...X", "X.X.X", "X.X.X", "XX.XX", "X...X"),
    "X": ("X...X", "X...X", ".X.X.", "..X..", ".X.X.", "X...X", "X...X"),
    "Y": ("X...X", "X...X", ".X.X.", "..X..", "..X..", "..X..", "..X.."),
    "Z": ("XXXXX", "....X", "...X.", "..X..", ".X...", "X....", "XXXXX"),
    " ": (".....", ".....", ".....", ".....", ".....", ".....", "....."),
}

GLYPH_W, GLYPH_H = 5, 7
GLYPHS = {
    ch: np.array([[c == "X" for c in row] for row in rows], dtype=bool)
    for ch, rows in _GLYPH_ROWS.items()
}


@dataclass
class GenConfig:
    seed: int = 0
    rows: tuple[int, int] = (1, 4)
    cols: tuple[int, int] = (1, 4)
    span_prob: float = 0.15
    header_prob: float = 0.3
    alphabet: str = DEFAULT_ALPHABET
    max_cell_len: int = 2
    image_hw: tuple[int, int] = (64, 64)
    glyph_scale: int = 1
    margin: int = 2
    # Per-sample margin grows by up to this many pixels, shifting borders
    # and glyphs so features cannot be memorized by absolute position.
    margin_jitter: int = 3
    cell_pad: int = 2
    # Header rows get a slightly darker fill; without a visual cue the
    # thead/tbody split would be unrecoverable from pixels.
    header_shade: float = 0.85

    def __post_init__(self):
        self.rows = tuple(self.rows)
        self.cols = tuple(self.cols)
        self.image_hw = tuple(self.image_hw)
        missing = sorted(set(self.alphabet) - set(GLYPHS))
        if missing:
            raise ValueError(f"no glyphs for characters {missing!r}")
        if self.rows[0] < 1 or self.cols[0] < 1:
            raise ValueError("row/col ranges must start at 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [H, W] floats in [0, 1]
    html: str
    struct_tokens: list[int]
    cell_tokens: list[list[int]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Structure sampling
# ---------------------------------------------------------------------------

_MAX_SPAN_EXTENT = 3


def _span_options(owner, i, j, n_rows, n_cols, row_limit):
    """Feasible (rowspan, colspan) extents beyond 1x1 at anchor (i, j)."""
    options = []
    for rs in range(1, _MAX_SPAN_EXTENT + 1):
        if i + rs > min(n_rows, row_limit):
            break
        for cs in range(1, _MAX_SPAN_EXTENT + 1):
            if (rs, cs) == (1, 1) or j + cs > n_cols:
                continue
            if all(
                owner[r][c] == -1
                for r in range(i, i + rs)
                for c in range(j, j + cs)
            ):
                options.append((rs, cs))
    return options


def _sample_structure(config: GenConfig, rng: np.random.Generator):
    """Grid occupancy plus per-row anchored cells; also reports span stats."""
    n_rows = int(rng.integers(config.rows[0], config.rows[1] + 1))
    n_cols = int(rng.integers(config.cols[0], config.cols[1] + 1))
    header = bool(n_rows >= 2 and rng.random() < config.header_prob)
    owner = [[-1] * n_cols for _ in range(n_rows)]
    cells = []  # (anchor row, anchor col, rowspan, colspan)
    eligible = placed = 0
    for i in range(n_rows):
        # The header row never spans into the body.
        row_limit = 1 if (header and i == 0) else n_rows
        for j in range(n_cols):
            if owner[i][j] != -1:
                continue
            rs = cs = 1
            options = _span_options(owner, i, j, n_rows, n_cols, row_limit)
            if options:
                eligible += 1
                if rng.random() < config.span_prob:
                    rs, cs = options[int(rng.integers(len(options)))]
                    placed += 1
            cell_id = len(cells)
            cells.append((i, j, rs, cs))
            for r in range(i, i + rs):
                for c in range(j, j + cs):
                    owner[r][c] = cell_id
    return n_rows, n_cols, header, owner, cells, {"eligible": eligible, "placed": placed}


def _tree_from_cells(n_rows, header, cells, contents) -> Node:
    rows: list[list[Node]] = [[] for _ in range(n_rows)]
    for (i, _j, rs, cs), text in zip(cells, contents):
        rows[i].append(Node("td", rowspan=rs, colspan=cs, content=text))
    trs = [Node("tr", children=tuple(r)) for r in rows]
    if header:
        sections = (
            Node("thead", children=(trs[0],)),
            Node("tbody", children=tuple(trs[1:])),
        )
    else:
        sections = (Node("tbody", children=tuple(trs)),)
    return Node("table", children=sections)


def grid_from_tree(tree: Node):
    """Recover the occupancy grid of a tree; raises if rows are ragged."""
    trs = tree.rows()
    n_rows = len(trs)
    if n_rows == 0:
        return 0, 0, []
    carry: dict[int, tuple[int, int]] = {}  # col -> (remaining rows, cell id)
    owner: list[list[int]] = []
    cell_id = 0
    widths = set()
    for tr in trs:
        row: list[int] = []
        col = 0

        def skip_carry(col):
            while col in carry:
                rem, cid = carry[col]
                row.append(cid)
                if rem == 1:
                    del carry[col]
                else:
                    carry[col] = (rem - 1, cid)
                col += 1
            return col

        col = skip_carry(col)
        for td in tr.children:
            for _ in range(td.colspan):
                row.append(cell_id)
                if td.rowspan > 1:
                    carry[col] = (td.rowspan - 1, cell_id)
                col += 1
                col = skip_carry(col)
            cell_id += 1
        owner.append(row)
        widths.add(len(row))
    if len(widths) != 1 or carry:
        raise Unsatisfiable("tree rows do not form a rectangular grid")
    return n_rows, widths.pop(), owner


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _boundaries(n: int, lo: int, hi: int) -> list[int]:
    bounds = [lo + (hi - lo) * k // n for k in range(n + 1)]
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise Unsatisfiable(f"{n} tracks do not fit in {hi - lo + 1} pixels")
    return bounds


def _char_capacity(box_w: int, box_h: int, scale: int) -> int:
    if box_h < GLYPH_H * scale or box_w <= 0:
        return 0
    return (box_w + scale) // ((GLYPH_W + 1) * scale)


def _text_width(n_chars: int, scale: int) -> int:
    if n_chars == 0:
        return 0
    return n_chars * (GLYPH_W + 1) * scale - scale


def _header_rows(tree: Node) -> set[int]:
    """Grid-row indices that belong to a thead section, document order."""
    rows: set[int] = set()
    cursor = 0
    for section in tree.children:
        for _ in section.children:
            if section.tag == "thead":
                rows.add(cursor)
            cursor += 1
    return rows


def render(tree: Node, config: GenConfig) -> np.ndarray:
    """Rasterize a table tree; deterministic for identical inputs."""
    h, w = config.image_hw
    n_rows, n_cols, owner = grid_from_tree(tree)
    img = np.ones((h, w), dtype=np.float64)
    if n_rows == 0 or n_cols == 0:
        return img
    xs = _boundaries(n_cols, config.margin, w - 1 - config.margin)
    ys = _boundaries(n_rows, config.margin, h - 1 - config.margin)
    anchors: dict[int, tuple[int, int]] = {}
    extents: dict[int, tuple[int, int]] = {}
    for i in range(n_rows):
        for j in range(n_cols):
            cid = owner[i][j]
            if cid not in anchors:
                anchors[cid] = (i, j)
                extents[cid] = (i, j)
            else:
                ei, ej = extents[cid]
                extents[cid] = (max(ei, i), max(ej, j))
    # Header fill first; borders and glyphs draw over it.
    header_rows = _header_rows(tree)
    if header_rows:
        for cid, (ai, aj) in anchors.items():
            if ai in header_rows:
                ei, ej = extents[cid]
                img[ys[ai] + 1 : ys[ei + 1], xs[aj] + 1 : xs[ej + 1]] = config.header_shade
    # Outer frame.
    img[ys[0], xs[0] : xs[-1] + 1] = 0.0
    img[ys[-1], xs[0] : xs[-1] + 1] = 0.0
    img[ys[0] : ys[-1] + 1, xs[0]] = 0.0
    img[ys[0] : ys[-1] + 1, xs[-1]] = 0.0
    # Interior borders, skipped inside merged regions.
    for j in range(1, n_cols):
        for i in range(n_rows):
            if owner[i][j - 1] != owner[i][j]:
                img[ys[i] : ys[i + 1] + 1, xs[j]] = 0.0
    for i in range(1, n_rows):
        for j in range(n_cols):
            if owner[i - 1][j] != owner[i][j]:
                img[ys[i], xs[j] : xs[j + 1] + 1] = 0.0
    # Text, anchored at each cell's padded top-left corner.
    scale = config.glyph_scale
    pad = config.cell_pad
    for cid, cell in enumerate(tree.cells()):
        if not cell.content:
            continue
        ai, aj = anchors[cid]
        ei, ej = extents[cid]
        x0 = xs[aj] + 1 + pad
        y0 = ys[ai] + 1 + pad
        box_w = xs[ej + 1] - xs[aj] - 1 - 2 * pad
        box_h = ys[ei + 1] - ys[ai] - 1 - 2 * pad
        if _text_width(len(cell.content), scale) > box_w or GLYPH_H * scale > box_h:
            raise Overflow(f"text {cell.content!r} does not fit a {box_w}x{box_h} box")
        for idx, ch in enumerate(cell.content):
            glyph = GLYPHS[ch]
            gx = x0 + idx * (GLYPH_W + 1) * scale
            for r in range(GLYPH_H):
                for c in range(GLYPH_W):
                    if glyph[r, c]:
                        img[
                            y0 + r * scale : y0 + (r + 1) * scale,
                            gx + c * scale : gx + (c + 1) * scale,
                        ] = 0.0
    return img


# ---------------------------------------------------------------------------
# Sample generation
# ---------------------------------------------------------------------------

def sample_table(config: GenConfig, rng: np.random.Generator) -> Node:
    """One random table tree, with contents sized to fit their boxes."""
    n_rows, n_cols, header, _owner, cells, _stats = _sample_structure(config, rng)
    h, w = config.image_hw
    xs = _boundaries(n_cols, config.margin, w - 1 - config.margin)
    ys = _boundaries(n_rows, config.margin, h - 1 - config.margin)
    contents = []
    for i, j, rs, cs in cells:
        box_w = xs[j + cs] - xs[j] - 1 - 2 * config.cell_pad
        box_h = ys[i + rs] - ys[i] - 1 - 2 * config.cell_pad
        capacity = min(config.max_cell_len, _char_capacity(box_w, box_h, config.glyph_scale))
        length = int(rng.integers(0, capacity + 1))
        picks = rng.integers(0, len(config.alphabet), size=length)
        contents.append("".join(config.alphabet[k] for k in picks))
    return _tree_from_cells(n_rows, header, cells, contents)


_MAX_ATTEMPTS = 100


def build_sample(config: GenConfig, index: int) -> Sample:
    """Sample ``index`` of the dataset; independent of every other index."""
    rng = np.random.default_rng([config.seed, index])
    cvocab = cell_vocab(config.alphabet)
    last_error: Exception | None = None
    for _ in range(_MAX_ATTEMPTS):
        laid_out = config
        if config.margin_jitter:
            offset = int(rng.integers(0, config.margin_jitter + 1))
            laid_out = replace(config, margin=config.margin + offset)
        try:
            tree = sample_table(laid_out, rng)
            image = render(tree, laid_out)
        except (Unsatisfiable, Overflow) as exc:
            last_error = exc
            continue
        return Sample(
            id=f"s{index:06d}",
            image=image,
            html=to_html(tree),
            struct_tokens=tokenize_structure(tree),
            cell_tokens=[tokenize_cell(c.content, cvocab) for c in tree.cells()],
        )
    raise Unsatisfiable(f"no drawable table after {_MAX_ATTEMPTS} attempts: {last_error}")


def generate(config: GenConfig, n: int) -> list[Sample]:
    """``n`` deterministic samples; same seed and config, same dataset."""
    return [build_sample(config, i) for i in range(n)]


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM; values are scaled from [0, 1]."""
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Back to floats in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        parts = raw.split(b"\n", 3)
        magic, dims, maxval, pixels = parts[0], parts[1], parts[2], parts[3]
        if magic != b"P5" or maxval != b"255":
            raise ValueError("not an 8-bit binary PGM")
        w, h = (int(v) for v in dims.split())
        data = np.frombuffer(pixels[: w * h], dtype=np.uint8)
        if data.size != w * h:
            raise ValueError("truncated pixel data")
    except (ValueError, IndexError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return data.reshape(h, w).astype(np.float64) / 255.0


def write_dataset(samples: list[Sample], out_dir, splits: list[str]) -> None:
    """Write images and one annotation line per sample, in order."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "annotations.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for sample, split in zip(samples, splits):
            write_pgm(out / "images" / f"{sample.id}.pgm", sample.image)
            line = json.dumps(
                {"id": sample.id, "html": sample.html, "split": split},
                sort_keys=True,
                separators=(",", ":"),
            )
            fh.write(line + "\n")


def load_dataset(
    data_dir,
    split: str | None = None,
    alphabet: str = DEFAULT_ALPHABET,
) -> list[Sample]:
    """Read a dataset back; tokens are re-derived from the stored HTML.

    ``alphabet`` is the model's character set: out-of-alphabet cell text
    becomes ``<unk>``. Only ``id``, ``html`` and ``split`` are consumed; any
    extra annotation keys (bounding boxes included) are ignored by design.
    """
    data = Path(data_dir)
    ann = data / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(ann)
    cvocab = cell_vocab(alphabet)
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(ann, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                sample_id = record["id"]
                html = record["html"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DecodeError(f"{ann}:{lineno}: {exc}") from exc
            if sample_id in seen:
                raise DecodeError(f"{ann}:{lineno}: duplicate id {sample_id!r}")
            seen.add(sample_id)
            if split is not None and record.get("split") != split:
                continue
            tree = parse_html(html)
            samples.append(
                Sample(
                    id=sample_id,
                    image=read_pgm(data / "images" / f"{sample_id}.pgm"),
                    html=html,
                    struct_tokens=tokenize_structure(tree),
                    cell_tokens=[tokenize_cell(c.content, cvocab) for c in tree.cells()],
                )
            )
    return samples

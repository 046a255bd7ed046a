"""Greedy autoregressive recognition and batch prediction.

The structure decoder emits argmax tokens from the start token until the end
token or the length cap. Every emitted cell-opening token immediately runs
one greedy cell decode conditioned on the hidden vector at the position that
produced it; decoding is interleaved, one cell at a time. The emitted
structure sequence is rebuilt in repair mode, so even a garbage decode
yields a well-formed (possibly empty) table.

Each step recomputes the full prefix. That is quadratic in sequence length
but exact, and cheap at the scales this runs at.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from . import autodiff as ad
from .network import (
    NetConfig,
    cell_decoder_forward,
    encode,
    hidden_row,
    structure_decoder_forward,
)
from .synth import load_dataset
from .table import Node, to_html
from .tokens import cell_vocab, detokenize_cell, detokenize_structure, struct_vocab
from .training import load_checkpoint


class ConfigMismatch(ValueError):
    """Checkpoint configuration incompatible with the data."""


@dataclass
class RecognizeResult:
    html: str
    struct_tokens: list[int]  # emitted ids, end token included when reached
    cell_texts: list[str]  # one entry per cell-opening token, reading order
    degenerate: bool  # no cell was produced


def _decode_cell(memory, cell_hidden, params, config: NetConfig, cvocab) -> list[int]:
    ids = [cvocab.sos_id]
    out: list[int] = []
    while len(out) < config.max_cell_len:
        logits = cell_decoder_forward(memory, cell_hidden, ids, params, config)
        next_id = int(logits.data[-1].argmax())
        out.append(next_id)
        if next_id == cvocab.eos_id:
            break
        ids.append(next_id)
    return out


def recognize(image, params, config: NetConfig) -> RecognizeResult:
    """Greedy decode of one image into canonical table HTML."""
    svocab = struct_vocab()
    cvocab = cell_vocab(config.alphabet)
    trigger_ids = {svocab.id("<td></td>"), svocab.id("<td")}
    with ad.no_grad():
        memory = encode(image, params, config)
        ids = [svocab.sos_id]
        emitted: list[int] = []
        cell_texts: list[str] = []
        while len(emitted) < config.max_struct_len:
            logits, hidden = structure_decoder_forward(memory, ids, params, config)
            next_id = int(logits.data[-1].argmax())
            emitted.append(next_id)
            if next_id == svocab.eos_id:
                break
            if next_id in trigger_ids:
                cell_ids = _decode_cell(
                    memory, hidden_row(hidden, len(ids) - 1), params, config, cvocab
                )
                cell_texts.append(detokenize_cell(cell_ids, cvocab))
            ids.append(next_id)
    skeleton = detokenize_structure(emitted, svocab, repair=True)
    cells = skeleton.cells()
    assert len(cells) == len(cell_texts), "trigger count diverged from cell count"
    texts = iter(cell_texts)
    tree = _fill_contents(skeleton, texts)
    return RecognizeResult(
        html=to_html(tree),
        struct_tokens=emitted,
        cell_texts=cell_texts,
        degenerate=not cells,
    )


def _fill_contents(node: Node, texts) -> Node:
    if node.tag == "td":
        return replace(node, content=next(texts))
    return replace(node, children=tuple(_fill_contents(c, texts) for c in node.children))


def infer_batch(
    data_dir,
    checkpoint_path,
    out_path,
    split: str | None = None,
    threads: int = 1,
) -> int:
    """Recognize every sample of a dataset, one JSON line per prediction.

    Output lines are ordered by sample id and are byte-stable across runs
    with the same checkpoint. Returns the number of predictions written.
    """
    params, net, _train = load_checkpoint(checkpoint_path)
    samples = load_dataset(data_dir, split=split, alphabet=net.alphabet)
    samples.sort(key=lambda s: s.id)
    for sample in samples:
        if sample.image.shape != tuple(net.image_hw):
            raise ConfigMismatch(
                f"{sample.id}: image {sample.image.shape} vs model {net.image_hw}"
            )

    def work(sample):
        return sample.id, recognize(sample.image, params, net).html

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, samples))
    else:
        results = [work(s) for s in samples]
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        for sample_id, html in results:
            fh.write(
                json.dumps(
                    {"id": sample_id, "html": html},
                    sort_keys=True,
                    separators=(",", ":"),
                )
                + "\n"
            )
    return len(results)

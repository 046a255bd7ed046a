"""Batch command line: synth, train, infer, score, tokenize, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data or verification error. All
randomness hangs off ``--seed``; identical inputs and seed give identical
outputs, including checkpoint and prediction bytes.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import inference, synth, teds, tokens, training
from .network import NetConfig, build_params, forward_train
from .presets import PRESETS, preset
from .synth import GenConfig, Sample
from .table import MalformedHtml, parse_html
from .training import TrainConfig

DATA_ERRORS = (
    MalformedHtml,
    tokens.IllFormedSequence,
    tokens.SpanOutOfVocab,
    tokens.TooLong,
    teds.DuplicateId,
    synth.Unsatisfiable,
    synth.Overflow,
    synth.DecodeError,
    training.DatasetEmpty,
    training.Misaligned,
    training.BadMagic,
    training.TruncatedFile,
    inference.ConfigMismatch,
    ad.ShapeMismatch,
    ad.EmptyAfterIgnore,
    ad.IdOutOfRange,
    OSError,
    KeyError,
    TypeError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def build_parser() -> _Parser:
    parser = _Parser(prog="wstabnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--config", help="JSON file overriding generator fields")
    p.add_argument("--n", type=int, default=100, help="total samples")
    p.add_argument("--n-test", type=int, default=0, help="of which the last N are the test split")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--config", help='JSON file with {"net": {...}, "train": {...}} overrides')
    p.add_argument("--out", required=True, help="checkpoint + metrics directory")
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="recognize every image of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None, help="restrict to one split (default: all)")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="TEDS report for predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--gt-split", default=None, help="score only this ground-truth split")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("tokenize", help="token listing for an HTML file")
    p.add_argument("--html", required=True, help="path to an HTML fragment, or - for stdin")
    p.add_argument("--alphabet", default=tokens.DEFAULT_ALPHABET)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--preset", default="tiny", choices=sorted(PRESETS))
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--max-entries",
        type=int,
        default=None,
        help="check only parameters up to this many entries (quick mode)",
    )
    p.set_defaults(func=cmd_gradcheck)
    return parser


def cmd_synth(args) -> int:
    overrides = _load_json(args.config) if args.config else {}
    config: GenConfig = preset(args.preset, "gen", overrides)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.n_test > args.n:
        raise _UsageError("--n-test cannot exceed --n")
    indices = range(args.n)
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            samples = list(pool.map(lambda i: synth.build_sample(config, i), indices))
    else:
        samples = [synth.build_sample(config, i) for i in indices]
    splits = ["train" if i < args.n - args.n_test else "test" for i in indices]
    synth.write_dataset(samples, args.out, splits)
    print(f"wrote {args.n} samples ({args.n - args.n_test} train, {args.n_test} test) to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = _load_json(args.config) if args.config else {}
    net: NetConfig = preset(args.preset, "net", overrides.get("net"))
    train_cfg: TrainConfig = preset(args.preset, "train", overrides.get("train"))
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)

    def log(summary):
        print(
            f"epoch {summary['epoch']:3d}  loss {summary['loss']:.4f}  "
            f"acc(struct) {summary['token_acc_struct']:.3f}  "
            f"acc(cell) {summary['token_acc_cell']:.3f}  "
            f"lr {summary['lr']:g}  {summary['seconds']:.1f}s"
        )

    final = training.train(args.data, net, train_cfg, args.out, split=args.split, log=log)
    print(f"final checkpoint: {final}")
    if not args.no_figures:
        from .figures import render_training_curves

        fig = render_training_curves(Path(args.out) / "metrics.jsonl")
        print(f"loss curve: {fig}")
    return 0


def cmd_infer(args) -> int:
    n = inference.infer_batch(
        args.data, args.ckpt, args.out, split=args.split, threads=args.threads
    )
    print(f"wrote {n} predictions to {args.out}")
    return 0


def _fmt(value) -> str:
    return "-" if value is None else f"{100.0 * value:6.2f}"


def cmd_score(args) -> int:
    report = teds.score_batch(
        args.pred, args.gt, threads=args.threads, gt_split=args.gt_split
    )
    with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"scored {report['n']} samples")
    print("metric        S       C       All")
    for key, label in (("teds", "TEDS (%)"), ("teds_struct", "TEDS-struct")):
        row = report[key]
        print(f"{label:<12}{_fmt(row['simple'])}  {_fmt(row['complex'])}  {_fmt(row['all'])}")
    if not args.no_figures:
        from .figures import render_score_figures

        for path in render_score_figures(report, args.report):
            print(f"figure: {path}")
    return 0


def cmd_tokenize(args) -> int:
    if args.html == "-":
        html = sys.stdin.read()
    else:
        html = Path(args.html).read_text(encoding="utf-8")
    tree = parse_html(html)
    svocab = tokens.struct_vocab()
    cvocab = tokens.cell_vocab(args.alphabet)
    struct_ids = tokens.tokenize_structure(tree, svocab)
    print("structure:", " ".join(svocab.token(i) for i in struct_ids))
    for k, cell in enumerate(tree.cells()):
        ids = tokens.tokenize_cell(cell.content, cvocab)
        shown = " ".join(cvocab.token(i) for i in ids)
        print(f"cell {k} ({cell.content!r}): {shown}")
    return 0


def gradcheck_sample(net: NetConfig, seed: int = 0) -> Sample:
    """A small fixed sample (random image, 1x2 table) for gradient checks."""
    rng = np.random.default_rng([seed, 0xC8EC])
    html = "<table><tbody><tr><td>01</td><td></td></tr></tbody></table>"
    tree = parse_html(html)
    cvocab = tokens.cell_vocab(net.alphabet)
    return Sample(
        id="gradcheck",
        image=rng.random(net.image_hw),
        html=html,
        struct_tokens=tokens.tokenize_structure(tree),
        cell_tokens=[tokens.tokenize_cell(c.content, cvocab) for c in tree.cells()],
    )


def cmd_gradcheck(args) -> int:
    net: NetConfig = preset(args.preset, "net")
    train_cfg: TrainConfig = preset(args.preset, "train")
    if net.dropout:
        net = replace(net, dropout=0.0)  # the check needs a deterministic forward
    sample = gradcheck_sample(net, args.seed)
    params = build_params(net, seed=args.seed, dtype=np.float64)

    def f():
        struct_logits, cell_logits = forward_train(sample, params, net)
        loss, _info = training.loss_total(
            struct_logits, sample.struct_tokens, cell_logits, sample.cell_tokens,
            train_cfg.lam,
        )
        return loss

    checked = params
    if args.max_entries is not None:
        checked = {k: p for k, p in params.items() if p.data.size <= args.max_entries}
    report = ad.grad_check(f, checked, h=args.h, tol=args.tol)
    worst = sorted(report["per_param"].items(), key=lambda kv: -kv[1])[:5]
    for name, err in worst:
        print(f"  {name:<28} rel_err {err:.3e}")
    print(
        f"checked {len(checked)} tensors ({report['n_params']} entries), "
        f"h={report['h']:g}"
    )
    verdict = "PASS" if report["pass"] else "FAIL"
    print(f"max_rel_err = {report['max_rel_err']:.3e} < {report['tol']:g}: {verdict}")
    return 0 if report["pass"] else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    if getattr(args, "command", None) is None:
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

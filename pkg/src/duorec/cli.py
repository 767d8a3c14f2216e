"""Command-line surface: prep, train, eval, diagnose, sweep.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from .data import (ItemVocab, UserSequence, build_sequences, ingest,
                   split_leave_one_out)
from .metrics import (export_projection_csv, export_spectrum_csv, project_2d,
                      singular_spectrum)
from .trainer import (TrainConfig, evaluate, load_checkpoint, save_checkpoint,
                      train, write_curves_csv)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="duorec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="ingest, filter, split, export")
    p.add_argument("--format", required=True, choices=["tsv-uit", "ml-1m"])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-len", type=int, default=50)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="directory written by prep")
    p.add_argument("--config", help="JSON config mirroring TrainConfig")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["valid", "test"], default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("diagnose", help="export spectrum and 2D projection")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-center", action="store_true")

    p = sub.add_parser("sweep", help="grid of training runs")
    p.add_argument("--grid", required=True, action="append",
                   help="key=v1,v2,... (repeatable)")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    return parser


def _write_dataset(out: Path, sequences: list[UserSequence], vocab: ItemVocab) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sequences.txt", "w") as f:
        for seq in sequences:
            f.write(" ".join(str(i) for i in seq.items) + "\n")
    vocab.export_csv(out / "vocab.csv")


def load_dataset_dir(path) -> tuple[list[UserSequence], ItemVocab]:
    path = Path(path)
    sequences = []
    with open(path / "sequences.txt") as f:
        for u, line in enumerate(f):
            items = [int(x) for x in line.split()]
            sequences.append(UserSequence(user=u, items=items))
    id_of, item_of, freqs = {}, ["<pad>"], [0]
    with open(path / "vocab.csv", newline="") as f:
        for row in csv.DictReader(f):
            id_of[row["item_id"]] = int(row["index"])
            item_of.append(row["item_id"])
            freqs.append(int(row["frequency"]))
    return sequences, ItemVocab(id_of=id_of, item_of=item_of,
                                frequency=np.array(freqs, dtype=np.int64))


def _load_config(args) -> TrainConfig:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _run_training(config: TrainConfig, data_dir, out: Path) -> dict:
    sequences, vocab = load_dataset_dir(data_dir)
    split = split_leave_one_out(sequences, vocab, max_len=config.max_len)
    result = train(config, split)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.duo", result.checkpoint)
    write_curves_csv(out / "curves.csv", result.curves)
    rep = evaluate(result.checkpoint.params, split.test, config.max_len)
    metrics = {f"hr@{k}": round(v, 6) for k, v in rep.hr.items()}
    metrics |= {f"ndcg@{k}": round(v, 6) for k, v in rep.ndcg.items()}
    with open(out / "eval.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
    if result.diverged:
        print("warning: training diverged; last finite checkpoint retained",
              file=sys.stderr)
    return metrics


def _cmd_prep(args) -> None:
    events = ingest(args.input, args.format)
    sequences, vocab = build_sequences(events, min_count=args.min_count,
                                       max_len=args.max_len)
    _write_dataset(Path(args.out), sequences, vocab)
    n_actions = int(vocab.frequency.sum())
    print(f"users={len(sequences)} items={vocab.size - 1} actions={n_actions}")


def _cmd_train(args) -> None:
    metrics = _run_training(_load_config(args), args.data, Path(args.out))
    print(json.dumps(metrics, sort_keys=True))


def _cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    sequences, vocab = load_dataset_dir(args.data)
    split = split_leave_one_out(sequences, vocab, max_len=ckpt.train_config.max_len)
    examples = split.valid if args.split == "valid" else split.test
    rep = evaluate(ckpt.params, examples, ckpt.train_config.max_len)
    metrics = {f"hr@{k}": round(v, 6) for k, v in rep.hr.items()}
    metrics |= {f"ndcg@{k}": round(v, 6) for k, v in rep.ndcg.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
    print(json.dumps(metrics, sort_keys=True))


def _cmd_diagnose(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    _, vocab = load_dataset_dir(args.data)
    emb = ckpt.params["item_emb"].data
    center = not args.no_center
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_spectrum_csv(out / "spectrum.csv", singular_spectrum(emb, center=center))
    export_projection_csv(out / "diagnostics.csv", project_2d(emb, vocab, center=center))
    print(f"wrote {out / 'spectrum.csv'} and {out / 'diagnostics.csv'}")


_GRID_TYPES = {
    "lambda": float, "tau": float, "emb_dropout": float, "hidden_dropout": float,
    "lr": float, "batch_size": int, "seed": int, "d": int, "layers": int,
    "heads": int, "epochs": int, "positive_mode": str,
}


def _cmd_sweep(args) -> None:
    base = _load_config(args)
    axes: list[tuple[str, list]] = []
    for axis in args.grid:
        key, _, values = axis.partition("=")
        if key not in _GRID_TYPES or not values:
            raise _UsageError(f"bad grid axis {axis!r}")
        cast = _GRID_TYPES[key]
        axes.append((key, [cast(v) for v in values.split(",")]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, combo in enumerate(itertools.product(*(vals for _, vals in axes))):
        overrides = dict(zip((k for k, _ in axes), combo))
        cfg = TrainConfig.from_dict(base.to_dict() | overrides)
        metrics = _run_training(cfg, args.data, out / f"run_{i}")
        rows.append({**overrides, **metrics})
    keys = [k for k, _ in axes] + sorted(k for k in rows[0] if k not in dict(axes))
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {out / 'summary.csv'} ({len(rows)} runs)")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        {
            "prep": _cmd_prep,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "diagnose": _cmd_diagnose,
            "sweep": _cmd_sweep,
        }[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

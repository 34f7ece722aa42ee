"""``learnet`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 training diverged, 5 model and data are incompatible, 6 the model lacks the
required capability (no learnet, or no dot-product comparison).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from learnet import data as D
from learnet import evaluation as E
from learnet import model_io
from learnet.autodiff import ShapeError
from learnet.config import Config, ConfigError, load_config, parse_config
from learnet.networks import (
    MissingParameter,
    NetworkSpec,
    SpecError,
    bind,
    check_params,
    score_map_size,
    total_stride,
)
from learnet.training import TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_INCOMPATIBLE, EXIT_CAPABILITY = 0, 2, 3, 4, 5, 6


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fail(code, message):
    raise CommandError(code, message)


# ---------------------------------------------------------------------- helpers

def _config(path) -> Config:
    try:
        return load_config(path) if path else parse_config({})
    except ConfigError as exc:
        _fail(EXIT_USAGE, f"config error: {exc}")


def _load_model(path):
    try:
        spec, params = model_io.load(path)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot read model {path}: {exc.strerror or exc}")
    except (model_io.ModelFormatError, SpecError) as exc:
        _fail(EXIT_IO, f"cannot read model {path}: {exc}")
    try:
        check_params(spec, params)
    except (MissingParameter, ShapeError) as exc:
        _fail(EXIT_INCOMPATIBLE, f"model {path} does not match its own spec: {exc}")
    return spec, params


def _glyph_dataset(cfg: Config, data_path):
    path = data_path or (cfg.data.path if cfg.data.source == "path" else None)
    if path:
        try:
            return D.load_pgm_dataset(path)
        except (D.DatasetError, D.PGMError) as exc:
            _fail(EXIT_IO, f"cannot load dataset: {exc}")
        except OSError as exc:
            _fail(EXIT_IO, f"cannot load dataset: {exc}")
    d = cfg.data
    return D.gen_glyph_dataset(np.random.default_rng(d.seed), d.n_background, d.n_eval,
                               d.chars_per_alphabet, d.instances_per_char)


def _sequences(cfg: Config, data_path):
    path = data_path or (cfg.data.path if cfg.data.source == "path" else None)
    if path:
        try:
            return D.load_sequences(path)
        except (D.DatasetError, D.PGMError, OSError) as exc:
            _fail(EXIT_IO, f"cannot load sequences: {exc}")
    d = cfg.data
    return D.gen_tracking_sequences(np.random.default_rng(d.seed), d.n_sequences, d.sequence_length,
                                    d.frame_size, d.object_size)


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot create {path}: {exc.strerror}")


# ---------------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    d = cfg.data
    rng = np.random.default_rng(d.seed)
    try:
        if d.kind == "glyphs":
            ds = D.gen_glyph_dataset(rng, d.n_background, d.n_eval, d.chars_per_alphabet, d.instances_per_char)
            D.export_dataset(ds, out)
            for split, inv in ds.inventory().items():
                print(f"{split}: {inv['alphabets']} alphabets, {inv['characters']} characters, "
                      f"{inv['images']} images")
        else:
            seqs = D.gen_tracking_sequences(rng, d.n_sequences, d.sequence_length, d.frame_size, d.object_size)
            for i, seq in enumerate(seqs):
                D.save_sequence(seq, out / f"seq{i:03d}")
            print(f"{len(seqs)} sequences of {d.sequence_length} frames ({d.frame_size}x{d.frame_size})")
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write dataset: {exc}")
    return EXIT_OK


def _training_sources(cfg: Config, data_path):
    spec = cfg.network
    t = cfg.train
    if cfg.data.kind == "glyphs":
        ds = _glyph_dataset(cfg, data_path)
        if not ds.split("background"):
            _fail(EXIT_INCOMPATIBLE, "dataset has no background alphabets to train on")
        fit, val = D.holdout_alphabets(ds.split("background"), cfg.data.val_fraction)
        return (D.CharacterTriplets(fit, t.positive_fraction),
                D.CharacterTriplets(val, t.positive_fraction) if val else None)
    seqs = _sequences(cfg, data_path)
    n_val = int(round(cfg.data.val_fraction * len(seqs))) if len(seqs) > 2 else 0
    fit, val = seqs[:len(seqs) - n_val], seqs[len(seqs) - n_val:]
    m = cfg.map_size()
    tr = cfg.track
    make = lambda s: D.TrackingTriplets(s, m, t.positive_fraction, tr.exemplar_size, tr.search_size)
    if len(fit) < 2:
        _fail(EXIT_INCOMPATIBLE, "tracking training needs at least two sequences")
    return make(fit), (make(val) if len(val) >= 2 else None)


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if cfg.network is None:
        _fail(EXIT_USAGE, "config error: the network section is required for training")
    out_model = Path(args.out_model)
    history_path = Path(args.history) if args.history else out_model.with_suffix(".history.csv")
    for p in (out_model, history_path):
        if not p.parent.is_dir():
            _fail(EXIT_IO, f"output directory {p.parent} does not exist")
    source, validation = _training_sources(cfg, args.data)

    def report(rec):
        if args.verbose:
            print(f"epoch {rec.epoch}: train {rec.train_loss:.5f} val {rec.val_loss:.5f} lr {rec.lr:.3g}",
                  flush=True)

    try:
        params, history = train(cfg.network, source, cfg.train, validation, callback=report)
    except TrainingDiverged as exc:
        _fail(EXIT_DIVERGED, f"training diverged: {exc}")
    except ShapeError as exc:
        _fail(EXIT_INCOMPATIBLE, f"data does not fit the network: {exc}")
    try:
        model_io.save(cfg.network, params, out_model)
        with open(history_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for rec in history:
                w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss), repr(rec.lr)])
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write outputs: {exc}")
    if history:
        print(f"final train_loss {history[-1].train_loss:.6f} val_loss {history[-1].val_loss:.6f}")
    else:
        print("no epochs run; model holds the initialization")
    print(f"model written to {out_model}")
    return EXIT_OK


def _recognition_error(spec, params, alphabets, cfg: Config, threads: int):
    rng = np.random.default_rng(cfg.eval.seed)
    problems = E.make_problems(alphabets, rng, cfg.eval.n_problems, cfg.eval.way)
    scorer = E.network_scorer(spec, params)
    solve = lambda p: E.pick(scorer(p)) != p.answer_index
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            wrong = list(pool.map(solve, problems))
    else:
        wrong = [solve(p) for p in problems]
    ways = sorted({p.way for p in problems})
    return float(np.mean(wrong)), ways


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    models = [_load_model(m) for m in args.model]
    for (spec, _), path in zip(models, args.model):
        if spec.input_shape != (D.IMAGE_SIZE, D.IMAGE_SIZE, 1):
            _fail(EXIT_INCOMPATIBLE, f"model {path} expects {spec.input_shape} inputs, "
                                     f"character data is {D.IMAGE_SIZE}x{D.IMAGE_SIZE}x1")
    ds = _glyph_dataset(cfg, args.data)
    splits = ["background", "evaluation"] if args.split == "both" else [args.split]
    rows, table = [], {}
    for (spec, params), path in zip(models, args.model):
        for split in splits:
            alphabets = ds.split(split)
            if not alphabets:
                _fail(EXIT_INCOMPATIBLE, f"dataset has no {split} alphabets")
            err, ways = _recognition_error(spec, params, alphabets, cfg, args.threads)
            metric = f"error_rate/{split}/{spec.architecture}/{spec.comparison}"
            rows.append((metric, err, cfg.eval.n_problems, cfg.eval.seed))
            table[(spec.architecture, spec.comparison, split)] = err
            note = "" if ways == [cfg.eval.way] else f" (way sizes {ways})"
            print(f"{metric}: {err:.4f} over {cfg.eval.n_problems} problems{note}")
    if len(models) > 1:
        _print_table(table, splits)
    if args.out:
        try:
            E.write_metrics_csv(args.out, rows)
        except OSError as exc:
            _fail(EXIT_IO, f"cannot write {args.out}: {exc.strerror}")
    return EXIT_OK


def _print_table(table, splits):
    comparisons = ["dot", "euclidean", "weighted-l1"]
    for split in splits:
        archs = sorted({a for a, _, s in table if s == split})
        print(f"\nerror rate ({split})")
        print(f"{'architecture':<24}" + "".join(f"{c:>14}" for c in comparisons))
        for a in archs:
            cells = [table.get((a, c, split)) for c in comparisons]
            print(f"{a:<24}" + "".join(f"{'-':>14}" if v is None else f"{v:>14.4f}" for v in cells))


def cmd_track(args) -> int:
    cfg = _config(args.config)
    spec, params = _load_model(args.model)
    if spec.comparison != "dot" or spec.architecture == "single-stream-learnet":
        _fail(EXIT_CAPABILITY, "tracking scores whole search regions by correlating embeddings, which "
                               "needs a two-stream model with the dot comparison; this model uses "
                               f"{spec.architecture} / {spec.comparison}")
    tr = cfg.track
    if spec.input_shape[:2] != (tr.exemplar_size, tr.exemplar_size):
        _fail(EXIT_INCOMPATIBLE, f"model expects {spec.input_shape[0]}px exemplars, "
                                 f"track.exemplar_size is {tr.exemplar_size}")
    try:
        m = score_map_size(spec, tr.search_size)
    except (SpecError, ShapeError) as exc:
        _fail(EXIT_INCOMPATIBLE, f"model cannot score {tr.search_size}px search crops: {exc}")
    if args.seq:
        try:
            seqs = D.load_sequences(args.seq)
        except (D.DatasetError, D.PGMError, OSError) as exc:
            _fail(EXIT_IO, f"cannot load sequences: {exc}")
    else:
        d = cfg.data
        seqs = D.gen_tracking_sequences(np.random.default_rng(tr.seed), tr.n_sequences, tr.sequence_length,
                                        d.frame_size, d.object_size)
    out = Path(args.out)
    _mkdir(out)
    geometry = E.TrackGeometry(tr.exemplar_size, tr.search_size)
    stride = total_stride(spec)
    disps, baselines = [], []
    try:
        with open(out / "track.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "frame", "pred_cx", "pred_cy", "true_cx", "true_cy", "displacement", "peak"])
            for k, seq in enumerate(seqs):
                res = E.track(spec, params, seq, tr.search_radius, geometry, keep_maps=args.dump_maps)
                for t in range(len(seq)):
                    w.writerow([k, t, repr(float(res.centres[t, 0])), repr(float(res.centres[t, 1])),
                                repr(float(seq.boxes[t, 0])), repr(float(seq.boxes[t, 1])),
                                repr(float(res.displacement[t])), repr(float(res.peaks[t]))])
                for t, smap in enumerate(res.score_maps, start=1):
                    name = f"map_{t:04d}.pgm" if len(seqs) == 1 else f"map_{k:03d}_{t:04d}.pgm"
                    E.dump_map(out / name, smap)
                disps.append(res.mean_displacement)
                baselines.append(E.random_peak_baseline(m, stride, geometry.scale(seq.boxes[0])))
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write tracking output: {exc}")
    print(f"mean displacement {np.mean(disps):.3f} px over {len(seqs)} sequence(s); "
          f"random-peak baseline {np.mean(baselines):.3f} px")
    return EXIT_OK


def cmd_dump_filters(args) -> int:
    spec, params = _load_model(args.model)
    if not spec.has_learnet:
        _fail(EXIT_CAPABILITY, f"{spec.architecture} models have no learnet, so there are no predicted filters")
    try:
        img = D.read_pgm(args.exemplar).astype(np.float32) / np.float32(255.0)
    except (OSError, D.PGMError) as exc:
        _fail(EXIT_IO, f"cannot read exemplar: {exc}")
    h, w, _ = spec.input_shape
    if img.shape != (h, w):
        img = D.resize(img, h, w).astype(np.float32)
    filters = bind(spec, params, img[..., None]).filters
    out = Path(args.out)
    _mkdir(out)
    try:
        if filters.ndim == 3:
            for c in range(filters.shape[-1]):
                E.dump_map(out / f"filter_{c:03d}.pgm", filters[..., c])
        else:
            E.dump_map(out / "filters.pgm", filters[None, :])
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write filters: {exc}")
    count = filters.shape[-1] if filters.ndim == 3 else 1
    print(f"{count} filter image(s); w(z) min {filters.min():.6g} max {filters.max():.6g} "
          f"mean {filters.mean():.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learnet", description="One-shot learners that predict network parameters.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as PGM files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a network and save the model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="dataset directory (default: synthetic data from the config)")
    p.add_argument("--out-model", required=True)
    p.add_argument("--history", help="loss history CSV (default: next to the model)")
    p.add_argument("--verbose", action="store_true", help="print every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="20-way one-shot error rate")
    p.add_argument("--model", required=True, action="append", help="model file; repeat to compare models")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--split", choices=["background", "evaluation", "both"], default="evaluation")
    p.add_argument("--out", help="metrics CSV")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", help="track objects through sequences")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--seq", help="sequence directory (or a directory of them)")
    src.add_argument("--synthetic", action="store_true", help="generate sequences from the config")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-maps", action="store_true", help="write each frame's score map as PGM")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("dump-filters", help="write the filters predicted for an exemplar")
    p.add_argument("--model", required=True)
    p.add_argument("--exemplar", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_filters)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "threads", 1) < 1:
        print("learnet: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"learnet: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: synth, decompose, train-skel, train-attr, caption,
eval, gradcheck.

Configuration is layered: values from a JSON config file (``--config`` or the
``SKELCAP_CONFIG`` environment variable) are overridden by command-line
flags. Every command that writes an output directory echoes its effective
configuration there as ``config.json``. Exit codes: 0 success, 1 usage error,
2 data/contract violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus, metrics, treebank
from .decompose import (DecomposeError, decompose as decompose_tree,
                        format_decomposition, fuse)
from .attrnet import AttributeGenerator, build_training_items
from .corpus import SynthConfig, Vocabulary
from .decode import caption as run_caption
from .numerics import grad_check, NumericsError
from .skelnet import SkeletonGenerator

log = logging.getLogger(__name__)

CONFIG_ENV = "SKELCAP_CONFIG"

DATA_ERRORS = (
    corpus.CorpusError,
    treebank.TreeParseError,
    DecomposeError,
    metrics.MetricsError,
    NumericsError,
    FileNotFoundError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_file_config(path):
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _effective(args, file_config, keys):
    """File config overridden by explicitly provided CLI flags."""
    out = {}
    for key in keys:
        value = getattr(args, key.replace("-", "_"))
        if key in file_config and value is None:
            out[key] = file_config[key]
        else:
            out[key] = value
    return out


def _echo_config(out_dir: Path, command: str, config: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump({"command": command, **config}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _csv(value):
    return tuple(v for v in value.split(",") if v)


# -- synth -------------------------------------------------------------------

def cmd_synth(args, file_config):
    keys = ["out", "seed", "count", "val-count", "test-count", "grid-size",
            "feature-dim", "noise-sigma", "objects", "attributes", "relations",
            "max-objects", "max-attributes"]
    cfg = _effective(args, file_config, keys)
    defaults = SynthConfig()
    out_dir = Path(cfg["out"])
    base = dict(
        grid_size=cfg["grid-size"] if cfg["grid-size"] is not None else defaults.grid_size,
        feature_dim=cfg["feature-dim"] if cfg["feature-dim"] is not None else defaults.feature_dim,
        noise_sigma=cfg["noise-sigma"] if cfg["noise-sigma"] is not None else defaults.noise_sigma,
        objects=_csv(cfg["objects"]) if cfg["objects"] else defaults.objects,
        attributes=_csv(cfg["attributes"]) if cfg["attributes"] else defaults.attributes,
        relations=_csv(cfg["relations"]) if cfg["relations"] else defaults.relations,
        max_objects=cfg["max-objects"] if cfg["max-objects"] is not None else defaults.max_objects,
        max_attributes=(cfg["max-attributes"] if cfg["max-attributes"] is not None
                        else defaults.max_attributes),
    )
    seed = cfg["seed"] if cfg["seed"] is not None else 0
    counts = {
        "train": cfg["count"] if cfg["count"] is not None else 1000,
        "val": cfg["val-count"] if cfg["val-count"] is not None else 0,
        "test": cfg["test-count"] if cfg["test-count"] is not None else 0,
    }
    _echo_config(out_dir, "synth", {**base, "seed": seed, **counts})
    start = 0
    manifest_entries = {}
    for split in ("train", "val", "test"):
        count = counts[split]
        if split == "train" and count < 1:
            raise corpus.CorpusError("train count must be >= 1")
        if count < 1:
            continue
        sc = SynthConfig(count=count, **base)
        manifest = corpus.synth_generate(sc, seed, split=split, start_index=start)
        start += count
        corpus.write_captions(out_dir / f"{split}.captions.tsv", manifest.records)
        corpus.write_trees(out_dir / f"{split}.trees.txt", manifest.records)
        corpus.write_features(out_dir / f"{split}.features.bin", manifest.records)
        manifest_entries[split] = {
            "captions": f"{split}.captions.tsv",
            "trees": f"{split}.trees.txt",
            "features": f"{split}.features.bin",
            "count": count,
        }
    corpus.write_manifest(out_dir / "manifest.txt", manifest_entries, seed=seed)
    print(f"wrote {sum(counts.values())} records to {out_dir}")
    return 0


def _load_split(data_dir: Path, split: str):
    splits, _ = corpus.read_manifest(data_dir / "manifest.txt")
    if split not in splits:
        raise corpus.CorpusError(f"split {split!r} not in manifest ({sorted(splits)})")
    info = splits[split]
    return corpus.load_records(data_dir / info["captions"], data_dir / info["trees"],
                               data_dir / info["features"])


# -- decompose ---------------------------------------------------------------

def cmd_decompose(args, file_config):
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    n = 0
    skel_lens = []
    attr_counts = []
    try:
        for lineno, tree in treebank.read_trees(args.trees):
            d = decompose_tree(tree)
            if fuse(d) != treebank.leaves(tree):
                raise DecomposeError(
                    f"{args.trees}:{lineno}: fusion does not reproduce the caption")
            out.write(format_decomposition(d) + "\n")
            n += 1
            skel_lens.append(len(d.skeleton))
            attr_counts.extend(len(t.attributes) for t in d.skeleton if t.is_np_head)
    finally:
        if out is not sys.stdout:
            out.close()
    mean_skel = sum(skel_lens) / n if n else 0.0
    mean_attr = sum(attr_counts) / len(attr_counts) if attr_counts else 0.0
    print(f"trees: {n}  mean skeleton length: {mean_skel:.2f}  "
          f"mean attributes per NP-head: {mean_attr:.2f}", file=sys.stderr)
    return 0


# -- training ----------------------------------------------------------------

def _write_curve(path, curve):
    with open(path, "w", encoding="utf-8") as fh:
        for step, loss in curve:
            fh.write(f"{step}\t{loss:.6f}\n")


def cmd_train_skel(args, file_config):
    keys = ["data", "out", "epochs", "learning-rate", "batch-size", "seed",
            "hidden-size", "embed-size", "attention-hidden", "skel-threshold"]
    cfg = _effective(args, file_config, keys)
    data_dir = Path(cfg["data"])
    out_dir = Path(cfg["out"])
    train = _load_split(data_dir, "train")
    try:
        val = _load_split(data_dir, "val")
    except corpus.CorpusError:
        val = None
    threshold = cfg["skel-threshold"] if cfg["skel-threshold"] is not None else 5
    seed = cfg["seed"] if cfg["seed"] is not None else 0
    vocab = corpus.build_vocab(
        [[t.surface for t in r.decomposition.skeleton] for r in train], threshold)
    sample = train[0].features
    model_cfg = dict(
        feature_dim=sample.feature_dim, grid_size=sample.grid_size,
        hidden_size=cfg["hidden-size"] if cfg["hidden-size"] is not None else 128,
        embed_size=cfg["embed-size"] if cfg["embed-size"] is not None else 64,
        attention_hidden=(cfg["attention-hidden"] if cfg["attention-hidden"] is not None
                          else 128),
        use_attention=not args.no_attention,
        seed=seed,
    )
    epochs = cfg["epochs"] if cfg["epochs"] is not None else 10
    lr = cfg["learning-rate"] if cfg["learning-rate"] is not None else 0.1
    batch = cfg["batch-size"] if cfg["batch-size"] is not None else 64
    _echo_config(out_dir, "train-skel",
                 {**model_cfg, "epochs": epochs, "learning_rate": lr,
                  "batch_size": batch, "skel_threshold": threshold})
    if args.resume:
        model = SkeletonGenerator.load(args.resume, vocab)
    else:
        model = SkeletonGenerator(vocab, **model_cfg)
    history = model.fit(train, val, epochs=epochs, learning_rate=lr,
                        batch_size=batch, shuffle_seed=seed,
                        progress=lambda e, h: log.info(
                            "epoch %d val_loss %s", e,
                            h["val_loss"][-1] if h["val_loss"] else "n/a"))
    vocab.save(out_dir / "skel.vocab")
    model.save(out_dir / "skel.ckpt")
    _write_curve(out_dir / "skel_loss_curve.txt", history["train_curve"])
    print(f"trained skeleton model: {model.store.step_count} steps -> {out_dir}")
    return 0


def cmd_train_attr(args, file_config):
    keys = ["data", "out", "epochs", "learning-rate", "batch-size", "seed",
            "hidden-size", "embed-size", "attr-threshold", "skel-checkpoint",
            "skel-vocab", "hidden-tap"]
    cfg = _effective(args, file_config, keys)
    data_dir = Path(cfg["data"])
    out_dir = Path(cfg["out"])
    train = _load_split(data_dir, "train")
    try:
        val = _load_split(data_dir, "val")
    except corpus.CorpusError:
        val = None
    skel_vocab = Vocabulary.load(cfg["skel-vocab"])
    skel_model = SkeletonGenerator.load(cfg["skel-checkpoint"], skel_vocab)
    threshold = cfg["attr-threshold"] if cfg["attr-threshold"] is not None else 3
    seed = cfg["seed"] if cfg["seed"] is not None else 0
    attr_vocab = corpus.build_vocab(
        [list(t.attributes) for r in train for t in r.decomposition.skeleton
         if t.attributes], threshold)
    hidden_tap = cfg["hidden-tap"] or "current"
    model_cfg = dict(
        feature_dim=skel_model.feature_dim,
        skel_embed_size=skel_model.embed_size,
        skel_hidden_size=skel_model.hidden_size,
        hidden_size=cfg["hidden-size"] if cfg["hidden-size"] is not None else 128,
        embed_size=cfg["embed-size"] if cfg["embed-size"] is not None else 64,
        hidden_tap=hidden_tap,
        use_post_word_alpha=args.post_word_alpha,
        seed=seed,
    )
    epochs = cfg["epochs"] if cfg["epochs"] is not None else 10
    lr = cfg["learning-rate"] if cfg["learning-rate"] is not None else 0.1
    batch = cfg["batch-size"] if cfg["batch-size"] is not None else 128
    _echo_config(out_dir, "train-attr",
                 {**model_cfg, "epochs": epochs, "learning_rate": lr,
                  "batch_size": batch, "attr_threshold": threshold})
    model = AttributeGenerator(attr_vocab, **model_cfg)
    train_items = build_training_items(train, skel_model, attr_vocab,
                                       use_post_word_alpha=args.post_word_alpha,
                                       hidden_tap=hidden_tap)
    val_items = (build_training_items(val, skel_model, attr_vocab,
                                      use_post_word_alpha=args.post_word_alpha,
                                      hidden_tap=hidden_tap)
                 if val else None)
    history = model.fit(train_items, val_items, epochs=epochs, learning_rate=lr,
                        batch_size=batch, shuffle_seed=seed)
    attr_vocab.save(out_dir / "attr.vocab")
    model.save(out_dir / "attr.ckpt")
    _write_curve(out_dir / "attr_loss_curve.txt", history["train_curve"])
    print(f"trained attribute model: {model.store.step_count} steps -> {out_dir}")
    return 0


# -- caption -----------------------------------------------------------------

def cmd_caption(args, file_config):
    keys = ["data", "split", "out", "skel-checkpoint", "skel-vocab",
            "attr-checkpoint", "attr-vocab", "gamma-skel", "gamma-attr",
            "beam-skel", "beam-attr", "max-skel-len", "max-attr-len"]
    cfg = _effective(args, file_config, keys)
    records = _load_split(Path(cfg["data"]), cfg["split"] or "test")
    skel_vocab = Vocabulary.load(cfg["skel-vocab"])
    attr_vocab = Vocabulary.load(cfg["attr-vocab"])
    skel_model = SkeletonGenerator.load(cfg["skel-checkpoint"], skel_vocab)
    attr_model = AttributeGenerator.load(cfg["attr-checkpoint"], attr_vocab)
    wanted = None if args.ids in (None, "all") else set(_csv(args.ids))
    out_path = Path(cfg["out"])
    trace_fh = open(args.trace, "w", encoding="utf-8") if args.trace else None
    n = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in records:
            if wanted is not None and rec.image_id not in wanted:
                continue
            trace = run_caption(
                rec.features, skel_model, attr_model,
                gamma_skel=cfg["gamma-skel"] if cfg["gamma-skel"] is not None else 0.0,
                gamma_attr=cfg["gamma-attr"] if cfg["gamma-attr"] is not None else 0.0,
                beam_skel=cfg["beam-skel"] if cfg["beam-skel"] is not None else 3,
                beam_attr=cfg["beam-attr"] if cfg["beam-attr"] is not None else 2,
                max_skel_len=cfg["max-skel-len"] if cfg["max-skel-len"] is not None else 16,
                max_attr_len=cfg["max-attr-len"] if cfg["max-attr-len"] is not None else 4,
                use_post_word_alpha=args.post_word_alpha or None)
            fh.write(f"{rec.image_id}\t{' '.join(trace.tokens)}\n")
            if trace_fh:
                trace_fh.write(f"image: {rec.image_id}\n{trace.render()}\n\n")
            n += 1
    if trace_fh:
        trace_fh.close()
    print(f"captioned {n} images -> {out_path}")
    return 0


# -- eval --------------------------------------------------------------------

def _read_caption_file(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            image_id, _, text = line.partition("\t")
            out.setdefault(image_id, []).append(text.split())
    return out


def cmd_eval(args, file_config):
    cands = _read_caption_file(args.candidates)
    refs = _read_caption_file(args.references)
    pairs = []
    gen = []
    for image_id, cand_list in sorted(cands.items()):
        if image_id not in refs:
            raise metrics.MetricsError(f"no references for image {image_id!r}")
        for cand in cand_list:
            pairs.append(metrics.EvalPair(tuple(cand),
                                          tuple(tuple(r) for r in refs[image_id])))
            gen.append(cand)
    training = None
    if args.uniqueness:
        training = [toks for lst in _read_caption_file(args.uniqueness).values()
                    for toks in lst]
    report = metrics.evaluate(pairs, apply_without_a=args.without_a,
                              training_captions=training,
                              generated_for_uniqueness=gen if training else None)
    print(report.render_table())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    return 0


# -- gradcheck ---------------------------------------------------------------

def cmd_gradcheck(args, file_config):
    from .corpus import SynthConfig, synth_generate
    sc = SynthConfig(grid_size=2, feature_dim=8, objects=("dog", "cat", "cup"),
                     attributes=("red", "big"), relations=("on",),
                     noise_sigma=0.2, count=2)
    records = synth_generate(sc, seed=1).records
    skel_vocab = corpus.build_vocab(
        [[t.surface for t in r.decomposition.skeleton] for r in records], 1)
    attr_vocab = corpus.build_vocab(
        [list(t.attributes) for r in records for t in r.decomposition.skeleton], 1)
    skel = SkeletonGenerator(skel_vocab, feature_dim=8, grid_size=2, hidden_size=16,
                             embed_size=8, attention_hidden=8, seed=3,
                             dtype=np.float64)
    feats = records[0].features.flat()[None].astype(np.float64)
    seqs = np.asarray([skel._encode_skeleton(records[0])])
    report = grad_check(lambda: skel.sequence_loss(feats, seqs),
                        skel.store.params, h=args.step, tol=args.tol)
    print(f"skel step: max rel err {report['max_rel_error']:.3e} "
          f"({'pass' if report['passed'] else 'FAIL'})")
    ok = report["passed"]
    attr = AttributeGenerator(attr_vocab, feature_dim=8, skel_embed_size=8,
                              skel_hidden_size=16, hidden_size=16, embed_size=8,
                              seed=4, dtype=np.float64)
    rng = np.random.default_rng(5)
    z = rng.normal(size=(1, 8))
    s = rng.normal(size=(1, 8))
    h = rng.normal(size=(1, 16))
    seq = np.asarray([[attr_vocab.encode("red"), corpus.EOS]])
    report2 = grad_check(lambda: attr.batch_loss(z, s, h, seq),
                         attr.store.params, h=args.step, tol=args.tol)
    print(f"attr init+step: max rel err {report2['max_rel_error']:.3e} "
          f"({'pass' if report2['passed'] else 'FAIL'})")
    ok = ok and report2["passed"]
    return 0 if ok else 2


# -- parser ------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file (default: $SKELCAP_CONFIG)")


def build_parser():
    parser = _Parser(prog="skelcap",
                     description="Coarse-to-fine caption engine: decomposition, "
                                 "training, decoding, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--val-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--grid-size", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--objects")
    p.add_argument("--attributes")
    p.add_argument("--relations")
    p.add_argument("--max-objects", type=int)
    p.add_argument("--max-attributes", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("decompose", help="dump skeleton/attribute decompositions")
    _add_common(p)
    p.add_argument("--trees", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train-skel", help="train the skeleton decoder")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--embed-size", type=int)
    p.add_argument("--attention-hidden", type=int)
    p.add_argument("--skel-threshold", type=int)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train_skel)

    p = sub.add_parser("train-attr", help="train the attribute decoder")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skel-checkpoint", required=True)
    p.add_argument("--skel-vocab", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--embed-size", type=int)
    p.add_argument("--attr-threshold", type=int)
    p.add_argument("--hidden-tap", choices=("current", "previous", "final"))
    p.add_argument("--post-word-alpha", action="store_true")
    p.set_defaults(func=cmd_train_attr)

    p = sub.add_parser("caption", help="run coarse-to-fine captioning")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True)
    p.add_argument("--skel-checkpoint", required=True)
    p.add_argument("--skel-vocab", required=True)
    p.add_argument("--attr-checkpoint", required=True)
    p.add_argument("--attr-vocab", required=True)
    p.add_argument("--ids", help="comma-separated image ids, or 'all'")
    p.add_argument("--gamma-skel", type=float)
    p.add_argument("--gamma-attr", type=float)
    p.add_argument("--beam-skel", type=int)
    p.add_argument("--beam-attr", type=int)
    p.add_argument("--max-skel-len", type=int)
    p.add_argument("--max-attr-len", type=int)
    p.add_argument("--post-word-alpha", action="store_true")
    p.add_argument("--trace", help="write per-image attention traces here")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score candidate captions against references")
    _add_common(p)
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--without-a", action="store_true")
    p.add_argument("--uniqueness", help="training captions file for novelty stats")
    p.add_argument("--json", help="also write a machine-readable report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _add_common(p)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("SKELCAP_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    file_config = _load_file_config(getattr(args, "config", None))
    try:
        return args.func(args, file_config)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

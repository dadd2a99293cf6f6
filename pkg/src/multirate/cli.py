"""Command line: corpus generation, training, encoding, evaluation, reports.

Every command is deterministic given (seed, config, inputs): logs carry no
timestamps and artifacts are byte-stable. Exit codes: 0 success, 1 usage or
config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .caption import CaptionModel, CaptionTrainer, Vocab, beam_decode
from .classify import average_precision, svm_train
from .data import (Corpus, RunConfig, load_checkpoint, read_manifest,
                   write_feature_file, read_feature_file)
from .encoding import late_fuse, save_codebook
from .errors import ConfigError, DataError, NumericError, UndefinedMetricError
from .experiments import (collect_corpus_states, compare_multirate,
                          comparison_csv, comparison_markdown,
                          fit_group_codebooks, group_vlad_features)
from .gradcheck import TOLERANCE, run_suite
from .optim import ParamStore
from .recurrent import MultirateGru
from .rng import RngState
from .seq2seq import ReconstructionTrainer
from .classify import FinetuneTrainer, pool_average
from . import synth

__all__ = ["main"]


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class TeeLog:
    """Streams progress lines to stdout and keeps them for the log file."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.lines = []

    def __call__(self, line: str):
        print(line)
        self.lines.append(line)

    def save(self):
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("".join(f"{ln}\n" for ln in self.lines))


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _strip_private(config: dict) -> dict:
    return {k: v for k, v in config.items() if not k.startswith("_")}


def _rebuild_encoder(ckpt_path, corpus: Corpus):
    values, cfg_dict, _ = load_checkpoint(ckpt_path)
    config = RunConfig.from_dict(_strip_private(cfg_dict))
    store = ParamStore()
    encoder = MultirateGru(store, "enc", corpus.feature_dim(),
                           config.mgru_config(), config.cell_size,
                           RngState(config.seed))
    if not store.load_values(values, prefix="enc."):
        raise DataError(f"{ckpt_path}: no encoder weights match this corpus "
                        "and configuration")
    return encoder, config


def _infer_classes(corpus: Corpus) -> int:
    labels = sorted({e.label for e in corpus.split("train")
                     if e.label is not None and e.label != 0})
    if not labels:
        raise DataError("manifest has no positive training labels")
    if labels != list(range(1, len(labels) + 1)):
        raise DataError(f"positive labels must be contiguous 1..C, got {labels}")
    return len(labels)


# ------------------------------------------------------------------ commands

def cmd_synth_gen(args) -> int:
    kwargs = {}
    for key in ("videos", "dim", "classes", "train", "test",
                "frames_min", "frames_max"):
        value = getattr(args, key, None)
        if value is not None:
            kwargs[key] = value
    try:
        manifest = synth.generate(args.kind, args.out, args.seed, **kwargs)
    except TypeError as e:
        raise UsageError(f"option not valid for kind {args.kind!r}: {e}") from e
    print(f"wrote {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    corpus = Corpus.load(args.manifest)
    trainer = ReconstructionTrainer(corpus, config)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    log = TeeLog(str(args.out) + ".log")
    trainer.train(steps=config.steps, log=log, out_path=args.out,
                  checkpoint_every=args.save_every)
    log.save()
    print(f"wrote {args.out}")
    return 0


def cmd_finetune(args) -> int:
    config = _load_config(args)
    corpus = Corpus.load(args.manifest)
    init_values = None
    if args.ckpt:
        init_values, _, _ = load_checkpoint(args.ckpt)
    num_classes = args.classes or _infer_classes(corpus)
    trainer = FinetuneTrainer(corpus, config, num_classes,
                              init_values=init_values,
                              head_hidden=args.head_hidden)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    log = TeeLog(str(args.out) + ".log")
    trainer.train(steps=config.steps, log=log, out_path=args.out,
                  target_loss=args.target_loss)
    log.save()
    print(f"wrote {args.out}")
    return 0


def cmd_encode_pool(args) -> int:
    corpus = Corpus.load(args.manifest)
    encoder, _ = _rebuild_encoder(args.ckpt, corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    states = collect_corpus_states(encoder, corpus, corpus.entries)
    ids = [e.id for e in corpus.entries]
    pooled = np.stack([pool_average(states[i]) for i in ids])
    write_feature_file(out / "pooled.fvec", pooled)
    (out / "ids.json").write_text(json.dumps(ids))
    print(f"wrote {out / 'pooled.fvec'}")
    return 0


def cmd_encode_vlad(args) -> int:
    corpus = Corpus.load(args.manifest)
    encoder, config = _rebuild_encoder(args.ckpt, corpus)
    cfg = config.mgru_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    states = collect_corpus_states(encoder, corpus, corpus.entries)
    ids = [e.id for e in corpus.entries]
    train_ids = [e.id for e in corpus.split("train")]
    if not train_ids:
        raise DataError("manifest has no training videos to fit codebooks on")
    rng = RngState(config.seed)
    books = fit_group_codebooks(states, train_ids, cfg, args.centers, rng,
                                pca_dim=args.pca)
    features = group_vlad_features(states, ids, cfg, books)
    for g, (book, feats) in enumerate(zip(books, features)):
        save_codebook(out / f"codebook_g{g}.vcbk", book)
        write_feature_file(out / f"vlad_g{g}.fvec", feats)
    (out / "ids.json").write_text(json.dumps(ids))
    print(f"wrote {cfg.k} codebooks and feature groups to {out}")
    return 0


def _load_feature_groups(features_path):
    """Either a directory of vlad_g*.fvec groups or a single pooled file."""
    path = Path(features_path)
    if path.is_dir():
        group_files = sorted(path.glob("vlad_g*.fvec"))
        if not group_files:
            pooled = path / "pooled.fvec"
            if pooled.exists():
                group_files = [pooled]
            else:
                raise DataError(f"{path}: no vlad_g*.fvec or pooled.fvec found")
        ids_file = path / "ids.json"
        if not ids_file.exists():
            raise DataError(f"{path}: missing ids.json")
        ids = json.loads(ids_file.read_text())
        return [read_feature_file(f) for f in group_files], ids
    ids_file = path.parent / "ids.json"
    if not ids_file.exists():
        raise DataError(f"{path.parent}: missing ids.json")
    return [read_feature_file(path)], json.loads(ids_file.read_text())


def cmd_classify(args) -> int:
    groups, ids = _load_feature_groups(args.features)
    entries = {e.id: e for e in read_manifest(args.labels)}
    missing = [i for i in ids if i not in entries]
    if missing:
        raise DataError(f"feature ids missing from manifest: {missing[:3]}")
    row = {vid: i for i, vid in enumerate(ids)}
    train = [entries[v] for v in ids
             if entries[v].split == "train" and entries[v].label is not None]
    test = [entries[v] for v in ids
            if entries[v].split == "test" and entries[v].label is not None]
    if not train or not test:
        raise DataError("need labeled train and test videos")
    y_train = np.array([e.label for e in train])
    classes = tuple(sorted(set(int(v) for v in y_train) - {0}))
    scores = []
    for g in groups:
        x_train = g[[row[e.id] for e in train]]
        x_test = g[[row[e.id] for e in test]]
        svm = svm_train(x_train, y_train, c=args.C, classes=classes)
        scores.append(svm.decision_values(x_test))
    fused = late_fuse(scores)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        f.write("video_id,class_id,score\n")
        for i, e in enumerate(test):
            for ci, cls in enumerate(classes):
                f.write(f"{e.id},{cls},{fused[i, ci]!r}\n")
    print(f"wrote {out}")
    return 0


def cmd_eval_map(args) -> int:
    truth = {e.id: e.label for e in read_manifest(args.truth)}
    rows = []
    pred = Path(args.pred)
    try:
        lines = pred.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read predictions {pred}: {e}") from e
    if not lines or lines[0].strip() != "video_id,class_id,score":
        raise DataError(f"{pred}: expected header 'video_id,class_id,score'")
    for ln, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataError(f"{pred}:{ln}: expected 3 comma-separated fields")
        vid, cls, score = parts
        if vid not in truth:
            raise DataError(f"{pred}:{ln}: unknown video id {vid!r}")
        rows.append((vid, int(cls), float(score)))
    classes = sorted({cls for _, cls, _ in rows})
    per_class = {}
    for cls in classes:
        class_rows = [(vid, score) for vid, c, score in rows if c == cls]
        scores = np.array([s for _, s in class_rows])
        labels = np.array([truth[v] == cls for v, _ in class_rows])
        per_class[cls] = average_precision(scores, labels)
        print(f"class={cls} ap={per_class[cls]:.4f}")
    value = float(np.mean(list(per_class.values())))
    print(f"map={value:.4f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(
            {"per_class_ap": {str(k): v for k, v in per_class.items()},
             "map": value}, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_caption_train(args) -> int:
    config = _load_config(args)
    corpus = Corpus.load(args.manifest, args.captions)
    init_values = None
    if args.ckpt:
        init_values, _, _ = load_checkpoint(args.ckpt)
    trainer = CaptionTrainer(corpus, config, init_values=init_values,
                             freeze_encoder=args.freeze_encoder,
                             max_caption_len=args.max_caption_len)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    log = TeeLog(str(args.out) + ".log")
    trainer.train(steps=config.steps, log=log, out_path=args.out,
                  eval_every=args.eval_every)
    log.save()
    print(f"wrote {args.out}")
    return 0


def cmd_caption_decode(args) -> int:
    values, cfg_dict, _ = load_checkpoint(args.ckpt)
    for key in ("_vocab_tokens", "_embed_dim", "_max_caption_len"):
        if key not in cfg_dict:
            raise DataError(f"{args.ckpt}: not a caption checkpoint (missing {key})")
    config = RunConfig.from_dict(_strip_private(cfg_dict))
    vocab = Vocab(cfg_dict["_vocab_tokens"])
    corpus = Corpus.load(args.manifest)
    store = ParamStore()
    model = CaptionModel(store, corpus.feature_dim(), config, vocab.size,
                         RngState(config.seed), embed_dim=cfg_dict["_embed_dim"])
    store.load_values(values)
    max_len = args.max_len or cfg_dict["_max_caption_len"]
    entries = corpus.entries if args.split == "all" else corpus.split(args.split)
    if not entries:
        raise DataError(f"no videos in split {args.split!r}")
    records = []
    for e in entries:
        trace = model.encode(corpus.features(e.id)[:config.K])
        hyp = beam_decode(model, trace, args.beam, max_len)
        caption = vocab.decode(hyp.tokens)
        if not hyp.finished:
            print(f"warning: {e.id}: no finished hypothesis within "
                  f"{max_len} tokens", file=sys.stderr)
        records.append({"id": e.id, "caption": caption, "logprob": hyp.logprob})
        print(f"id={e.id} logprob={hyp.logprob:.4f} caption={caption!r}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.module, seeds=args.seeds)
    for r in results:
        print(f"op={r.name} max_rel_err={r.max_rel_error:.3e}")
    failed = [r for r in results if not r.passed]
    if failed:
        raise NumericError(f"{len(failed)} op(s) exceeded the {TOLERANCE:g} "
                           f"gradient tolerance: {[r.name for r in failed]}")
    print(f"all {len(results)} ops within tolerance {TOLERANCE:g}")
    return 0


def cmd_compare_multirate(args) -> int:
    config = _load_config(args)
    corpus = Corpus.load(args.manifest)
    result = compare_multirate(corpus, config, seeds=range(args.seeds),
                               steps=args.steps, log=print)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.md").write_text(comparison_markdown(result))
    (out / "comparison.csv").write_text(comparison_csv(result))
    print(f"gru_mean={result.gru_mean:.6f} mgru_mean={result.mgru_mean:.6f} "
          f"ratio={result.ratio:.4f}")
    return 0


# ------------------------------------------------------------------ report

def _parse_loss_log(path: Path):
    rows = []
    for line in path.read_text().splitlines():
        fields = dict(part.split("=", 1) for part in line.split() if "=" in part)
        if "step" in fields and "loss" in fields:
            rows.append((int(fields["step"]), float(fields["loss"])))
    return rows


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise DataError(f"run directory {run} does not exist")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    logs = sorted(run.rglob("*.log"))
    if not logs:
        raise DataError(f"{run}: no loss logs (*.log) found")

    sections = ["# Run report", ""]
    sections.append("## Loss curves")
    for log_path in logs:
        rows = _parse_loss_log(log_path)
        if not rows:
            continue
        name = log_path.stem.replace(".", "_")
        csv_path = out / f"loss_{name}.csv"
        csv_path.write_text("step,loss\n" +
                            "".join(f"{s},{v:.6f}\n" for s, v in rows))
        sections.append(f"- {log_path.name}: {len(rows)} steps, "
                        f"final loss {rows[-1][1]:.6f} (curve: {csv_path.name})")
    sections.append("")

    sections.append("## Metrics")
    evals = []
    for j in sorted(run.rglob("*.json")):
        if j.name == "ids.json":
            continue
        try:
            doc = json.loads(j.read_text())
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(doc, dict) and "map" in doc:
            evals.append((j, doc))
    if evals:
        sections.append("| file | mAP |")
        sections.append("|---|---|")
        for j, doc in evals:
            sections.append(f"| {j.name} | {doc['map']:.4f} |")
    else:
        sections.append("no evaluation")
    sections.append("")

    sections.append("## Configs")
    configs = []
    for ckpt in sorted(run.rglob("*.ckpt")):
        try:
            _, cfg, _ = load_checkpoint(ckpt)
        except DataError:
            continue
        configs.append((ckpt.name, _strip_private(cfg)))
    for name, cfg in configs:
        sections.append(f"- {name}: `{json.dumps(cfg, sort_keys=True)}`")
    if len(configs) >= 2:
        base_name, base = configs[0]
        for name, cfg in configs[1:]:
            keys = sorted(k for k in set(base) | set(cfg)
                          if base.get(k) != cfg.get(k))
            if keys:
                sections.append(f"- {name} vs {base_name}: identical except "
                                + ", ".join(keys))
            else:
                sections.append(f"- {name} vs {base_name}: identical")
    sections.append("")

    report_path = out / "report.md"
    report_path.write_text("\n".join(sections))
    print(f"wrote {report_path}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> Parser:
    parser = Parser(prog="multirate",
                    description="Multirate recurrent video sequence modeling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic corpus")
    p.add_argument("--kind", required=True, choices=["multirate", "events", "captions"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--frames-min", type=int, dest="frames_min")
    p.add_argument("--frames-max", type=int, dest="frames_max")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("pretrain", help="unsupervised reconstruction pretraining")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-every", type=int, default=0, dest="save_every")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised encoder+head fine-tuning")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--head-hidden", type=int, default=1024, dest="head_hidden")
    p.add_argument("--target-loss", type=float, dest="target_loss")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("encode-pool", help="average-pooled state features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode_pool)

    p = sub.add_parser("encode-vlad", help="per-group VLAD state features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--centers", type=int, default=8)
    p.add_argument("--pca", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode_vlad)

    p = sub.add_parser("classify", help="train/evaluate linear SVMs on features")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True, help="manifest with labels/splits")
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval-map", help="mean average precision from predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_map)

    p = sub.add_parser("caption-train", help="caption decoder training")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--freeze-encoder", action="store_true", dest="freeze_encoder")
    p.add_argument("--max-caption-len", type=int, default=20, dest="max_caption_len")
    p.add_argument("--eval-every", type=int, default=0, dest="eval_every")
    p.set_defaults(func=cmd_caption_train)

    p = sub.add_parser("caption-decode", help="beam-search caption decoding")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--split", default="all", choices=["train", "val", "test", "all"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_caption_decode)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", default="all",
                   choices=["numeric", "recurrent", "seq2seq", "classify",
                            "caption", "all"])
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare-multirate",
                       help="paired-seed reconstruction: plain GRU vs multirate")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_multirate)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DataError, UndefinedMetricError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""``minidrive`` command line: generate, train, eval, gradcheck, ablate, saliency, report.

Exit codes: 0 ok, 2 validation error, 3 numerical-check failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import certify, complexity, metrics
from . import tensor as T
from .config import (ConfigError, RunConfig, atomic_write_text, dump_json, git_blob_hash,
                     load_checkpoint, save_checkpoint)
from .encoder import CAMERAS
from .gradcheck import THRESHOLD_64
from .lm import Vocabulary, detokenize, split_words
from .model import (MiniDrive, ModelConfig, cached_features, encode_answer, encode_question,
                    images_array, pad_rows)
from .scenes import ManifestError, generate_split, read_dataset, referenced_camera, write_dataset, write_pgm
from .train import TrainConfig, build_vocab, exact_match, predict, train

log = logging.getLogger("minidrive")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class NumericalCheckFailed(ArithmeticError):
    pass


# ---------------------------------------------------------------- plumbing


@contextlib.contextmanager
def output_dir(path: str | None, force: bool):
    """Yield a staging directory that replaces ``path`` only if the block succeeds."""
    if path is None:
        raise ConfigError("--out is required for this command")
    final = Path(path)
    if final.exists() and (not final.is_dir() or any(final.iterdir())) and not force:
        raise ConfigError(f"output {final} exists and is not empty (use --force to replace it)")
    final.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{final.name}.tmp-"))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if final.exists():
        if final.is_dir():
            shutil.rmtree(final)
        else:
            final.unlink()
    os.replace(stage, final)


def thread_count(parallel: bool) -> int:
    if not parallel:
        return 1
    cap = os.environ.get("MD_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"MD_THREADS must be an integer, got {cap!r}") from None
    return n


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def provenance(cfg: RunConfig) -> dict:
    return {"config": cfg.source, "config_resolved": cfg.resolved()}


def split_dir(data: str | Path, split: str) -> Path:
    root = Path(data)
    if (root / "manifest.jsonl").exists():
        return root
    return root / split


def load_split(data, split: str):
    samples = read_dataset(split_dir(data, split))
    if not samples:
        raise ConfigError(f"{split} split in {data} is empty")
    return samples


def check_samples(samples, model_cfg: ModelConfig) -> None:
    cams = CAMERAS[:model_cfg.num_views]
    size = model_cfg.encoder.input_size
    for s in samples:
        for cam in cams:
            if cam not in s.views:
                raise ConfigError(f"sample {s.id} lacks view {cam}")
            if s.views[cam].shape != (size, size, 3):
                raise ConfigError(f"sample {s.id} view {cam} is {s.views[cam].shape[:2]}, "
                                  f"config expects {size}x{size}")


def predict_samples(model: MiniDrive, samples, vocab: Vocabulary, threads: int,
                    chunk: int = 32) -> list[str]:
    """Greedy answers; with several threads, chunks are decoded concurrently (same chunking)."""
    if threads <= 1:
        return predict(model, samples, vocab, chunk=chunk)
    parts = [samples[i:i + chunk] for i in range(0, len(samples), chunk)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        outs = list(pool.map(lambda part: predict(model, part, vocab, chunk=chunk), parts))
    return [p for out in outs for p in out]


def evaluate(model, samples, vocab, threads: int, features=None):
    if features is not None:
        preds = predict(model, samples, vocab, features=features)
    else:
        preds = predict_samples(model, samples, vocab, threads)
    records = [{"id": s.id, "prediction": p, "references": [s.answer], "category": s.category}
               for s, p in zip(samples, preds)]
    pairs = [metrics.EvalPair.from_text(r["prediction"], r["references"], r["category"], r["id"])
             for r in records]
    rep = metrics.report(pairs)
    rep["exact_match"] = exact_match(preds, samples)
    return records, rep


def predictions_text(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def model_from_checkpoint(directory):
    state, manifest, vocab = load_checkpoint(directory)
    cfg = RunConfig.from_dict(manifest["config"])
    if cfg.model.lm.vocab_size != len(vocab):
        raise ConfigError(f"checkpoint vocab has {len(vocab)} tokens, config says {cfg.model.lm.vocab_size}")
    model = MiniDrive(cfg.model)
    model.load_state_dict(state)
    return model, cfg, vocab, manifest


def check_vocab(data, samples, vocab: Vocabulary) -> None:
    """The checkpoint vocabulary must be the one its dataset's train split produces."""
    train_dir = Path(data) / "train"
    if (train_dir / "manifest.jsonl").exists():
        expected = build_vocab(read_dataset(train_dir))
        if expected != vocab:
            raise ConfigError(f"vocab mismatch: checkpoint has {len(vocab)} tokens, the train split of "
                              f"{data} yields {len(expected)} different ones")
        return
    unknown = sorted({w for s in samples for w in split_words(s.question) if w not in vocab.index})
    if unknown:
        log.warning("%d question word(s) are unknown to the checkpoint vocabulary, e.g. %s",
                    len(unknown), unknown[:5])


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    if args.train < 1:
        raise ConfigError("--train must be at least 1 (empty training set)")
    if args.test < 0:
        raise ConfigError("--test must be non-negative")
    seed = 0 if args.seed is None else args.seed
    with output_dir(args.out, args.force) as stage:
        for split, count in (("train", args.train), ("test", args.test)):
            write_dataset(generate_split(seed, split, count, args.size), stage / split)
        info = {"seed": seed, "train": args.train, "test": args.test, "size": args.size}
        atomic_write_text(stage / "dataset.json", dump_json(info))
    log.info("wrote %d train / %d test samples to %s", args.train, args.test, args.out)
    return EXIT_OK


def fit(cfg: RunConfig, train_samples, threads: int, on_loss=None):
    """Vocabulary, model and training for one configuration; returns (model, vocab, losses, encoder_unchanged)."""
    check_samples(train_samples, cfg.model)
    vocab = build_vocab(train_samples)
    lm = cfg.model.lm
    if lm.vocab_size == 0:
        lm.vocab_size = len(vocab)
    elif lm.vocab_size != len(vocab):
        raise ConfigError(f"lm.vocab_size={lm.vocab_size} but the training data yields {len(vocab)} tokens")
    longest = max(len(split_words(s.answer)) for s in train_samples)
    if longest > lm.max_answer_len:
        log.warning("answers up to %d tokens exceed max_answer_len=%d and are truncated",
                    longest, lm.max_answer_len)
    model = MiniDrive(cfg.model)
    frozen_before = {k: v.copy() for k, v in model.encoder.state_dict().items()}
    feats = cached_features(model, train_samples) if cfg.model.encoder.frozen else None
    losses = train(model, train_samples, vocab, cfg.train, on_step=on_loss, features=feats)
    unchanged = all(np.array_equal(v, model.encoder.state_dict()[k]) for k, v in frozen_before.items())
    return model, vocab, losses, unchanged


def cmd_train(args) -> int:
    cfg = load_config(args)
    data = args.data or cfg.data.dir
    train_samples = load_split(data, "train")
    eval_samples = load_split(data, cfg.data.split)
    check_samples(eval_samples, cfg.model)
    threads = thread_count(args.parallel)
    with output_dir(args.out, args.force) as stage:
        model, vocab, losses, unchanged = fit(cfg, train_samples, threads)
        if cfg.model.encoder.frozen and not unchanged:
            raise NumericalCheckFailed("frozen encoder parameters changed during training")
        resolved = cfg.resolved()
        digest = save_checkpoint(stage / "checkpoint", model.state_dict(), resolved, vocab,
                                 cfg.train.steps)
        atomic_write_text(stage / "loss.csv",
                          "step,loss\n" + "".join(f"{i},{v:.9g}\n" for i, v in enumerate(losses)))
        records, rep = evaluate(model, eval_samples, vocab, threads)
        atomic_write_text(stage / "predictions.jsonl", predictions_text(records))
        summary = {**provenance(cfg), "checkpoint_hash": digest, "split": cfg.data.split,
                   "metrics": rep, "encoder_unchanged": unchanged,
                   "initial_loss": losses[0], "final_loss": losses[-1]}
        atomic_write_text(stage / "report.json", dump_json(summary))
        atomic_write_text(stage / "table.txt", metrics.format_table(rep))
        atomic_write_text(stage / "config.json", dump_json(cfg.source))
    log.info("exact match on %s: %.4f", cfg.data.split, rep["exact_match"])
    print(metrics.format_table(rep), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    model, cfg, vocab, manifest = model_from_checkpoint(args.checkpoint)
    data = args.data or cfg.data.dir
    samples = read_dataset(split_dir(data, cfg.data.split))
    if not samples:
        raise ConfigError("test set is empty")
    check_samples(samples, cfg.model)
    check_vocab(data, samples, vocab)
    records, rep = evaluate(model, samples, vocab, thread_count(args.parallel))
    with output_dir(args.out, args.force) as stage:
        atomic_write_text(stage / "predictions.jsonl", predictions_text(records))
        summary = {**provenance(cfg), "checkpoint_hash": manifest["weights_hash"], "metrics": rep}
        atomic_write_text(stage / "report.json", dump_json(summary))
        atomic_write_text(stage / "table.txt", metrics.format_table(rep))
    print(metrics.format_table(rep), end="")
    return EXIT_OK


def cmd_score(args) -> int:
    """Metrics for an existing predictions file (the standalone metrics path)."""
    pairs = metrics.read_predictions(args.predictions)
    if not pairs:
        raise ConfigError("predictions file is empty")
    rep = metrics.report(pairs)
    text = dump_json(rep)
    if args.out:
        atomic_write_text(args.out, text)
    print(metrics.format_table(rep), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be at least 1")
    seed = 0 if args.seed is None else args.seed
    results = certify.run(trials=args.trials, seed=seed)
    bad = certify.failures(results)
    width = max(len(k) for k in results)
    for name, err in results.items():
        status = "FAIL" if name in bad else "ok"
        print(f"{name.ljust(width)}  {err:.3e}  {status}")
    if args.out:
        payload = {"threshold": THRESHOLD_64, "max_kink_fraction": certify.MAX_KINK_FRACTION,
                   "trials": args.trials, "seed": seed, "max_rel_err": results}
        atomic_write_text(Path(args.out), dump_json(payload))
    if bad:
        raise NumericalCheckFailed("gradient check above threshold: " + ", ".join(bad))
    return EXIT_OK


ABLATIONS = {
    "experts": [("experts=2", {"num_experts": 2, "expert_out_channels": 16}),
                ("experts=4", {"num_experts": 4, "expert_out_channels": 16}),
                ("experts=6", {"num_experts": 6, "expert_out_channels": 16})],
    "tokens": [("tokens=8", {"num_experts": 4, "expert_out_channels": 8}),
               ("tokens=16", {"num_experts": 4, "expert_out_channels": 16}),
               ("tokens=32", {"num_experts": 4, "expert_out_channels": 32})],
}


def ablation_table(rows: list[dict]) -> str:
    head = ["config", "tokens/img", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr", "EM"]
    lines = ["FE-MoE ablation (scores x100, CIDEr raw)", "".join(h.rjust(12) for h in head)]
    for r in rows:
        m = r["metrics"]["overall_x100"]
        cells = [r["name"], str(r["tokens_per_image"])]
        cells += [f"{m[k]:.2f}" for k in metrics.METRICS]
        cells.append(f"{100 * r['metrics']['exact_match']:.2f}")
        lines.append("".join(c.rjust(12) for c in cells))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    base = load_config(args)
    data = args.data or base.data.dir
    train_samples = load_split(data, "train")
    eval_samples = load_split(data, base.data.split)
    axes = list(ABLATIONS) if args.axis == "all" else [args.axis]
    threads = thread_count(args.parallel)
    rows = []
    with output_dir(args.out, args.force) as stage:
        for axis in axes:
            for name, overrides in ABLATIONS[axis]:
                doc = copy.deepcopy(base.source)
                doc.setdefault("moe", {}).update(overrides)
                cfg = RunConfig.from_dict(doc)
                cfg.train = copy.deepcopy(base.train)
                log.info("ablation %s/%s", axis, name)
                model, vocab, _, _ = fit(cfg, train_samples, threads)
                with T.no_tape():
                    probe = cached_features(model, eval_samples[:1])
                    tokens = model.visual_tokens(T.Tensor(probe)).shape[-2] // cfg.model.num_views
                records, rep = evaluate(model, eval_samples, vocab, threads)
                rows.append({"axis": axis, "name": name, "moe": asdict(cfg.model.moe),
                             "tokens_per_image": tokens, "metrics": rep})
        table = ablation_table(rows)
        atomic_write_text(stage / "ablation.txt", table)
        atomic_write_text(stage / "ablation.json", dump_json({**provenance(base), "rows": rows}))
    print(table, end="")
    return EXIT_OK


def saliency_maps(model: MiniDrive, sample, vocab: Vocabulary) -> tuple[dict[str, np.ndarray], str, dict]:
    """|d log p(decoded answer) / d pixel| per view, channel-maxed and min-max normalized."""
    cams = CAMERAS[:model.cfg.num_views]
    lm = model.cfg.lm
    q = pad_rows([encode_question(sample.question, vocab, lm.max_text_len)])
    with T.no_tape():
        feats = model.features(images_array([sample], cams))
    ids = model.generate(feats, q)[0]
    answer = " ".join(vocab.decode(ids))
    dec_in, target = encode_answer(answer, vocab, lm.max_answer_len)
    pixels = T.Tensor(images_array([sample], cams), requires_grad=True)
    with T.Tape() as tape:
        logits, loss = model.forward(model.features(pixels), q, pad_rows([dec_in]), pad_rows([target]))
        # cross-entropy is a mean; scale back to the summed log-likelihood
        log_p = T.scale(loss, -float(len(target)))
    tape.backward(log_p)
    grad = np.abs(pixels.grad[0])  # [views, 3, H, W]
    maps, totals = {}, {}
    for i, cam in enumerate(cams):
        g = grad[i].max(axis=0)
        totals[cam] = float(g.sum())
        lo, hi = g.min(), g.max()
        maps[cam] = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    return maps, detokenize(ids, vocab), {"total_saliency": totals, "log_p": float(log_p.data)}


def cmd_saliency(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    model, cfg, vocab, manifest = model_from_checkpoint(args.checkpoint)
    data = args.data or cfg.data.dir
    samples = {s.id: s for s in read_dataset(split_dir(data, cfg.data.split))}
    if args.sample not in samples:
        raise ConfigError(f"sample {args.sample!r} not found in {split_dir(data, cfg.data.split)}")
    sample = samples[args.sample]
    check_samples([sample], cfg.model)
    maps, answer, info = saliency_maps(model, sample, vocab)
    ref = referenced_camera(sample.question)
    totals = info["total_saliency"]
    others = [c for c in totals if c != ref]
    diag = None
    if ref in totals and others:
        diag = {"referenced_view": ref, "referenced_exceeds_max_other":
                totals[ref] > max(totals[c] for c in others)}
        log.info("saliency: referenced %s total %.4g vs max other %.4g", ref, totals[ref],
                 max(totals[c] for c in others))
    with output_dir(args.out, args.force) as stage:
        for cam, m in maps.items():
            write_pgm(stage / f"{args.sample}_{cam}.pgm", np.round(m * 255).astype(np.uint8))
        payload = {**provenance(cfg), "checkpoint_hash": manifest["weights_hash"], "sample": sample.id,
                   "question": sample.question, "decoded_answer": answer, "reference": sample.answer,
                   "diagnostic": diag, **info}
        atomic_write_text(stage / "saliency.json", dump_json(payload))
    print(answer)
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = load_config(args)
    lm = cfg.model.lm
    if args.vocab_size:
        lm.vocab_size = args.vocab_size
    if lm.vocab_size == 0:
        train_dir = split_dir(cfg.data.dir, "train")
        if not (train_dir / "manifest.jsonl").exists():
            raise ConfigError("lm.vocab_size is 0: pass --vocab-size or point data.dir at a dataset")
        lm.vocab_size = len(build_vocab(read_dataset(train_dir)))
    payload = {**provenance(cfg), "vocab_size": lm.vocab_size,
               "parameters": complexity.parameter_counts(cfg.model),
               "multiply_adds_per_sample": complexity.multiply_adds(cfg.model)}
    text = dump_json(payload)
    if args.out:
        atomic_write_text(Path(args.out), text)
    p, f = payload["parameters"], payload["multiply_adds_per_sample"]
    print(f"parameters: {p['total']:,} total, {p['trainable']:,} trainable, {p['frozen']:,} frozen")
    print(f"multiply-adds per sample: {f['total']:,}")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    def add_globals(p, suppress: bool):
        d = argparse.SUPPRESS if suppress else None
        p.add_argument("--config", default=d, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=d)
        p.add_argument("--out", default=d, help="output directory (or file, for gradcheck/report)")
        p.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False)
        p.add_argument("--parallel", action="store_true",
                       default=argparse.SUPPRESS if suppress else False,
                       help="concurrent per-sample evaluation (threads capped by MD_THREADS)")
        p.add_argument("-v", "--verbose", action="store_true",
                       default=argparse.SUPPRESS if suppress else False)

    parser = argparse.ArgumentParser(prog="minidrive", description=__doc__.splitlines()[0])
    add_globals(parser, False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        add_globals(p, True)
        p.set_defaults(fn=fn)
        return p

    p = command("generate", cmd_generate, "write a synthetic multi-view QA dataset")
    p.add_argument("--train", type=int, default=512)
    p.add_argument("--test", type=int, default=128)
    p.add_argument("--size", type=int, default=64)
    p = command("train", cmd_train, "train with a frozen encoder, then score the eval split")
    p.add_argument("--data")
    p = command("eval", cmd_eval, "greedy-decode a split and score it")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p = command("score", cmd_score, "score an existing predictions JSONL")
    p.add_argument("predictions")
    p = command("gradcheck", cmd_gradcheck, "finite-difference certification of every gradient")
    p.add_argument("--trials", type=int, default=5)
    p = command("ablate", cmd_ablate, "expert-count and token-count sweeps")
    p.add_argument("--axis", choices=["experts", "tokens", "all"], default="all")
    p.add_argument("--data")
    p = command("saliency", cmd_saliency, "gradient saliency maps for one sample")
    p.add_argument("--checkpoint")
    p.add_argument("--sample", required=True)
    p.add_argument("--data")
    p = command("report", cmd_report, "closed-form parameter and multiply-add counts")
    p.add_argument("--vocab-size", type=int, default=0)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=thread_count(args.parallel)):
            return args.fn(args)
    except (NumericalCheckFailed, T.NumericalError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except (ConfigError, ManifestError, T.DimensionError, ValueError, KeyError) as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)

if __name__ == "__main__":
    sys.exit(main())

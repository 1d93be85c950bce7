"""Command-line entry point: ``beat <command> [flags]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import align as al
from . import data as dt
from . import textembed as te
from .checkpoint import Checkpoint, CheckpointError
from .gradcheck import run_suite
from .metrics import cluster_purity, micro_alignment
from .train import (CODEBOOKS, EvalSet, NumericalFailure, Stage2Config, TrainConfig, auc_from_scores,
                    hits_from_scores, model_from_checkpoint, projector_from_checkpoint, stream, train_projector,
                    train_tokenizer)
from .vocab import codebook_stats

log = logging.getLogger("beat")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# flag resolution


GEN_DEFAULTS = {
    "groups": 8, "micro_pool": 24, "users": 2000, "items": 1000, "factors": 3, "noise": 0.02,
    "embed_noise": 0.05, "text_dim": 32, "review_rate": 0.3, "cold_fraction": 0.1, "split": [0.8, 0.1, 0.1],
}
TOKENIZER_KEYS = {
    "alpha": "alpha", "beta": "beta", "eta": "eta", "lr": "learning_rate", "batch_size": "batch_size",
    "max_epochs": "max_epochs", "patience": "patience", "k": "eval_k", "negatives": "negatives_per_eval",
    "slot_dim": "slot_dim", "codeword_dim": "codeword_dim", "micro_count": "micro_count", "layers": "layers",
    "k_macro": "k_macro", "k_micro": "k_micro", "optimizer": "optimizer", "dead_code_reset": "dead_code_reset",
    "item_micro": "item_micro", "max_len": "max_len", "split": "split",
}
PROJECTOR_KEYS = {
    "gamma": "gamma", "lr": "learning_rate", "weight_decay": "weight_decay", "batch_size": "batch_size",
    "steps": "steps", "max_pairs": "max_pairs", "word_dim": "word_dim", "hidden": "hidden",
    "template": "template", "candidates": "candidates", "head_scale": "head_scale",
}


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults < config file < explicit flags; the seed falls back to BEAT_SEED."""
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config", "func")}
    config = {}
    if getattr(args, "config", None):
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(config, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
    out = dict(defaults)
    out.update(config)
    out.update(given)
    if "seed" not in given and "seed" not in config:
        env = os.environ.get("BEAT_SEED")
        try:
            out["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"BEAT_SEED must be an integer, got {env!r}") from None
    return out


def _pick(resolved: dict, mapping: dict) -> dict:
    return {field: resolved[key] for key, field in mapping.items() if key in resolved}


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: dict, start: float,
                   name: str = "manifest.json") -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in inputs.items() if p is not None},
        "outputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in outputs.items()},
        "duration_s": round(time.time() - start, 3),
    }
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _paths(data_dir) -> dict[str, Path]:
    root = Path(data_dir)
    paths = {k: root / v for k, v in dt.CORPUS_FILES.items()}
    if not paths["interactions"].exists():
        raise UsageError(f"missing {paths['interactions']}")
    return {k: p for k, p in paths.items() if p.exists()}


def _load(data_dir, word_embeddings=None) -> tuple[dt.Corpus, dict[str, Path]]:
    paths = _paths(data_dir)
    provider = te.FileProvider.from_words(word_embeddings) if word_embeddings else None
    corpus = dt.load_corpus(paths["interactions"], paths.get("reviews"), paths.get("intents"),
                            paths.get("explanations"), provider)
    return corpus, paths


def _load_checkpoint(path, kind: str) -> Checkpoint:
    if not Path(path).exists():
        raise UsageError(f"missing checkpoint {path}")
    ckpt = Checkpoint.load(path)
    if ckpt.meta.get("kind") != kind:
        raise UsageError(f"{path} is not a {kind} checkpoint")
    return ckpt


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    start = time.time()
    cfg = resolve(args, GEN_DEFAULTS)
    spec = dt.SyntheticSpec(
        groups=cfg["groups"], micro_pool=cfg["micro_pool"], users=cfg["users"], items=cfg["items"],
        factors=cfg["factors"], interaction_noise=cfg["noise"], embed_noise=cfg["embed_noise"], seed=cfg["seed"],
        text_dim=cfg["text_dim"], review_rate=cfg["review_rate"], cold_fraction=cfg["cold_fraction"],
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    corpus, truth = dt.synth_generate(spec)
    corpus = dt.split_corpus(corpus, cfg["split"], cfg["seed"])
    out = Path(cfg["out"])
    paths = dt.write_corpus(corpus, out, truth)
    write_manifest(out, "gen-data", cfg, {}, paths, start)
    print(f"wrote {corpus.interactions.shape[0]} interactions, {len(corpus.reviews)} reviews, "
          f"{len(corpus.micro)} intent sequences to {out}")
    return EXIT_OK


def _print_epoch(row: dict) -> None:
    util = " ".join(f"{n}={row[f'{n}.utilization']:.2f}" for n in CODEBOOKS)
    print(f"epoch {row['epoch']:3d} hr={row['hr']:.4f} total={row['total']:.4f} recon={row['recon']:.4f} "
          f"vq={row['vq']:.4f} macro={row['macro']:.4f} micro={row['micro']:.4f} util[{util}]", flush=True)


def cmd_train_tokenizer(args) -> int:
    start = time.time()
    cfg = resolve(args, {})
    corpus, paths = _load(cfg["data"])
    tcfg = TrainConfig(seed=cfg["seed"], **_pick(cfg, TOKENIZER_KEYS))
    if not corpus.is_split:
        corpus = dt.split_corpus(corpus, tcfg.split, tcfg.seed)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    resume = Checkpoint.load(cfg["resume"]) if cfg.get("resume") else None
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "a" if resume else "w", encoding="utf-8") as fh:
        def on_epoch(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()
            _print_epoch(row)
        try:
            result = train_tokenizer(corpus, tcfg, resume=resume, on_epoch=on_epoch,
                                     stop_after=cfg.get("stop_after"))
        except NumericalFailure as exc:
            if exc.checkpoint is not None:
                exc.checkpoint.save(out / "last_good.ckpt")
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    best, last = out / "best.ckpt", out / "last.ckpt"
    result.best.save(best)
    result.last.save(last)
    hist = result.history[-1] if result.history else None
    if hist:
        print(f"final: hr@{tcfg.eval_k}={hist['hr']:.4f} best={result.best.meta['best_hr']:.4f} "
              f"(epoch {result.best.meta['epoch']}) recon={hist['recon']:.4f} vq={hist['vq']:.4f} "
              f"macro={hist['macro']:.4f} micro={hist['micro']:.4f}")
    else:
        print("final: no epochs run; wrote the initialized model")
    write_manifest(out, "train-tokenizer", {**cfg, "train": tcfg.to_dict()}, paths,
                   {"best": best, "last": last, "metrics": metrics_path}, start)
    return EXIT_OK


def cmd_train_projector(args) -> int:
    start = time.time()
    cfg = resolve(args, {})
    corpus, paths = _load(cfg["data"])
    try:
        tok = _load_checkpoint(cfg["tokenizer"], "tokenizer")
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    scfg = Stage2Config(seed=cfg["seed"], **_pick(cfg, PROJECTOR_KEYS))
    provider = te.FileProvider.from_words(cfg["word_embeddings"]) if cfg.get("word_embeddings") else None
    if provider is not None and provider.dim != scfg.word_dim:
        scfg = Stage2Config(**{**scfg.to_dict(), "word_dim": provider.dim})
    if not corpus.is_split:
        corpus = dt.split_corpus(corpus, tok.meta["config"]["split"], tok.meta["config"]["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "stage2.jsonl"

    def on_log(row):
        print(f"step {row['step']:5d} nll={row['nll']:.4f} sar={row['sar']:.4f} "
              f"discrepancy={row['probe_discrepancy']:.4f}", flush=True)
    try:
        result = train_projector(corpus, tok, scfg, provider, on_log)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    with open(log_path, "w", encoding="utf-8") as fh:
        for row in result.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    ckpt_path = out / "projector.ckpt"
    result.checkpoint.save(ckpt_path)
    changed = result.checksum_before != result.checksum_after
    print(f"discrepancy {result.probe_start:.4f} -> {result.probe_end:.4f}; backbone "
          f"{'CHANGED' if changed else 'unchanged'} ({result.checksum_after[:16]})")
    inputs = dict(paths, tokenizer=Path(cfg["tokenizer"]))
    write_manifest(out, "train-projector", {**cfg, "stage2": scfg.to_dict()}, inputs,
                   {"projector": ckpt_path, "log": log_path}, start)
    return EXIT_NUMERIC if changed else EXIT_OK


def _entities(spec: str | None):
    if not spec:
        return None
    text = Path(spec).read_text(encoding="utf-8") if Path(spec).exists() else spec.replace(",", "\n")
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        kind, _, eid = line.partition(":")
        if kind not in ("user", "item") or not eid:
            raise UsageError(f"entity {line!r} must look like user:<id> or item:<id>")
        out.append((kind, eid))
    return out


def cmd_tokenize(args) -> int:
    start = time.time()
    cfg = resolve(args, {})
    tok = _load_checkpoint(cfg["tokenizer"], "tokenizer")
    model = model_from_checkpoint(tok)
    projector = projector_from_checkpoint(_load_checkpoint(cfg["projector"], "projector")) \
        if cfg.get("projector") else None
    template = cfg.get("template") or al.DEFAULT_TEMPLATE
    enc = model.encode_all()
    sides = [al.SideEncoding("user", tok.meta["users"], enc["user"]["indices"], enc["user"]["codewords"]),
             al.SideEncoding("item", tok.meta["items"], enc["item"]["indices"], enc["item"]["codewords"])]
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    report = al.export_tokens(sides, projector, out, _entities(cfg.get("entities")), template)
    print(f"wrote {report['written']} entities to {out}; {len(report['rejects'])} rejected")
    for rej in report["rejects"]:
        print(f"  unknown {rej['kind']} {rej['entity']!r}", file=sys.stderr)
    inputs = {"tokenizer": Path(cfg["tokenizer"])}
    if cfg.get("projector"):
        inputs["projector"] = Path(cfg["projector"])
    write_manifest(out.parent, "tokenize", cfg, inputs, {"tokens": out, "prompt": Path(report["prompt"])}, start,
                   name=out.name + ".manifest.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    start = time.time()
    cfg = resolve(args, {"split": "test", "k": 20, "negatives": 99, "scorer": "model"})
    tok = _load_checkpoint(cfg["tokenizer"], "tokenizer")
    corpus, paths = _load(cfg["data"])
    tcfg = tok.meta["config"]
    if not corpus.is_split:
        corpus = dt.split_corpus(corpus, tcfg["split"], tcfg["seed"])
    if list(corpus.users) != tok.meta["users"] or list(corpus.items) != tok.meta["items"]:
        raise UsageError("corpus entities do not match the checkpoint")
    model = model_from_checkpoint(tok)
    enc = model.encode_all()
    evalset = EvalSet.build(corpus, cfg["split"], cfg["negatives"], stream(cfg["seed"], "eval"))
    if cfg["scorer"] == "model":
        pos, neg = evalset.scores(enc["user"]["q"], enc["item"]["q"])
    elif cfg["scorer"] == "oracle":
        pos, neg = np.ones(evalset.pairs.shape[0]), np.zeros(evalset.negatives.shape)
    else:
        rng = stream(cfg["seed"], "eval")
        pos, neg = rng.random(evalset.pairs.shape[0]), rng.random(evalset.negatives.shape)
    report = {
        "split": cfg["split"], "scorer": cfg["scorer"], "k": cfg["k"], "evaluated": int(evalset.pairs.shape[0]),
        "skipped": evalset.skipped,
        "hr": float(hits_from_scores(pos, neg, cfg["k"]).mean()) if pos.size else 0.0,
        "auc": auc_from_scores(pos, neg) if pos.size else 0.0,
        "codebooks": {},
    }
    for side in ("user", "item"):
        idx = enc[side]["indices"]
        for role, assign in (("macro", idx[:, 0]), ("micro", idx[:, 1:].reshape(-1))):
            k = tok.arrays[f"{side}.{role}.codebook"].shape[0]
            s = codebook_stats(assign, k)
            report["codebooks"][f"{side}.{role}"] = {"utilization": s.utilization, "perplexity": s.perplexity}
    truth_path = cfg.get("truth") or paths.get("truth")
    inputs = dict(paths, tokenizer=Path(cfg["tokenizer"]))
    if truth_path:
        truth = dt.load_truth(truth_path)
        inputs["truth"] = Path(truth_path)
        for side, ids in (("user", tok.meta["users"]), ("item", tok.meta["items"])):
            rows = [k for k, e in enumerate(ids) if e in truth]
            if not rows:
                continue
            groups = np.asarray([truth[ids[k]][0] for k in rows])
            report[f"{side}_macro_purity"] = cluster_purity(enc[side]["indices"][rows, 0], groups)
            factors = [truth[ids[k]][1] for k in rows]
            if factors and all(factors) and len({len(f) for f in factors}) == 1:
                report[f"{side}_micro_alignment"] = micro_alignment(enc[side]["indices"][rows, 1:],
                                                                    np.asarray(factors))
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        write_manifest(out.parent, "eval", cfg, inputs, {"report": out}, start, name=out.name + ".manifest.json")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = resolve(args, {"tol": 1e-4, "floor": 1e-8, "epsilon": 1e-5})
    start = time.time()
    results = run_suite(cfg["seed"], cfg["tol"], cfg["floor"], cfg["epsilon"])
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{'all passed' if ok else 'FAILED'} in {time.time() - start:.2f}s")
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        report = out / "gradcheck.json"
        report.write_text(json.dumps({r.name: {"passed": r.passed, "max_rel_error": r.report.max_rel_error,
                                               "coords": len(r.report.checks)} for r in results},
                                     indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(out, "grad-check", cfg, {}, {"report": report}, start)
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def _ratios(text: str):
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated ratios, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated ratios, got {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="beat", description="Behavior tokenization: train, align and export tokens.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    S = argparse.SUPPRESS

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=S)
        p.add_argument("--seed", type=int, help="run seed (falls back to BEAT_SEED, then 0)")
        p.add_argument("--config", default=None, help="JSON file of settings; explicit flags win")
        p.set_defaults(func=func)
        return p

    p = command("gen-data", cmd_gen_data, "write a synthetic corpus with planted structure")
    p.add_argument("--out", required=True)
    for flag, typ in (("--groups", int), ("--micro-pool", int), ("--users", int), ("--items", int),
                      ("--factors", int), ("--noise", float), ("--embed-noise", float), ("--text-dim", int),
                      ("--review-rate", float), ("--cold-fraction", float)):
        p.add_argument(flag, type=typ)
    p.add_argument("--split", type=_ratios, help="train,val,test ratios")

    p = command("train-tokenizer", cmd_train_tokenizer, "stage 1: learn macro/micro behavior tokens")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--stop-after", type=int, help="run at most this many epochs now")
    for flag, typ in (("--alpha", float), ("--beta", float), ("--eta", float), ("--lr", float),
                      ("--batch-size", int), ("--max-epochs", int), ("--patience", int), ("--k", int),
                      ("--negatives", int), ("--slot-dim", int), ("--codeword-dim", int), ("--micro-count", int),
                      ("--layers", int), ("--k-macro", int), ("--k-micro", int), ("--max-len", int)):
        p.add_argument(flag, type=typ)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--no-reset", dest="dead_code_reset", action="store_false")
    p.add_argument("--item-micro", action="store_true")
    p.add_argument("--split", type=_ratios)

    p = command("train-projector", cmd_train_projector, "stage 2: align tokens with a frozen backbone")
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--word-embeddings", help="JSON-lines word vectors instead of the mock provider")
    for flag, typ in (("--gamma", float), ("--lr", float), ("--weight-decay", float), ("--batch-size", int),
                      ("--steps", int), ("--max-pairs", int), ("--word-dim", int), ("--hidden", int),
                      ("--head-scale", float), ("--template", str)):
        p.add_argument(flag, type=typ)
    p.add_argument("--candidates", choices=("pair", "codebook"))

    p = command("tokenize", cmd_tokenize, "export behavior tokens for downstream prompts")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--projector")
    p.add_argument("--out", required=True)
    p.add_argument("--entities", help="file or comma list of kind:id")
    p.add_argument("--template")

    p = command("eval", cmd_eval, "score a tokenizer checkpoint")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--truth")
    p.add_argument("--split", choices=dt.SPLITS)
    p.add_argument("--k", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--scorer", choices=("model", "oracle", "random"))
    p.add_argument("--out")

    p = command("grad-check", cmd_grad_check, "finite-difference check of every loss")
    p.add_argument("--tol", type=float)
    p.add_argument("--floor", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    del args.verbose
    try:
        return args.func(args)
    except (UsageError, te.FormatError, FileNotFoundError, CheckpointError, KeyError, ValueError) as exc:
        print(f"beat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Commands: train, score, evaluate, search-scales, gradcheck, make-folds.
Exit codes: 0 success, 1 gradient check failure, 2 bad configuration or
input, 3 training aborted.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, load_config
from .corpus import (ASAP_PROMPTS, CRP_SPEC, Essay, IngestionError, PromptSpec, compute_np, denormalize_score,
                     load_asap_tsv, load_crp_csv, load_prompt_specs, make_folds, out_of_domain_pool)
from .encoder import EncoderConfig
from .gradcheck import run_all
from .metrics import evaluate_prompt
from .multiscale import MultiScaleConfig, MultiScaleModel
from .tokenizer import Vocabulary, train_vocab, wordpiece_tokenize
from .trainer import (FitResult, ModelFactory, TrainingAborted, encode_set, fit, greedy_scale_search,
                      parse_scales, predict_normalized, transfer_pipeline)

logger = logging.getLogger("msaes")

EXIT_OK, EXIT_GRADCHECK, EXIT_INPUT, EXIT_ABORT = 0, 1, 2, 3


@dataclass
class Prepared:
    cfg: RunConfig
    essays: list[Essay]  # every loaded essay, all prompts
    target: list[Essay]
    specs: dict[int, PromptSpec]
    vocab: Vocabulary
    enc_cfg: EncoderConfig
    ms_cfg: MultiScaleConfig

    @property
    def spec(self) -> PromptSpec:
        return self.specs[self.cfg.prompt]

    def factory(self, ms_cfg: MultiScaleConfig | None = None) -> ModelFactory:
        return ModelFactory(self.enc_cfg, ms_cfg or self.ms_cfg, self.cfg.seed, self.cfg.training.freeze)


def _existing(path: Path | None, what: str) -> Path:
    if path is None or not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def prepare(cfg: RunConfig) -> Prepared:
    if cfg.dataset == "crp":
        specs = {CRP_SPEC.prompt_id: CRP_SPEC}
        essays = load_crp_csv(_existing(cfg.resolve(cfg.data_path), "dataset file"))
    else:
        specs = dict(ASAP_PROMPTS) if cfg.prompt_specs_path is None else \
            load_prompt_specs(_existing(cfg.resolve(cfg.prompt_specs_path), "prompt spec file"))
        essays = load_asap_tsv(_existing(cfg.resolve(cfg.data_path), "dataset file"), specs)
    target = [e for e in essays if e.prompt_id == cfg.prompt]
    if not target:
        raise ConfigError(f"no essays for prompt {cfg.prompt} in {cfg.data_path}")
    if cfg.vocab_path:
        vocab = Vocabulary.load(_existing(cfg.resolve(cfg.vocab_path), "vocabulary file"))
    else:
        vocab = train_vocab((e.text for e in essays), cfg.vocab_size)
    n_p = cfg.model.n_p or compute_np([len(wordpiece_tokenize(e.text, vocab)) for e in target])
    m = cfg.model
    try:
        ms_cfg = MultiScaleConfig(m.scales, n_p, m.doc_len, m.use_doc, m.use_token)
        enc_cfg = EncoderConfig(len(vocab), dropout_rate=cfg.training.dropout, **asdict(cfg.encoder))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return Prepared(cfg, essays, target, specs, vocab, enc_cfg, ms_cfg)


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _meta(p: Prepared, ms_cfg: MultiScaleConfig, **extra) -> dict:
    snapshot = p.cfg.to_dict()
    del snapshot["out_dir"]  # where a run was written is not part of its identity
    return {"config": snapshot, "encoder": p.enc_cfg.to_dict(), "model": ms_cfg.to_dict(),
            "prompt_spec": asdict(p.spec), "vocab": p.vocab.tokens, **extra}


def fold_report(p: Prepared, result: FitResult) -> dict:
    rows = []
    for f in result.folds:
        rows.append({"prompt": p.cfg.prompt, "fold": f.fold_index, "epoch_best": f.best_epoch,
                     "dev_qwk": f.dev_best if p.spec.discrete else None,
                     "dev_rmse": None if p.spec.discrete else -f.dev_best,
                     "test_qwk": f.test_metrics.get("qwk"), "test_rmse": f.test_metrics.get("rmse"),
                     "per_scale_scores_sample": f.per_scale_sample})
    return {"config_hash": p.cfg.config_hash(), "prompt": p.cfg.prompt, "folds": rows,
            "mean_test_qwk": result.mean_test_qwk, "mean_test_rmse": result.mean_test_rmse}


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, args) -> int:
    p = prepare(cfg)
    data = encode_set(p.target, p.vocab, p.ms_cfg, p.specs)
    folds = make_folds(p.target, cfg.seed)
    out = Path(cfg.out_dir)
    if cfg.transfer:
        pool = out_of_domain_pool(p.essays, cfg.prompt, p.specs)
        pool_set = encode_set([e for e, _ in pool], p.vocab, p.ms_cfg, p.specs, labels=[y for _, y in pool])
        tr = transfer_pipeline(p.factory(), pool_set, data, folds, p.spec, cfg.training, p.vocab.pad_id, args.jobs)
        result = tr.fit
        ckpt_io.save(out / "pretrained.msas", Checkpoint(tr.pretrained_state, cfg.config_hash(),
                                                         _meta(p, p.ms_cfg, pretrain_losses=tr.pretrain_losses)))
    else:
        result = fit(p.factory(), data, folds, p.spec, cfg.training, p.vocab.pad_id, args.jobs)
    report = fold_report(p, result)
    out.mkdir(parents=True, exist_ok=True)
    for f, row in zip(result.folds, report["folds"]):
        metrics = {k: row[k] for k in ("dev_qwk", "dev_rmse", "test_qwk", "test_rmse")}
        ckpt_io.save(out / f"fold{f.fold_index}.msas",
                     Checkpoint(f.state, cfg.config_hash(), _meta(p, p.ms_cfg, metrics=metrics, epoch=f.best_epoch)))
    _dump_json(report, out / "report.json")
    print(f"prompt {cfg.prompt}: mean test QWK {report['mean_test_qwk']}, mean test RMSE "
          f"{report['mean_test_rmse']:.4f} over {len(result.folds)} folds -> {out}")
    return EXIT_OK


def load_model(path: str, expected_hash: str | None) -> tuple[MultiScaleModel, Vocabulary, PromptSpec, Checkpoint]:
    ck = ckpt_io.load(_existing(Path(path), "checkpoint"), expected_hash)
    meta = ck.meta
    try:
        enc_cfg = EncoderConfig(**meta["encoder"])
        ms = dict(meta["model"])
        ms_cfg = MultiScaleConfig(**{**ms, "scales": tuple(ms["scales"])})
        model = MultiScaleModel(enc_cfg, ms_cfg)
        model.load_state(ck.tensors)
        return model, Vocabulary(meta["vocab"]), PromptSpec(**meta["prompt_spec"]), ck
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not match its model description ({exc})") from None


def _load_inputs(path: str, spec: PromptSpec, require_score: bool) -> list[Essay]:
    src = _existing(Path(path), "input file")
    if not spec.discrete:
        return load_crp_csv(src, spec)
    return load_asap_tsv(src, {spec.prompt_id: spec}, prompts=[spec.prompt_id], require_score=require_score)


def _expected_hash(cfg: RunConfig, args) -> str | None:
    return cfg.config_hash() if args.config else None


def cmd_score(cfg: RunConfig, args) -> int:
    model, vocab, spec, _ = load_model(args.checkpoint, _expected_hash(cfg, args))
    essays = _load_inputs(args.input, spec, require_score=False)
    scales = list(model.ms_cfg.scales)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["essay_id", "y_total_normalized", "denormalized_score", "y_doc_tok"] + [f"y_{k}" for k in scales])
        if essays:
            data = encode_set(essays, vocab, model.ms_cfg, spec, labels=np.zeros(len(essays)))
            for eid, sb in zip(data.ids, model.predict(data.batch, vocab.pad_id)):
                w.writerow([eid, repr(sb.y_total), f"{denormalize_score(sb.y_total, spec):g}", repr(sb.y_doc_tok)]
                           + [repr(sb.per_scale[k]) for k in scales])
    print(f"scored {len(essays)} essays -> {out}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    model, vocab, spec, ck = load_model(args.checkpoint, _expected_hash(cfg, args))
    essays = _load_inputs(args.input, spec, require_score=True)
    if not essays:
        raise ConfigError(f"{args.input}: no essays to evaluate")
    data = encode_set(essays, vocab, model.ms_cfg, spec)
    metrics = evaluate_prompt(predict_normalized(model, data, vocab.pad_id), data.raw, spec)
    report = {"config_hash": ck.config_hash, "prompt": spec.prompt_id, "n": len(essays), **metrics}
    if args.out:
        _dump_json(report, Path(args.out))
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_search_scales(cfg: RunConfig, args) -> int:
    p = prepare(cfg)
    scales = parse_scales(args.scales or cfg.search_scales)
    too_long = [k for k in scales if k > p.ms_cfg.n_p]
    if too_long:
        raise ConfigError(f"scales {too_long} exceed the token budget n_p={p.ms_cfg.n_p}")
    folds = make_folds(p.target, cfg.seed)
    cache: dict[tuple[int, ...], float] = {}

    def evaluator(combo: tuple[int, ...]) -> float:
        if combo not in cache:
            ms = replace(p.ms_cfg, scales=combo)
            data = encode_set(p.target, p.vocab, ms, p.specs)
            result = fit(p.factory(ms), data, folds, p.spec, cfg.training, p.vocab.pad_id, args.jobs)
            cache[combo] = float(np.mean([f.dev_best for f in result.folds]))
            logger.info("scales %s: dev %.4f", combo, cache[combo])
        return cache[combo]

    state = greedy_scale_search(scales, evaluator)
    out = Path(cfg.out_dir)
    _dump_json({"config_hash": cfg.config_hash(), "prompt": cfg.prompt, **state.to_dict()}, out / "scale_search.json")
    print(f"selected: doc, tok, {', '.join(map(str, state.selected)) or '(no segment scales)'} -> {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    failed = []
    for suite in run_all(cfg.seed):
        name, err = suite.worst
        status = "ok" if suite.ok else "FAIL"
        print(f"{suite.name:8s} {status:4s} worst relative error {err:.2e} ({name}), tolerance {suite.tolerance:g}")
        failed += [f"{suite.name}:{op}" for op in suite.failures]
    if failed:
        print("gradient check failed for: " + ", ".join(failed), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_make_folds(cfg: RunConfig, args) -> int:
    p = prepare(cfg)
    folds = [{"fold": f.fold_index, "train": list(f.train_ids), "dev": list(f.dev_ids), "test": list(f.test_ids)}
             for f in make_folds(p.target, cfg.seed)]
    path = Path(cfg.out_dir) / f"folds_prompt{cfg.prompt}.json"
    _dump_json({"config_hash": cfg.config_hash(), "prompt": cfg.prompt, "seed": cfg.seed, "folds": folds}, path)
    print(f"wrote {len(folds)} folds -> {path}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "score": cmd_score, "evaluate": cmd_evaluate,
            "search-scales": cmd_search_scales, "gradcheck": cmd_gradcheck, "make-folds": cmd_make_folds}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--prompt", type=int, help="target prompt id")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1, help="worker processes for folds")
    common.add_argument("--out", help="output directory (file for score/evaluate)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="msaes", description="Multi-scale essay scoring.")
    sub = parser.add_subparsers(dest="command", required=True)
    train = sub.add_parser("train", parents=[common], help="cross-validated training")
    train.add_argument("--transfer", action="store_true", help="pretrain on the other prompts first")
    for name in ("score", "evaluate"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("checkpoint")
        sp.add_argument("input")
    search = sub.add_parser("search-scales", parents=[common], help="greedy segment-scale search")
    search.add_argument("--scales", help="A:B:STEP (default 10:190:20)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    sub.add_parser("make-folds", parents=[common], help="write the five fold splits")
    return parser


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    over = {}
    if args.prompt is not None:
        over["prompt"] = args.prompt
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "transfer", False):
        over["transfer"] = True
    if args.out is not None and args.command not in ("score", "evaluate"):
        over["out_dir"] = args.out
    return replace(cfg, **over) if over else cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "score" and not args.out:
            raise ConfigError("score needs --out PATH")
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = _apply_flags(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except FloatingPointError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, CheckpointError, IngestionError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``neuron-alloc <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from neuron_alloc import analysis, persist
from neuron_alloc.allocation import allocate
from neuron_alloc.config import RunConfig
from neuron_alloc.data import (
    Vocabulary,
    build_vocab_from_dir,
    discover_pairs,
    load_corpora,
    parse_pair,
    read_lines,
    write_synthetic,
)
from neuron_alloc.errors import DataError, NeuronAllocError, UsageError
from neuron_alloc.masks import Mask, MaskSet, build_mask_set
from neuron_alloc.model import build_model, translate_beam
from neuron_alloc.pipeline import compute_importance, evaluate, finetune, pretrain, split

SEED_ENV = "NEURON_ALLOC_SEED"
log = logging.getLogger("neuron_alloc")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration resolution ---------------------------------------------------

def _resolve_config(args, base: dict | None = None) -> RunConfig:
    """Checkpoint settings < config file < environment seed < explicit flags."""
    cfg = RunConfig.from_dict(base or {})
    if getattr(args, "config", None):
        cfg = cfg.updated(persist.read_config(args.config))
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        cfg = cfg.updated({"seed": env_seed})
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got '{item}'")
        overrides[key.strip()] = value
    for key in RunConfig.keys():
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return cfg.updated(overrides)


def _vocab_of(ckpt: persist.Checkpoint) -> Vocabulary:
    if ckpt.vocab is None:
        raise DataError("checkpoint carries no vocabulary")
    return Vocabulary(ckpt.vocab)


def _data_dir(args, ckpt: persist.Checkpoint) -> Path:
    data = getattr(args, "data", None) or ckpt.meta.get("data")
    if not data:
        raise UsageError("no corpus directory: pass --data")
    return Path(data)


def _corpora(data: Path, ckpt: persist.Checkpoint):
    pairs = list(ckpt.config.language_pairs)
    return load_corpora(data, pairs, _vocab_of(ckpt))


def _load_plan_for(args, ckpt: persist.Checkpoint):
    if not getattr(args, "plan", None):
        if ckpt.meta.get("plan"):
            raise UsageError("checkpoint was fine-tuned with masks; pass the matching --plan")
        return None, None
    plan = persist.load_plan(args.plan)
    expected = ckpt.meta.get("plan")
    if expected is not None and expected != plan.fingerprint():
        raise DataError(f"plan fingerprint {plan.fingerprint()} does not match checkpoint (expects {expected})")
    return plan, build_mask_set(plan, ckpt.config)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    pairs = write_synthetic(cfg.synthetic_spec(), args.out)
    _emit({"data": str(args.out), "pairs": pairs})
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    data = Path(args.data)
    pairs = discover_pairs(data)
    if not pairs:
        raise DataError(f"no parallel corpora found under {data}")
    vocab = build_vocab_from_dir(data, pairs)
    corpora = load_corpora(data, pairs, vocab)
    model = build_model(cfg.model_config(len(vocab), pairs), cfg.seed)
    result = pretrain(model, split(corpora, "train"), cfg.pretrain_schedule(), dev=split(corpora, "dev") or None)
    meta = {"stage": "pretrain", "data": str(data.resolve()), "run_config": cfg.to_dict(),
            "best_step": result.best_step, "best_dev_loss": result.best_dev_loss}
    persist.save_checkpoint(args.out, persist.Checkpoint.from_model(model, cfg.seed, result.steps, vocab.tokens, meta))
    _emit({"checkpoint": str(args.out), "steps": result.steps, "best_step": result.best_step,
           "best_dev_loss": result.best_dev_loss, "fingerprint": persist.model_fingerprint(model)})
    return 0


def cmd_importance(args) -> int:
    ckpt = persist.load_checkpoint(args.ckpt)
    cfg = _resolve_config(args, ckpt.meta.get("run_config"))
    model = ckpt.to_model()
    corpora = _corpora(_data_dir(args, ckpt), ckpt)
    table = compute_importance(model, split(corpora, "train"), cfg.criterion, cfg.cap, cfg.batch_tokens)
    persist.save_table(args.out, table)
    _emit({"table": str(args.out), "criterion": table.criterion, "fingerprint": table.fingerprint(),
           "tokens": {p: int(c) for p, c in zip(table.pairs, table.counts)}})
    return 0


def cmd_allocate(args) -> int:
    table = persist.load_table(args.table)
    cfg = _resolve_config(args)
    plan = allocate(table, cfg.allocation())
    persist.save_plan(args.out, plan)
    if args.masks:
        masks = {p: Mask.from_vector(plan.registry, (plan.is_general() | plan.assigned(p)).astype("uint8"))
                 for p in plan.pairs}
        persist.save_masks(args.masks, plan.registry, MaskSet(masks, plan.fingerprint()))
    _emit({"plan": str(args.out), "general": plan.num_general, "specific": plan.num_specific,
           "fingerprint": plan.fingerprint()})
    return 0


def cmd_finetune(args) -> int:
    ckpt = persist.load_checkpoint(args.ckpt)
    plan = persist.load_plan(args.plan)
    fp = ckpt.fingerprint()
    bound = plan.provenance.get("checkpoint")
    if bound is not None and bound != fp:
        raise DataError(f"plan was computed from checkpoint {bound}, not {fp}")
    cfg = _resolve_config(args, ckpt.meta.get("run_config"))
    model = ckpt.to_model()
    corpora = _corpora(_data_dir(args, ckpt), ckpt)
    result = finetune(model, plan, split(corpora, "train"), cfg.finetune_schedule(),
                      dev=split(corpora, "dev") or None, debug=cfg.debug)
    meta = dict(ckpt.meta, stage="finetune", plan=plan.fingerprint(), base=fp, run_config=cfg.to_dict(),
                best_step=result.best_step, best_dev_loss=result.best_dev_loss)
    persist.save_checkpoint(args.out, persist.Checkpoint(model.config, model.state_dict(), ckpt.seed,
                                                         ckpt.step + result.steps, ckpt.vocab, meta))
    _emit({"checkpoint": str(args.out), "steps": result.steps, "best_step": result.best_step,
           "best_dev_loss": result.best_dev_loss, "fingerprint": persist.model_fingerprint(model)})
    return 0


def cmd_translate(args) -> int:
    ckpt = persist.load_checkpoint(args.ckpt)
    cfg = _resolve_config(args, ckpt.meta.get("run_config"))
    model = ckpt.to_model()
    vocab = _vocab_of(ckpt)
    if args.pair not in ckpt.config.language_pairs:
        raise DataError(f"pair '{args.pair}' is not served by this checkpoint")
    _, mask_set = _load_plan_for(args, ckpt)
    lang = vocab.lang_id(parse_pair(args.pair)[1])
    out_lines = []
    for tokens in read_lines(Path(args.input)):
        src = [lang] + vocab.encode(tokens)
        ids = translate_beam(model, src, args.pair, mask_set, cfg.beam, cfg.alpha)
        out_lines.append(" ".join(vocab.decode(ids)) + "\n")
    persist.atomic_write(args.output, "".join(out_lines).encode())
    return 0


def _scores(model, ckpt, args, cfg, mask_set):
    corpora = _corpora(_data_dir(args, ckpt), ckpt)
    test = split(corpora, "test")
    if not test:
        raise DataError("corpus directory has no test split")
    return evaluate(model, test, mask_set, _vocab_of(ckpt), limit=cfg.eval_limit or None)


def cmd_analyze(args) -> int:
    plan = persist.load_plan(args.plan)
    report = analysis.structure_report(plan)
    if args.table:
        table = persist.load_table(args.table)
        if table.fingerprint() != plan.provenance.get("table", table.fingerprint()):
            raise DataError("plan was not allocated from this importance table")
        if args.distributions:
            out = Path(args.distributions)
            for g in table.registry.groups:
                series = analysis.export_importance_distribution(table, *g.key)
                name = f"{g.side}-{g.layer}-{g.site}.tsv"
                persist.atomic_write(out / name, analysis.distribution_tsv(series).encode())
    if args.ckpt:
        ckpt = persist.load_checkpoint(args.ckpt)
        cfg = _resolve_config(args, ckpt.meta.get("run_config"))
        _, mask_set = _load_plan_for(args, ckpt)
        scores = _scores(ckpt.to_model(), ckpt, args, cfg, mask_set)
        report.bleu = {p: s["bleu"] for p, s in scores.items()}
        report.accuracy = {p: s["accuracy"] for p, s in scores.items()}
    persist.save_json(args.report, report.to_dict())
    _emit({"report": str(args.report), "general": plan.num_general, "specific": plan.num_specific})
    return 0


def cmd_erase(args) -> int:
    plan = persist.load_plan(args.plan)
    ckpt = persist.load_checkpoint(args.ckpt)
    cfg = _resolve_config(args, ckpt.meta.get("run_config"))
    _, mask_set = _load_plan_for(args, ckpt)
    model = ckpt.to_model()
    erased = analysis.erase_random(mask_set, plan, args.target, args.fraction, cfg.seed)
    if args.masks:
        persist.save_masks(args.masks, plan.registry, erased)
    before = _scores(model, ckpt, args, cfg, mask_set)
    after = _scores(model, ckpt, args, cfg, erased)
    delta = {p: {m: after[p][m] - before[p][m] for m in before[p]} for p in before}
    result = {"target": args.target, "fraction": args.fraction, "seed": cfg.seed,
              "before": before, "after": after, "delta": delta}
    if args.report:
        persist.save_json(args.report, result)
    _emit(result)
    return 0


def cmd_run(args) -> int:
    """Every stage in sequence inside one work directory."""
    work = Path(args.workdir)
    cfg = _resolve_config(args)
    data = Path(args.data) if args.data else work / "data"
    if not args.data:
        write_synthetic(cfg.synthetic_spec(), data)
    common = ["--config", args.config] if args.config else []
    common += [f"--set=seed={cfg.seed}"]
    steps = [
        ["pretrain", "--data", str(data), "--out", str(work / "pretrained.ckpt")],
        ["importance", "--ckpt", str(work / "pretrained.ckpt"), "--out", str(work / "importance.table")],
        ["allocate", "--table", str(work / "importance.table"), "--out", str(work / "plan.txt"),
         "--masks", str(work / "masks.txt")],
        ["finetune", "--ckpt", str(work / "pretrained.ckpt"), "--plan", str(work / "plan.txt"),
         "--out", str(work / "finetuned.ckpt")],
        ["analyze", "--plan", str(work / "plan.txt"), "--table", str(work / "importance.table"),
         "--ckpt", str(work / "finetuned.ckpt"), "--report", str(work / "report.json"),
         "--distributions", str(work / "distributions")],
    ]
    for argv in steps:
        overrides = [f"--set={k}={v}" for k, v in _explicit_overrides(args).items()]
        code = main(argv[:1] + common + overrides + argv[1:])
        if code:
            return code
    return 0


def _explicit_overrides(args) -> dict:
    return {k: getattr(args, k) for k in RunConfig.keys() if getattr(args, k, None) is not None}


# -- parser -------------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser, *keys: str) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    kinds = {"rho": float, "k": float, "alpha": float, "fraction": float}
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kinds.get(key, int if key in (
            "seed", "cap", "beam", "steps", "finetune_steps") else str))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neuron-alloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic multilingual corpus")
    p.add_argument("--out", required=True)
    _config_flags(p, "seed", "scenario")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="joint training on all pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _config_flags(p, "seed", "steps")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("importance", help="per-pair neuron importance of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    _config_flags(p, "criterion", "cap")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("allocate", help="split neurons into general and pair-specific")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--masks", help="also write the per-pair mask set")
    _config_flags(p, "rho", "k", "variant")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("finetune", help="masked fine-tuning from a pretrained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    _config_flags(p, "finetune_steps", "seed")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("translate", help="translate a file of sentences")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--plan")
    p.add_argument("--pair", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    _config_flags(p, "beam", "alpha")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("analyze", help="LScore/MScore report, importance distributions, test scores")
    p.add_argument("--plan", required=True)
    p.add_argument("--table")
    p.add_argument("--ckpt", help="also score the test split with this checkpoint")
    p.add_argument("--data")
    p.add_argument("--report", required=True)
    p.add_argument("--distributions", help="directory for per-site importance TSV files")
    _config_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("erase", help="randomly erase neurons and re-evaluate")
    p.add_argument("--plan", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--target", required=True, help="general or specific:<pair>")
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--masks", help="write the erased mask set")
    p.add_argument("--report")
    _config_flags(p, "seed")
    p.set_defaults(func=cmd_erase)

    p = sub.add_parser("run", help="synthesize (unless --data), pretrain, allocate, fine-tune and analyze")
    p.add_argument("--workdir", required=True)
    p.add_argument("--data")
    _config_flags(p, "seed", "steps", "finetune_steps", "criterion", "rho", "k", "variant")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        return args.func(args)
    except NeuronAllocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

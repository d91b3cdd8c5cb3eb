"""Training stages: joint pretraining, importance + allocation, masked fine-tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from neuron_alloc.allocation import AllocationConfig, AllocationPlan, allocate
from neuron_alloc.analysis import bleu, exact_match_accuracy
from neuron_alloc.data import Corpus, Vocabulary
from neuron_alloc.errors import ConfigError, DataError, NumericError, UsageError
from neuron_alloc.importance import ImportanceTable, accumulate_batch, finalize, new_table
from neuron_alloc.masks import Mask, MaskSet, build_mask_set
from neuron_alloc.model import (
    Batch,
    TransformerModel,
    forward_train,
    greedy_decode_batch,
    make_batch,
    update_masks_for,
)
from neuron_alloc.persist import model_fingerprint
from neuron_alloc.tensor import adam_step, backward, no_grad, zero_grad

log = logging.getLogger("neuron_alloc")

STAGES = ("pretrain", "finetune")


@dataclass(frozen=True)
class TrainSchedule:
    stage: str = "pretrain"
    total_steps: int = 2000
    warmup_steps: int = 200
    peak_lr: float = 2e-3
    batch_tokens: int = 600
    seed: int = 0
    eval_every: int = 0  # 0: only at the end
    patience: int = 0  # evaluations without dev improvement before stopping; 0 disables
    keep_best: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError("stage", f"must be one of {STAGES}, got '{self.stage}'")
        if self.total_steps < 0:
            raise ConfigError("total_steps", f"must be >= 0, got {self.total_steps}")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps", f"must be >= 1, got {self.warmup_steps}")
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr", f"must be positive, got {self.peak_lr}")
        if self.batch_tokens < 1:
            raise ConfigError("batch_tokens", f"must be positive, got {self.batch_tokens}")
        if self.eval_every < 0 or self.patience < 0:
            raise ConfigError("eval_every", "eval_every and patience must be >= 0")

    def lr(self, step: int) -> float:
        """Inverse square-root decay after linear warmup; ``step`` counts from 1."""
        return self.peak_lr * min(step / self.warmup_steps, math.sqrt(self.warmup_steps / step))


# -- batching -----------------------------------------------------------------

def _sentence_cost(src: Sequence[int], tgt: Sequence[int]) -> int:
    return max(len(src), len(tgt)) + 1


def pack_batches(corpus: Corpus, order: Sequence[int], batch_tokens: int) -> list[Batch]:
    """Greedy token-budget packing: rows x longest row stays within budget."""
    batches = []
    current: list[int] = []
    longest = 0
    for i in order:
        cost = _sentence_cost(corpus.sources[i], corpus.targets[i])
        if current and (len(current) + 1) * max(longest, cost) > batch_tokens:
            batches.append(current)
            current, longest = [], 0
        current.append(i)
        longest = max(longest, cost)
    if current:
        batches.append(current)
    return [
        make_batch(corpus.pair, [corpus.sources[i] for i in b], [corpus.targets[i] for i in b]) for b in batches
    ]


class PairStream:
    """Endless reshuffled batches of one pair, reproducible per (seed, pair index)."""

    def __init__(self, corpus: Corpus, batch_tokens: int, seed: int, index: int):
        if len(corpus) == 0:
            raise DataError(f"training corpus for '{corpus.pair}' is empty")
        self.corpus = corpus
        self.batch_tokens = batch_tokens
        self.rng = np.random.default_rng([seed, index])
        self.epoch = 0
        self._queue: list[Batch] = []

    def next(self) -> Batch:
        if not self._queue:
            order = self.rng.permutation(len(self.corpus))
            self._queue = pack_batches(self.corpus, order, self.batch_tokens)[::-1]
            self.epoch += 1
        return self._queue.pop()


def round_robin(pairs: Sequence[str], streams: Mapping[str, PairStream]) -> Iterator[Batch]:
    """One batch per pair per cycle, pairs in the given order."""
    while True:
        for pair in pairs:
            yield streams[pair].next()


def eval_batches(corpora: Mapping[str, Corpus], batch_tokens: int) -> list[Batch]:
    out = []
    for pair in sorted(corpora):
        c = corpora[pair]
        out.extend(pack_batches(c, range(len(c)), batch_tokens))
    return out


def dev_loss(model: TransformerModel, batches: Sequence[Batch], mask_set: MaskSet | None = None) -> float:
    """Token-weighted mean cross-entropy."""
    total = 0.0
    tokens = 0
    with no_grad():
        for b in batches:
            mask = None if mask_set is None else mask_set[b.pair]
            n = b.num_target_tokens
            total += float(forward_train(model, b, mask).item()) * n
            tokens += n
    return total / tokens


# -- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    model: TransformerModel
    steps: int
    history: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_dev_loss: float | None = None


def _check_corpora(model: TransformerModel, corpora: Mapping[str, Corpus]) -> list[str]:
    pairs = list(model.config.language_pairs) or sorted(corpora)
    missing = [p for p in pairs if p not in corpora]
    if missing:
        raise DataError(f"no training corpus for configured pair(s): {', '.join(missing)}")
    return pairs


def _train(model: TransformerModel, corpora: Mapping[str, Corpus], schedule: TrainSchedule,
           mask_set: MaskSet | None, dev: Mapping[str, Corpus] | None, debug: bool,
           on_step: Callable[[int, TransformerModel], None] | None) -> TrainResult:
    pairs = _check_corpora(model, corpora)
    for pair in pairs:
        corpora[pair].validate(model.config.vocab_size)
    streams = {p: PairStream(corpora[p], schedule.batch_tokens, schedule.seed, i) for i, p in enumerate(pairs)}
    batches = round_robin(pairs, streams)
    dev_set = eval_batches(dev, schedule.batch_tokens) if dev else None
    dropout_rng = np.random.default_rng([schedule.seed, 7919])
    update_masks = {p: update_masks_for(model, mask_set[p]) for p in pairs} if mask_set is not None else None
    for p in model.parameters():
        p.reset_state()

    result = TrainResult(model, 0)
    best_state = model.state_dict() if dev_set is not None and schedule.keep_best else None
    if dev_set is not None:
        result.best_dev_loss = dev_loss(model, dev_set, mask_set)
        result.history.append({"step": 0, "dev_loss": result.best_dev_loss})
    stale = 0
    params = model.parameters()
    for step in range(1, schedule.total_steps + 1):
        batch = next(batches)
        mask = None if mask_set is None else mask_set[batch.pair]
        zero_grad(params)
        loss = forward_train(model, batch, mask, rng=dropout_rng)
        backward(loss)
        allowed = None if update_masks is None else update_masks[batch.pair]
        if debug and allowed:
            _assert_isolated(model, allowed, batch.pair)
        adam_step(params, schedule.lr(step), step_count=step, update_masks=allowed)
        result.steps = step
        if on_step is not None:
            on_step(step, model)
        at_eval = dev_set is not None and (
            step == schedule.total_steps or (schedule.eval_every and step % schedule.eval_every == 0)
        )
        if not at_eval:
            continue
        value = dev_loss(model, dev_set, mask_set)
        result.history.append({"step": step, "train_loss": float(loss.item()), "dev_loss": value})
        log.info("%s step %d: train %.4f dev %.4f", schedule.stage, step, loss.item(), value)
        if value < result.best_dev_loss:
            result.best_dev_loss, result.best_step, stale = value, step, 0
            if best_state is not None:
                best_state = model.state_dict()
        else:
            stale += 1
            if schedule.patience and stale >= schedule.patience:
                log.info("%s: no dev improvement for %d evaluations, stopping at step %d",
                         schedule.stage, stale, step)
                break
    zero_grad(params)
    if best_state is not None:
        model.load_state_dict(best_state)
    elif dev_set is None:
        result.best_step = result.steps
    return result


def _assert_isolated(model: TransformerModel, allowed: dict[str, np.ndarray], pair: str) -> None:
    for name, ok in allowed.items():
        g = model.params[name].grad
        if g is not None and np.any(g[~ok] != 0):
            raise NumericError(f"masked-unit gradient leak in {name} for pair '{pair}'")


def pretrain(model: TransformerModel, corpora: Mapping[str, Corpus], schedule: TrainSchedule,
             dev: Mapping[str, Corpus] | None = None,
             on_step: Callable[[int, TransformerModel], None] | None = None) -> TrainResult:
    """Joint unmasked training on all pairs; the model is updated in place."""
    if schedule.stage != "pretrain":
        raise UsageError("pretrain needs a schedule with stage 'pretrain'")
    return _train(model, corpora, schedule, None, dev, False, on_step)


def finetune(model: TransformerModel, plan: AllocationPlan | None, corpora: Mapping[str, Corpus],
             schedule: TrainSchedule, dev: Mapping[str, Corpus] | None = None, debug: bool = False,
             on_step: Callable[[int, TransformerModel], None] | None = None) -> TrainResult:
    """Continue training with each batch restricted to its pair's mask.

    ``plan=None`` gives unmasked continued training (the baseline). Optimizer
    moments start fresh. In ``debug`` mode every step asserts that gradients
    of parameters serving only inactive units are exactly zero.
    """
    if schedule.stage != "finetune":
        raise UsageError("finetune needs a schedule with stage 'finetune'")
    mask_set = None
    if plan is not None:
        if plan.registry != model.registry:
            raise DataError("allocation plan does not match the model's neuron layout")
        cfg = plan.provenance.get("config")
        if cfg is not None and cfg != model.config.fingerprint():
            raise DataError("allocation plan was computed for a different model configuration")
        missing = [p for p in _check_corpora(model, corpora) if p not in plan.pairs]
        if missing:
            raise DataError(f"plan has no allocation for pair(s): {', '.join(missing)}")
        mask_set = build_mask_set(plan, model.config)
    return _train(model, corpora, schedule, mask_set, dev, debug, on_step)


# -- importance and allocation ------------------------------------------------

def capped_batches(corpus: Corpus, cap_tokens: int, batch_tokens: int) -> list[Batch]:
    """Leading sentences of the corpus up to ``cap_tokens`` target tokens (EOS included)."""
    if cap_tokens < 1:
        raise UsageError(f"token cap must be positive, got {cap_tokens}")
    chosen = []
    used = 0
    for i, t in enumerate(corpus.targets):
        cost = len(t) + 1
        if chosen and used + cost > cap_tokens:
            break
        chosen.append(i)
        used += cost
    return pack_batches(corpus, chosen, batch_tokens)


def compute_importance(model: TransformerModel, corpora: Mapping[str, Corpus], criterion: str,
                       cap_tokens: int = 10000, batch_tokens: int = 600) -> ImportanceTable:
    pairs = _check_corpora(model, corpora)
    table = new_table(model, criterion, pairs)
    for pair in pairs:
        for batch in capped_batches(corpora[pair], cap_tokens, batch_tokens):
            accumulate_batch(model, batch, pair, criterion, table)
    table.provenance = {
        "config": model.config.fingerprint(),
        "checkpoint": model_fingerprint(model),
        "cap_tokens": cap_tokens,
    }
    return finalize(table)


def evaluate_and_allocate(model: TransformerModel, corpora: Mapping[str, Corpus], criterion: str,
                          alloc_config: AllocationConfig, cap_tokens: int = 10000,
                          batch_tokens: int = 600) -> tuple[ImportanceTable, AllocationPlan]:
    """Importance on the frozen checkpoint, then allocation. Parameters are not modified."""
    table = compute_importance(model, corpora, criterion, cap_tokens, batch_tokens)
    return table, allocate(table, alloc_config)


# -- evaluation ---------------------------------------------------------------

def translate_corpus(model: TransformerModel, corpus: Corpus, mask: Mask | None = None,
                     batch_size: int = 250, limit: int | None = None) -> list[list[int]]:
    n = len(corpus) if limit is None else min(limit, len(corpus))
    out: list[list[int]] = []
    for start in range(0, n, batch_size):
        out.extend(greedy_decode_batch(model, corpus.sources[start : min(start + batch_size, n)], mask))
    return out


def evaluate(model: TransformerModel, corpora: Mapping[str, Corpus], mask_set: MaskSet | None = None,
             vocab: Vocabulary | None = None, limit: int | None = None) -> dict[str, dict[str, float]]:
    """Per-pair exact-match accuracy (and BLEU when a vocabulary is given)."""
    out = {}
    for pair in sorted(corpora):
        corpus = corpora[pair]
        mask = None if mask_set is None else mask_set[pair]
        hyps = translate_corpus(model, corpus, mask, limit=limit)
        refs = corpus.targets[: len(hyps)]
        scores = {"accuracy": exact_match_accuracy(hyps, refs)}
        if vocab is not None:
            scores["bleu"] = bleu([vocab.decode(h) for h in hyps], [vocab.decode(r) for r in refs])
        out[pair] = scores
    return out


def split(corpora: Mapping[str, Mapping[str, Corpus]], name: str) -> dict[str, Corpus]:
    return {pair: splits[name] for pair, splits in corpora.items() if name in splits}

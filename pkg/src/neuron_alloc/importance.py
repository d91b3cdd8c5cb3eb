"""Per-pair neuron importance: Taylor-expansion and absolute-value criteria.

For a neuron with activation ``h`` and loss gradient ``g = dL/dh`` the
per-position contribution is ``|g * h|`` (``te``) or ``|h|`` (``av``).
Contributions are summed over every non-pad position of the batch and the
pair's score is that sum divided by the number of non-pad target tokens seen.

Each batch's sums are stored as a separate float64 partial; the running total
is formed with an exactly-rounded sum, so the result does not depend on the
order batches arrive in.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from neuron_alloc.errors import DataError, UsageError
from neuron_alloc.masks import NeuronSiteRegistry, SiteKey
from neuron_alloc.model import Batch, TransformerModel, forward_train
from neuron_alloc.tensor import Tensor, backward, no_grad

CRITERIA = ("te", "av")


def criterion_contribution(criterion: str, h: np.ndarray, grad: np.ndarray | None,
                           valid: np.ndarray | None = None) -> np.ndarray:
    """Sum of per-position scores over all leading axes, one value per unit."""
    h = np.asarray(h, dtype=np.float64)
    if criterion == "te":
        if grad is None:
            raise UsageError("the te criterion needs activation gradients")
        per = np.abs(np.asarray(grad, dtype=np.float64) * h)
    elif criterion == "av":
        per = np.abs(h)
    else:
        raise UsageError(f"unknown criterion '{criterion}'")
    per = per.reshape(-1, per.shape[-1])
    if valid is not None:
        per = per[np.asarray(valid, dtype=bool).reshape(-1)]
    return per.sum(axis=0)


def _exact_sum(parts: list[np.ndarray], width: int) -> np.ndarray:
    if not parts:
        return np.zeros(width)
    stacked = np.stack(parts)
    return np.array([math.fsum(stacked[:, j]) for j in range(width)])


@dataclass
class ImportanceTable:
    criterion: str
    pairs: tuple[str, ...]
    registry: NeuronSiteRegistry
    partials: list[list[np.ndarray]] = field(default_factory=list)
    counts: np.ndarray = field(default=None)
    finalized: bool = False
    scores: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise UsageError(f"unknown criterion '{self.criterion}'")
        self.pairs = tuple(self.pairs)
        if len(set(self.pairs)) != len(self.pairs) or not self.pairs:
            raise UsageError("importance table needs distinct, non-empty pair ids")
        if not self.partials:
            self.partials = [[] for _ in self.pairs]
        if self.counts is None:
            self.counts = np.zeros(len(self.pairs), dtype=np.int64)

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    def pair_index(self, pair: str) -> int:
        try:
            return self.pairs.index(pair)
        except ValueError:
            raise DataError(f"pair '{pair}' is not in the importance table") from None

    def add(self, pair: str, contribution: np.ndarray, tokens: int) -> None:
        if self.finalized:
            raise UsageError("importance table is finalized")
        contribution = np.asarray(contribution, dtype=np.float64)
        if contribution.shape != (len(self.registry),):
            raise DataError(f"contribution of shape {contribution.shape} for {len(self.registry)} neurons")
        m = self.pair_index(pair)
        self.partials[m].append(contribution)
        self.counts[m] += tokens

    def accumulated(self) -> np.ndarray:
        """Raw (un-normalised) sums, shape (M, neurons)."""
        return np.stack([_exact_sum(p, len(self.registry)) for p in self.partials])

    def fingerprint(self) -> str:
        if not self.finalized:
            raise UsageError("only finalized tables have a fingerprint")
        h = hashlib.sha256()
        h.update(f"{self.criterion}|{','.join(self.pairs)}|{self.registry.fingerprint()}".encode())
        h.update(self.counts.astype("<i8").tobytes())
        h.update(self.scores.astype("<f8").tobytes())
        return h.hexdigest()[:16]

    def row(self, pair: str) -> np.ndarray:
        return self.scores[self.pair_index(pair)]


def new_table(model: TransformerModel, criterion: str, pairs: Sequence[str] | None = None) -> ImportanceTable:
    return ImportanceTable(criterion, tuple(pairs or model.config.language_pairs), model.registry)


def merge(tables: Sequence[ImportanceTable]) -> ImportanceTable:
    """Combine partial tables built over disjoint batch sets."""
    first = tables[0]
    out = ImportanceTable(first.criterion, first.pairs, first.registry, provenance=dict(first.provenance))
    for t in tables:
        if t.finalized or t.criterion != first.criterion or t.pairs != first.pairs or t.registry != first.registry:
            raise UsageError("can only merge unfinalized tables with identical criterion, pairs and registry")
        for m in range(len(first.pairs)):
            out.partials[m].extend(t.partials[m])
        out.counts += t.counts
    return out


def accumulate_batch(model: TransformerModel, batch: Batch, pair: str, criterion: str,
                     table: ImportanceTable) -> None:
    """Add one batch's contributions for ``pair``; no parameter is modified."""
    if table.finalized:
        raise UsageError("importance table is finalized")
    if criterion != table.criterion:
        raise UsageError(f"criterion '{criterion}' does not match table criterion '{table.criterion}'")
    if batch.pair != pair:
        raise DataError(f"batch of pair '{batch.pair}' accumulated under '{pair}'")
    records: dict[SiteKey, tuple[Tensor, np.ndarray]] = {}

    def recorder(key: SiteKey, h: Tensor, valid: np.ndarray) -> None:
        records[key] = (h, valid)

    if criterion == "te":
        saved = [p.tensor.grad for p in model.parameters()]
        loss = forward_train(model, batch, mask=None, recorder=recorder)
        backward(loss)
        for p, g in zip(model.parameters(), saved):
            p.tensor.grad = g
    else:
        with no_grad():
            forward_train(model, batch, mask=None, recorder=recorder)
    contribution = np.zeros(len(model.registry))
    for g in model.registry.groups:
        h, valid = records[g.key]
        contribution[g.slice] = criterion_contribution(criterion, h.data, h.grad, valid)
    table.add(pair, contribution, batch.num_target_tokens)


def finalize(table: ImportanceTable) -> ImportanceTable:
    if table.finalized:
        raise UsageError("importance table is already finalized")
    for pair, count in zip(table.pairs, table.counts):
        if count <= 0:
            raise DataError(f"pair '{pair}' has no accumulated tokens")
    table.scores = table.accumulated() / table.counts[:, None].astype(np.float64)
    table.scores.setflags(write=False)
    table.finalized = True
    return table


def mean_importance(table: ImportanceTable) -> np.ndarray:
    if not table.finalized:
        raise UsageError("mean_importance needs a finalized table")
    return table.scores.sum(axis=0) / table.num_pairs


def finalized_table(criterion: str, pairs: Sequence[str], registry: NeuronSiteRegistry,
                    scores: np.ndarray, counts: Sequence[int] | None = None,
                    provenance: dict | None = None) -> ImportanceTable:
    """Build a finalized table directly from a score matrix (tests, file loading)."""
    scores = np.array(scores, dtype=np.float64)
    if scores.shape != (len(pairs), len(registry)):
        raise DataError(f"score matrix {scores.shape} for {len(pairs)} pairs x {len(registry)} neurons")
    if (scores < 0).any():
        raise DataError("importance scores must be non-negative")
    t = ImportanceTable(criterion, tuple(pairs), registry, provenance=dict(provenance or {}))
    t.counts = np.array(counts if counts is not None else [1] * len(pairs), dtype=np.int64)
    scores.setflags(write=False)
    t.scores = scores
    t.finalized = True
    return t

"""Split neurons into general and language-pair-specific sets.

Within every site group (side, layer, site) the top ``rho`` fraction by mean
importance becomes general. Each remaining neuron ``i`` is assigned to every
pair whose score reaches ``k * max_m score[m, i]``.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from neuron_alloc.data import parse_pair
from neuron_alloc.errors import ConfigError, DataError, UsageError
from neuron_alloc.importance import ImportanceTable, finalized_table, mean_importance
from neuron_alloc.masks import NeuronId, NeuronSiteRegistry

VARIANTS = ("pair", "source_specific", "target_specific", "separate_enc_dec")
VARIANT_ALIASES = {"source": "source_specific", "target": "target_specific", "encdec": "separate_enc_dec"}


@dataclass(frozen=True)
class AllocationConfig:
    rho: float = 0.9
    k: float = 0.7
    variant: str = "pair"

    def __post_init__(self):
        object.__setattr__(self, "variant", VARIANT_ALIASES.get(self.variant, self.variant))
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("rho", f"must lie in (0, 1], got {self.rho}")
        if not 0.0 <= self.k <= 1.0:
            raise ConfigError("k", f"must lie in [0, 1], got {self.k}")
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"unknown allocation variant '{self.variant}'")


@dataclass(frozen=True)
class AllocationPlan:
    pairs: tuple[str, ...]
    registry: NeuronSiteRegistry
    roles: tuple  # per neuron: None (general) or sorted tuple of pair ids
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.roles) != len(self.registry):
            raise DataError(f"plan has {len(self.roles)} roles for {len(self.registry)} neurons")
        known = set(self.pairs)
        for nid, role in zip(self.registry, self.roles):
            if role is None:
                continue
            if not role:
                raise DataError(f"specific neuron {nid} has an empty pair set")
            if not set(role) <= known:
                raise DataError(f"neuron {nid} assigned to unknown pairs {sorted(set(role) - known)}")

    def is_general(self) -> np.ndarray:
        return np.array([r is None for r in self.roles], dtype=bool)

    def assigned(self, pair: str) -> np.ndarray:
        """Specific neurons assigned to ``pair`` (general neurons excluded)."""
        return np.array([r is not None and pair in r for r in self.roles], dtype=bool)

    def role_of(self, nid: NeuronId):
        return self.roles[self.registry.index(nid)]

    @property
    def num_general(self) -> int:
        return int(self.is_general().sum())

    @property
    def num_specific(self) -> int:
        return len(self.roles) - self.num_general

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(("|".join(self.pairs) + "#" + self.registry.fingerprint()).encode())
        for role in self.roles:
            h.update(b"G;" if role is None else (",".join(role) + ";").encode())
        return h.hexdigest()[:16]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, AllocationPlan)
            and self.pairs == other.pairs
            and self.registry == other.registry
            and self.roles == other.roles
        )


def general_count(rho: float, group_size: int) -> int:
    # round half up; the epsilon absorbs binary representation error of rho
    return int(math.floor(rho * group_size + 0.5 + 1e-9))


def _general_flags(mean: np.ndarray, registry: NeuronSiteRegistry, rho: float) -> np.ndarray:
    flags = np.zeros(len(registry), dtype=bool)
    for g in registry.groups:
        values = mean[g.slice]
        n_general = general_count(rho, g.width)
        # descending importance, ties by ascending unit index
        order = sorted(range(g.width), key=lambda u: (-values[u], u))
        flags[g.start + np.array(order[:n_general], dtype=np.int64)] = True
    return flags


def select_general(table: ImportanceTable, rho: float) -> frozenset[NeuronId]:
    if not table.finalized:
        raise UsageError("select_general needs a finalized table")
    if not 0.0 < rho <= 1.0:
        raise ConfigError("rho", f"must lie in (0, 1], got {rho}")
    flags = _general_flags(mean_importance(table), table.registry, rho)
    return frozenset(nid for nid, f in zip(table.registry, flags) if f)


def _threshold_sets(scores: np.ndarray, k: float, labels: Sequence[str],
                    registry: NeuronSiteRegistry, candidates: np.ndarray) -> list:
    """Label sets clearing ``k * max`` for each candidate column."""
    out: list = [None] * scores.shape[1]
    degenerate = []
    for i in np.nonzero(candidates)[0]:
        col = scores[:, i]
        top = col.max()
        if top == 0.0:
            degenerate.append(registry[i])
            out[i] = tuple(labels)
            continue
        threshold = k * top
        out[i] = tuple(labels[m] for m in range(len(labels)) if col[m] >= threshold)
    if degenerate:
        warnings.warn(
            f"{len(degenerate)} specific neuron(s) have zero importance for every pair "
            f"(first: {degenerate[0]}); assigned to all pairs",
            RuntimeWarning,
            stacklevel=3,
        )
    return out


def _sorted_role(role, order: Sequence[str]):
    return None if role is None else tuple(p for p in order if p in set(role))


def assign_specific(table: ImportanceTable, k: float, general) -> AllocationPlan:
    """Assign every non-general neuron to the pairs clearing its threshold."""
    if not table.finalized:
        raise UsageError("assign_specific needs a finalized table")
    if not 0.0 <= k <= 1.0:
        raise ConfigError("k", f"must lie in [0, 1], got {k}")
    general = set(general)
    candidates = np.array([nid not in general for nid in table.registry], dtype=bool)
    roles = _threshold_sets(table.scores, k, table.pairs, table.registry, candidates)
    return AllocationPlan(
        table.pairs,
        table.registry,
        tuple(_sorted_role(r, table.pairs) for r in roles),
        {"criterion": table.criterion, "k": k, "table": table.fingerprint()},
    )


# -- variants -----------------------------------------------------------------

def language_groups(pairs: Sequence[str], by: str) -> dict[str, list[str]]:
    """Map each source (``by='source'``) or target language to its pairs."""
    groups: dict[str, list[str]] = {}
    for pair in pairs:
        src, tgt = parse_pair(pair)
        groups.setdefault(src if by == "source" else tgt, []).append(pair)
    return groups


def regroup(table: ImportanceTable, groups: dict[str, list[str]]) -> ImportanceTable:
    """Average score rows over the pairs of each group; group ids become the pair axis."""
    labels = sorted(groups)
    rows = [
        np.sum([table.row(p) for p in groups[label]], axis=0) / len(groups[label]) for label in labels
    ]
    counts = [int(sum(table.counts[table.pair_index(p)] for p in groups[label])) for label in labels]
    return finalized_table(
        table.criterion, labels, table.registry, np.stack(rows), counts,
        provenance={"regrouped_from": table.fingerprint()},
    )


def apply_variant(table: ImportanceTable, variant: str):
    """Regroup the pair axis for an allocation variant.

    Returns the table unchanged for ``pair``, a language-level table for
    ``source_specific``/``target_specific`` and a ``(source_table,
    target_table)`` tuple for ``separate_enc_dec``.
    """
    variant = VARIANT_ALIASES.get(variant, variant)
    if variant == "pair":
        return table
    if variant == "source_specific":
        return regroup(table, language_groups(table.pairs, "source"))
    if variant == "target_specific":
        return regroup(table, language_groups(table.pairs, "target"))
    if variant == "separate_enc_dec":
        return (
            regroup(table, language_groups(table.pairs, "source")),
            regroup(table, language_groups(table.pairs, "target")),
        )
    raise ConfigError("variant", f"unknown allocation variant '{variant}'")


def _expand(role, groups: dict[str, list[str]], order: Sequence[str]):
    if role is None:
        return None
    members = {p for label in role for p in groups[label]}
    return tuple(p for p in order if p in members)


def allocate(table: ImportanceTable, config: AllocationConfig) -> AllocationPlan:
    """Full allocation (general selection, then thresholding) for any variant."""
    if not table.finalized:
        raise UsageError("allocate needs a finalized table")
    pairs = table.pairs
    registry = table.registry
    if config.variant == "pair":
        flags = _general_flags(mean_importance(table), registry, config.rho)
        roles = _threshold_sets(table.scores, config.k, pairs, registry, ~flags)
    elif config.variant in ("source_specific", "target_specific"):
        by = "source" if config.variant == "source_specific" else "target"
        groups = language_groups(pairs, by)
        lang_table = regroup(table, groups)
        flags = _general_flags(mean_importance(lang_table), registry, config.rho)
        lang_roles = _threshold_sets(lang_table.scores, config.k, lang_table.pairs, registry, ~flags)
        roles = [_expand(r, groups, pairs) for r in lang_roles]
    else:
        src_groups = language_groups(pairs, "source")
        tgt_groups = language_groups(pairs, "target")
        src_table = regroup(table, src_groups)
        tgt_table = regroup(table, tgt_groups)
        encoder = np.array([nid.side == "encoder" for nid in registry], dtype=bool)
        mean = np.where(encoder, mean_importance(src_table), mean_importance(tgt_table))
        flags = _general_flags(mean, registry, config.rho)
        src_roles = _threshold_sets(src_table.scores, config.k, src_table.pairs, registry, ~flags & encoder)
        tgt_roles = _threshold_sets(tgt_table.scores, config.k, tgt_table.pairs, registry, ~flags & ~encoder)
        roles = [
            _expand(s, src_groups, pairs) if enc else _expand(t, tgt_groups, pairs)
            for s, t, enc in zip(src_roles, tgt_roles, encoder)
        ]
    provenance = {
        "criterion": table.criterion,
        "rho": config.rho,
        "k": config.k,
        "variant": config.variant,
        "table": table.fingerprint(),
    }
    for key in ("config", "checkpoint"):
        if key in table.provenance:
            provenance[key] = table.provenance[key]
    return AllocationPlan(pairs, registry, tuple(_sorted_role(r, pairs) for r in roles), provenance)

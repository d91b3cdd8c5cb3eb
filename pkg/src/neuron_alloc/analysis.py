"""Translation scoring, allocation structure metrics and erasure experiments."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from neuron_alloc.allocation import AllocationPlan
from neuron_alloc.errors import DataError, UsageError
from neuron_alloc.importance import ImportanceTable
from neuron_alloc.masks import Mask, MaskSet, SITES

MAX_ORDER = 4


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]):
    """Corpus totals: (matches per order, candidates per order, hyp length, ref length)."""
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU-4 in [0, 100] with exponential smoothing of zero-match orders.

    An order with no matches gets precision ``1 / (2**j * total)`` where ``j``
    counts the zero-match orders seen so far. Tokens are compared verbatim
    (case-sensitive).
    """
    if len(hypotheses) != len(references):
        raise DataError(f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise DataError("bleu: empty corpus")
    matches, totals, hyp_len, ref_len = bleu_statistics(hypotheses, references)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    smooth = 1.0
    for n in range(MAX_ORDER):
        if totals[n] == 0:
            return 0.0
        if matches[n] == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * totals[n])
        else:
            p = matches[n] / totals[n]
        log_sum += math.log(p)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / MAX_ORDER)


def exact_match_accuracy(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    if len(hypotheses) != len(references) or not references:
        raise DataError("exact_match_accuracy: need equally many, non-zero sentences")
    return sum(list(h) == list(r) for h, r in zip(hypotheses, references)) / len(references)


# -- structure metrics --------------------------------------------------------

def _layer_indices(plan: AllocationPlan, side: str, layer: int, site: str | None = None) -> np.ndarray:
    return np.array(
        [i for i, nid in enumerate(plan.registry)
         if nid.side == side and nid.layer == layer and (site is None or nid.site == site)],
        dtype=np.int64,
    )


def lscore(plan: AllocationPlan, side: str, layer: int, pair: str) -> float:
    """Share of a layer's specific neurons that are assigned to ``pair``."""
    if pair not in plan.pairs:
        raise DataError(f"unknown pair '{pair}'")
    idx = _layer_indices(plan, side, layer)
    specific = [plan.roles[i] for i in idx if plan.roles[i] is not None]
    if not specific:
        raise DataError(f"no specific neurons in layer {side} {layer}")
    return sum(pair in r for r in specific) / len(specific)


def mscore(plan: AllocationPlan, side: str, layer: int, site: str) -> float:
    """Mean over pairs of the assigned share of a module's specific neurons."""
    idx = _layer_indices(plan, side, layer, site)
    specific = [plan.roles[i] for i in idx if plan.roles[i] is not None]
    if not specific:
        raise DataError(f"no specific neurons in {side} {layer} {site}")
    shares = [sum(pair in r for r in specific) / len(specific) for pair in plan.pairs]
    return sum(shares) / len(plan.pairs)


def lscore_matrix(plan: AllocationPlan, side: str) -> dict[int, dict[str, float | None]]:
    layers = sorted({nid.layer for nid in plan.registry if nid.side == side})
    out: dict[int, dict[str, float | None]] = {}
    for layer in layers:
        try:
            out[layer] = {p: lscore(plan, side, layer, p) for p in plan.pairs}
        except DataError:
            out[layer] = {p: None for p in plan.pairs}
    return out


def mscore_matrix(plan: AllocationPlan, side: str) -> dict[int, dict[str, float | None]]:
    layers = sorted({nid.layer for nid in plan.registry if nid.side == side})
    sites = [s for s in SITES if any(n.side == side and n.site == s for n in plan.registry)]
    out: dict[int, dict[str, float | None]] = {}
    for layer in layers:
        out[layer] = {}
        for site in sites:
            try:
                out[layer][site] = mscore(plan, side, layer, site)
            except DataError:
                out[layer][site] = None
    return out


# -- erasure ------------------------------------------------------------------

def parse_target(target: str) -> tuple[str, str | None]:
    """``general`` or ``specific:<pair>``."""
    if target == "general":
        return "general", None
    if target.startswith("specific:") and len(target) > len("specific:"):
        return "specific", target.split(":", 1)[1]
    raise UsageError(f"erase target must be 'general' or 'specific:<pair>', got '{target}'")


def erase_population(plan: AllocationPlan, target: str) -> np.ndarray:
    kind, pair = parse_target(target)
    if kind == "general":
        return np.nonzero(plan.is_general())[0]
    if pair not in plan.pairs:
        raise DataError(f"unknown pair '{pair}' in erase target")
    return np.nonzero(plan.assigned(pair))[0]


def erase_random(mask_set: MaskSet, plan: AllocationPlan, target: str, fraction: float,
                 seed: int) -> MaskSet:
    """Zero a random ``fraction`` of the targeted neurons in every mask.

    The population is all general neurons, or every neuron assigned to the
    named pair (general neurons excluded). Sampling is uniform without
    replacement and fixed by ``seed``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise UsageError(f"erase fraction must lie in [0, 1], got {fraction}")
    if mask_set.plan_fingerprint != plan.fingerprint():
        raise DataError("mask set was not built from this plan")
    population = erase_population(plan, target)
    if population.size == 0:
        raise DataError(f"erase target '{target}' has no neurons")
    count = int(math.floor(fraction * population.size + 0.5 + 1e-9))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(population, size=count, replace=False)) if count else np.array([], np.int64)
    registry = plan.registry
    masks = {}
    for pair, mask in mask_set.masks.items():
        vec = mask.as_vector(registry).copy()
        vec[chosen] = 0
        masks[pair] = Mask.from_vector(registry, vec)
    note = f"{mask_set.note};" if mask_set.note else ""
    return MaskSet(masks, mask_set.plan_fingerprint, note + f"erase {target} {fraction} seed={seed} n={count}")


# -- importance distributions -------------------------------------------------

def export_importance_distribution(table: ImportanceTable, side: str, layer: int, site: str,
                                   pairs: Sequence[str] | None = None) -> dict[str, list[tuple[int, float]]]:
    """``{pair: [(unit, score), ...]}`` for one module, in unit order."""
    if not table.finalized:
        raise UsageError("export needs a finalized table")
    group = table.registry.group((side, layer, site))
    pairs = list(table.pairs) if pairs is None else list(pairs)
    out = {}
    for pair in pairs:
        row = table.row(pair)[group.slice]
        out[pair] = [(u, float(v)) for u, v in enumerate(row)]
    return out


def distribution_tsv(series: dict[str, list[tuple[int, float]]]) -> str:
    pairs = list(series)
    lines = ["unit\t" + "\t".join(pairs)]
    n = len(series[pairs[0]]) if pairs else 0
    for u in range(n):
        lines.append(str(u) + "\t" + "\t".join(repr(series[p][u][1]) for p in pairs))
    return "\n".join(lines) + "\n"


@dataclass
class AnalysisReport:
    bleu: dict[str, float] = field(default_factory=dict)
    accuracy: dict[str, float] = field(default_factory=dict)
    lscore: dict[str, dict] = field(default_factory=dict)
    mscore: dict[str, dict] = field(default_factory=dict)
    erasure: dict[str, dict[str, float]] = field(default_factory=dict)
    plan: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "accuracy": self.accuracy,
            "lscore": {side: {str(l): v for l, v in rows.items()} for side, rows in self.lscore.items()},
            "mscore": {side: {str(l): v for l, v in rows.items()} for side, rows in self.mscore.items()},
            "erasure": self.erasure,
            "plan": self.plan,
        }


def structure_report(plan: AllocationPlan) -> AnalysisReport:
    report = AnalysisReport()
    for side in ("encoder", "decoder"):
        report.lscore[side] = lscore_matrix(plan, side)
        report.mscore[side] = mscore_matrix(plan, side)
    report.plan = {
        "general": plan.num_general,
        "specific": plan.num_specific,
        "per_pair": {p: int(plan.assigned(p).sum()) for p in plan.pairs},
        "fingerprint": plan.fingerprint(),
    }
    return report

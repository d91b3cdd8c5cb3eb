"""Neuron addressing and per-language-pair binary masks.

A neuron is one unit of a registered activation vector: an FFN inner unit
after ReLU, or one output unit of an attention sublayer after its output
projection and before the residual addition.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, Mapping, NamedTuple

import numpy as np

from neuron_alloc.errors import DataError, ShapeError
from neuron_alloc.tensor import Tensor, mask_mul

if TYPE_CHECKING:
    from neuron_alloc.allocation import AllocationPlan
    from neuron_alloc.model import ModelConfig

SIDES = ("encoder", "decoder")
SITES = ("self_attn_out", "cross_attn_out", "ffn_inner")

SiteKey = tuple[str, int, str]


class NeuronId(NamedTuple):
    side: str
    layer: int
    site: str
    unit: int

    def __str__(self) -> str:
        return f"{self.side} {self.layer} {self.site} {self.unit}"


def site_width(site: str, d_model: int, d_ffn: int) -> int:
    return d_ffn if site == "ffn_inner" else d_model


def site_keys(num_layers: int) -> list[SiteKey]:
    keys = []
    for side in SIDES:
        for layer in range(1, num_layers + 1):
            for site in SITES:
                if site == "cross_attn_out" and side == "encoder":
                    continue
                keys.append((side, layer, site))
    return keys


@dataclass(frozen=True)
class SiteGroup:
    side: str
    layer: int
    site: str
    start: int
    width: int

    @property
    def key(self) -> SiteKey:
        return (self.side, self.layer, self.site)

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.width)


class NeuronSiteRegistry:
    """Canonically ordered list of every maskable neuron.

    Order: encoder before decoder, layers ascending, sites in
    ``self_attn_out < cross_attn_out < ffn_inner``, units ascending.
    """

    def __init__(self, groups: list[tuple[str, int, str, int]]):
        self.groups: list[SiteGroup] = []
        ids: list[NeuronId] = []
        for side, layer, site, width in groups:
            self.groups.append(SiteGroup(side, layer, site, len(ids), width))
            ids.extend(NeuronId(side, layer, site, u) for u in range(width))
        self.ids: tuple[NeuronId, ...] = tuple(ids)
        self._index = {nid: i for i, nid in enumerate(self.ids)}
        self._by_key = {g.key: g for g in self.groups}

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[NeuronId]:
        return iter(self.ids)

    def __getitem__(self, i: int) -> NeuronId:
        return self.ids[i]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, NeuronSiteRegistry) and self.ids == other.ids

    def index(self, nid: NeuronId) -> int:
        try:
            return self._index[nid]
        except KeyError:
            raise ShapeError(f"neuron {nid} is not in the registry") from None

    def group(self, key: SiteKey) -> SiteGroup:
        try:
            return self._by_key[key]
        except KeyError:
            raise ShapeError(f"site {key} is not in the registry") from None

    def layout(self) -> list[tuple[str, int, str, int]]:
        return [(g.side, g.layer, g.site, g.width) for g in self.groups]

    def fingerprint(self) -> str:
        text = ";".join(f"{s},{l},{t},{w}" for s, l, t, w in self.layout())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_ids(cls, ids: list[NeuronId]) -> "NeuronSiteRegistry":
        """Rebuild from an explicit id list; units must run 0..w-1 per site."""
        groups: list[tuple[str, int, str, int]] = []
        for nid in ids:
            if groups and groups[-1][:3] == (nid.side, nid.layer, nid.site):
                side, layer, site, width = groups[-1]
                if nid.unit != width:
                    raise DataError(f"registry units out of order at {nid}")
                groups[-1] = (side, layer, site, width + 1)
            else:
                if nid.unit != 0:
                    raise DataError(f"registry site {nid[:3]} does not start at unit 0")
                groups.append((nid.side, nid.layer, nid.site, 1))
        return cls(groups)


def enumerate_sites(config: "ModelConfig") -> NeuronSiteRegistry:
    return NeuronSiteRegistry(
        [
            (side, layer, site, site_width(site, config.d_model, config.d_ffn))
            for side, layer, site in site_keys(config.num_layers)
        ]
    )


class Mask:
    """Immutable per-site bit vectors for one language pair (1 = active)."""

    def __init__(self, bits: Mapping[SiteKey, np.ndarray]):
        frozen = {}
        for key, vec in bits.items():
            arr = np.array(vec, dtype=np.uint8)
            if arr.ndim != 1 or not np.isin(arr, (0, 1)).all():
                raise ShapeError(f"mask for {key} must be a 0/1 vector")
            arr.setflags(write=False)
            frozen[key] = arr
        self._bits = frozen

    def bits(self, key: SiteKey) -> np.ndarray:
        try:
            return self._bits[key]
        except KeyError:
            raise ShapeError(f"mask has no site {key}") from None

    def keys(self) -> list[SiteKey]:
        return list(self._bits)

    def as_vector(self, registry: NeuronSiteRegistry) -> np.ndarray:
        return np.concatenate([self.bits(g.key) for g in registry.groups])

    def check_compatible(self, registry: NeuronSiteRegistry) -> None:
        for g in registry.groups:
            if g.key not in self._bits:
                raise ShapeError(f"mask registered for a different model: missing site {g.key}")
            if self._bits[g.key].shape[0] != g.width:
                raise ShapeError(
                    f"mask registered for a different model: site {g.key} has "
                    f"{self._bits[g.key].shape[0]} bits, model width is {g.width}"
                )
        if len(self._bits) != len(registry.groups):
            raise ShapeError("mask registered for a different model: extra sites")

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Mask)
            and self._bits.keys() == other._bits.keys()
            and all(np.array_equal(self._bits[k], other._bits[k]) for k in self._bits)
        )

    @classmethod
    def from_vector(cls, registry: NeuronSiteRegistry, vec: np.ndarray) -> "Mask":
        return cls({g.key: vec[g.slice] for g in registry.groups})

    @classmethod
    def all_ones(cls, registry: NeuronSiteRegistry) -> "Mask":
        return cls.from_vector(registry, np.ones(len(registry), dtype=np.uint8))


@dataclass(frozen=True)
class MaskSet:
    masks: dict[str, Mask]
    plan_fingerprint: str
    note: str = field(default="")

    def __getitem__(self, pair: str) -> Mask:
        try:
            return self.masks[pair]
        except KeyError:
            raise DataError(f"no mask for language pair '{pair}'") from None

    @property
    def pairs(self) -> list[str]:
        return list(self.masks)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, MaskSet)
            and self.plan_fingerprint == other.plan_fingerprint
            and self.masks.keys() == other.masks.keys()
            and all(self.masks[p] == other.masks[p] for p in self.masks)
        )


def build_mask_set(plan: "AllocationPlan", config: "ModelConfig") -> MaskSet:
    registry = enumerate_sites(config)
    if plan.registry != registry:
        raise ShapeError(
            f"plan covers {len(plan.registry)} neurons but the model config has {len(registry)}"
        )
    general = np.array([r is None for r in plan.roles], dtype=bool)
    masks = {}
    for pair in plan.pairs:
        member = np.array([r is not None and pair in r for r in plan.roles], dtype=bool)
        masks[pair] = Mask.from_vector(registry, (general | member).astype(np.uint8))
    return MaskSet(masks, plan.fingerprint())


def apply_mask(activation: Tensor, bits) -> Tensor:
    bits = np.asarray(bits)
    if bits.shape != (activation.shape[-1],):
        raise ShapeError(
            f"apply_mask: {bits.shape[0] if bits.ndim else 0} bits for activation width {activation.shape[-1]}"
        )
    return mask_mul(activation, bits)

"""Versioned on-disk formats for checkpoints, importance tables, plans and masks.

Every file starts with a magic word and a format version; a mismatch fails
loudly instead of being reinterpreted. Writes go to a temporary file in the
destination directory which is then renamed over the target.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from neuron_alloc.allocation import AllocationPlan
from neuron_alloc.errors import ConfigError, DataError, FormatVersionError
from neuron_alloc.importance import ImportanceTable, finalized_table
from neuron_alloc.masks import SIDES, SITES, Mask, MaskSet, NeuronId, NeuronSiteRegistry
from neuron_alloc.model import ModelConfig, TransformerModel, build_model

CHECKPOINT_MAGIC = "neuron-alloc-checkpoint"
TABLE_MAGIC = "neuron-alloc-table"
PLAN_MAGIC = "neuron-alloc-plan"
MASKS_MAGIC = "neuron-alloc-masks"
FORMAT_VERSION = 1


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix="." + path.name + ".", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _check_header(kind: str, magic: str, version: str, expected: str) -> None:
    if magic != expected:
        raise DataError(f"not a {kind} file (found '{magic[:40]}')")
    if version != str(FORMAT_VERSION):
        raise FormatVersionError(f"{kind} format version {version} is not supported (expected {FORMAT_VERSION})")


# -- checkpoints --------------------------------------------------------------

def model_fingerprint(model: TransformerModel) -> str:
    h = hashlib.sha256(model.config.fingerprint().encode())
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    seed: int = 0
    step: int = 0
    vocab: list[str] | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: TransformerModel, seed: int = 0, step: int = 0,
                   vocab: list[str] | None = None, meta: dict | None = None) -> "Checkpoint":
        return cls(model.config, model.state_dict(), seed, step, vocab, dict(meta or {}))

    def to_model(self) -> TransformerModel:
        model = build_model(self.config, 0)
        model.load_state_dict(self.state)
        return model

    def fingerprint(self) -> str:
        return model_fingerprint(self.to_model())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.state)
    header = [
        f"{CHECKPOINT_MAGIC} {FORMAT_VERSION}",
        "config " + _dumps(ckpt.config.to_dict()),
        f"seed {int(ckpt.seed)}",
        f"step {int(ckpt.step)}",
        "vocab " + _dumps(ckpt.vocab),
        "meta " + _dumps(ckpt.meta),
    ]
    blocks = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.state[name], dtype="<f4")
        header.append(f"param {name} {','.join(map(str, arr.shape))}")
        blocks.append(arr.tobytes())
    header.append("end")
    atomic_write(path, ("\n".join(header) + "\n").encode() + b"".join(blocks))


def load_checkpoint(path) -> Checkpoint:
    raw = _read(path)
    pos = 0
    lines = []
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise DataError(f"{path}: truncated checkpoint header")
        line = raw[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        if not lines:
            parts = line.split(" ")
            _check_header("checkpoint", parts[0], parts[1] if len(parts) > 1 else "", CHECKPOINT_MAGIC)
        lines.append(line)
        if line == "end":
            break
    fields: dict[str, str] = {}
    params = []
    for line in lines[1:-1]:
        key, _, rest = line.partition(" ")
        if key == "param":
            name, shape = rest.split(" ")
            params.append((name, tuple(int(s) for s in shape.split(",") if s)))
        else:
            fields[key] = rest
    try:
        config = ModelConfig.from_dict(json.loads(fields["config"]))
        seed, step = int(fields["seed"]), int(fields["step"])
        vocab = json.loads(fields["vocab"])
        meta = json.loads(fields["meta"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed checkpoint header ({exc})") from None
    state = {}
    for name, shape in params:
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + n > len(raw):
            raise DataError(f"{path}: truncated parameter block {name}")
        state[name] = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += n
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes after parameter blocks")
    return Checkpoint(config, state, seed, step, vocab, meta)


# -- neuron records -----------------------------------------------------------

def _neuron_fields(nid: NeuronId) -> str:
    return f"{nid.side} {nid.layer} {nid.site} {nid.unit}"


def _parse_neuron(parts: list[str], where: str) -> NeuronId:
    try:
        side, layer, site, unit = parts[0], int(parts[1]), parts[2], int(parts[3])
    except (IndexError, ValueError):
        raise DataError(f"{where}: malformed neuron record") from None
    if side not in SIDES or site not in SITES:
        raise DataError(f"{where}: unknown site {side} {site}")
    return NeuronId(side, layer, site, unit)


def _split_text(raw: bytes, kind: str, magic: str) -> tuple[dict, list[str]]:
    lines = raw.decode("utf-8").splitlines()
    if not lines:
        raise DataError(f"empty {kind} file")
    parts = lines[0].split(" ", 2)
    _check_header(kind, parts[0], parts[1] if len(parts) > 1 else "", magic)
    try:
        header = json.loads(parts[2])
    except (IndexError, ValueError):
        raise DataError(f"malformed {kind} header") from None
    return header, lines[1:]


# -- importance tables --------------------------------------------------------

def save_table(path, table: ImportanceTable) -> None:
    header = {
        "criterion": table.criterion,
        "num_pairs": table.num_pairs,
        "pairs": list(table.pairs),
        "registry_size": len(table.registry),
        "registry": table.registry.fingerprint(),
        "counts": [int(c) for c in table.counts],
        "fingerprint": table.fingerprint(),
        "provenance": table.provenance,
    }
    lines = [f"{TABLE_MAGIC} {FORMAT_VERSION} {_dumps(header)}"]
    for i, nid in enumerate(table.registry):
        lines.append(_neuron_fields(nid) + " " + " ".join(repr(float(v)) for v in table.scores[:, i]))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def load_table(path) -> ImportanceTable:
    header, lines = _split_text(_read(path), "importance table", TABLE_MAGIC)
    M = header["num_pairs"]
    ids, rows = [], []
    for n, line in enumerate(lines, start=2):
        parts = line.split()
        ids.append(_parse_neuron(parts, f"{path}:{n}"))
        if len(parts) != 4 + M:
            raise DataError(f"{path}:{n}: expected {M} scores, found {len(parts) - 4}")
        rows.append([float(v) for v in parts[4:]])
    registry = NeuronSiteRegistry.from_ids(ids)
    if len(registry) != header["registry_size"] or registry.fingerprint() != header["registry"]:
        raise DataError(f"{path}: neuron records disagree with the header")
    table = finalized_table(header["criterion"], header["pairs"], registry, np.array(rows).T,
                            header["counts"], header["provenance"])
    if table.fingerprint() != header["fingerprint"]:
        raise DataError(f"{path}: content does not match its fingerprint")
    return table


# -- allocation plans ---------------------------------------------------------

def save_plan(path, plan: AllocationPlan) -> None:
    header = {
        "num_pairs": len(plan.pairs),
        "pairs": list(plan.pairs),
        "registry_size": len(plan.registry),
        "registry": plan.registry.fingerprint(),
        "general": plan.num_general,
        "specific": plan.num_specific,
        "fingerprint": plan.fingerprint(),
        "provenance": plan.provenance,
    }
    lines = [f"{PLAN_MAGIC} {FORMAT_VERSION} {_dumps(header)}"]
    for nid, role in zip(plan.registry, plan.roles):
        lines.append(_neuron_fields(nid) + (" GENERAL" if role is None else " SPECIFIC:" + ",".join(role)))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def load_plan(path) -> AllocationPlan:
    header, lines = _split_text(_read(path), "allocation plan", PLAN_MAGIC)
    ids, roles = [], []
    for n, line in enumerate(lines, start=2):
        parts = line.split()
        ids.append(_parse_neuron(parts, f"{path}:{n}"))
        if len(parts) != 5:
            raise DataError(f"{path}:{n}: expected one role field")
        role = parts[4]
        if role == "GENERAL":
            roles.append(None)
        elif role.startswith("SPECIFIC:"):
            roles.append(tuple(role[len("SPECIFIC:"):].split(",")))
        else:
            raise DataError(f"{path}:{n}: unknown role '{role}'")
    registry = NeuronSiteRegistry.from_ids(ids)
    plan = AllocationPlan(tuple(header["pairs"]), registry, tuple(roles), header["provenance"])
    if plan.fingerprint() != header["fingerprint"]:
        raise DataError(f"{path}: content does not match its fingerprint")
    return plan


# -- mask sets ----------------------------------------------------------------

def save_masks(path, registry: NeuronSiteRegistry, mask_set: MaskSet) -> None:
    header = {
        "pairs": mask_set.pairs,
        "layout": [list(g) for g in registry.layout()],
        "registry": registry.fingerprint(),
        "plan": mask_set.plan_fingerprint,
        "note": mask_set.note,
    }
    lines = [f"{MASKS_MAGIC} {FORMAT_VERSION} {_dumps(header)}"]
    for pair in mask_set.pairs:
        bits = mask_set[pair].as_vector(registry)
        lines.append(pair + " " + "".join("1" if b else "0" for b in bits))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def load_masks(path) -> tuple[NeuronSiteRegistry, MaskSet]:
    header, lines = _split_text(_read(path), "mask set", MASKS_MAGIC)
    registry = NeuronSiteRegistry([tuple(g) for g in header["layout"]])
    if registry.fingerprint() != header["registry"]:
        raise DataError(f"{path}: registry layout does not match its fingerprint")
    masks = {}
    for n, line in enumerate(lines, start=2):
        pair, _, bits = line.partition(" ")
        if len(bits) != len(registry) or set(bits) - {"0", "1"}:
            raise DataError(f"{path}:{n}: expected {len(registry)} mask bits")
        masks[pair] = Mask.from_vector(registry, np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0"))
    if list(masks) != header["pairs"]:
        raise DataError(f"{path}: pair lines do not match the header")
    return registry, MaskSet(masks, header["plan"], header["note"])


# -- reports and configs ------------------------------------------------------

def save_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode())


def load_json(path):
    try:
        return json.loads(_read(path))
    except ValueError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from None


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(_read(path).decode("utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(key or f"line {n}", f"{path}:{n}: expected 'key = value'")
        if key in out:
            raise ConfigError(key, f"{path}:{n}: duplicate key")
        out[key] = value.strip()
    return out

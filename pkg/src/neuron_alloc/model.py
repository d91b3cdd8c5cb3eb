"""Pre-norm encoder-decoder transformer with maskable neuron sites."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from neuron_alloc.errors import ConfigError, ShapeError, UsageError
from neuron_alloc.masks import Mask, MaskSet, NeuronSiteRegistry, SiteKey, enumerate_sites
from neuron_alloc.tensor import (
    Parameter,
    Tensor,
    add,
    cross_entropy,
    dropout,
    embedding_lookup,
    layer_norm,
    mask_mul,
    matmul,
    no_grad,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
BOS_ID = EOS_ID  # decoder start symbol, fairseq convention

_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ffn: int = 128
    vocab_size: int = 64
    max_seq_len: int = 32
    dropout_rate: float = 0.0
    language_pairs: tuple[str, ...] = ()
    tie_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "language_pairs", tuple(self.language_pairs))
        for name in ("num_layers", "d_model", "num_heads", "d_ffn", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if self.d_model % self.num_heads:
            raise ConfigError("num_heads", f"{self.num_heads} does not divide d_model={self.d_model}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate", f"must lie in [0, 1), got {self.dropout_rate}")
        if len(set(self.language_pairs)) != len(self.language_pairs):
            raise ConfigError("language_pairs", "duplicate pair identifiers")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["language_pairs"] = list(self.language_pairs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        return cls(**d)

    def fingerprint(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Batch:
    """A pair-homogeneous padded batch.

    ``src`` already starts with the language token; ``tgt_in`` starts with BOS
    and ``tgt_out`` ends with EOS.
    """

    pair: str
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def num_target_tokens(self) -> int:
        return int((self.tgt_out != PAD_ID).sum())

    @property
    def size(self) -> int:
        return self.src.shape[0]


def make_batch(pair: str, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> Batch:
    """Pad sentences into a :class:`Batch`; sources must carry the language token."""
    if len(sources) != len(targets) or not sources:
        raise ShapeError("make_batch: need equally many (non-zero) sources and targets")
    src_len = max(len(s) for s in sources) + 1
    tgt_len = max(len(t) for t in targets) + 1
    src = np.full((len(sources), src_len), PAD_ID, dtype=np.int64)
    tgt_in = np.full((len(sources), tgt_len), PAD_ID, dtype=np.int64)
    tgt_out = np.full((len(sources), tgt_len), PAD_ID, dtype=np.int64)
    for i, (s, t) in enumerate(zip(sources, targets)):
        src[i, : len(s)] = s
        src[i, len(s)] = EOS_ID
        tgt_in[i, 0] = BOS_ID
        tgt_in[i, 1 : len(t) + 1] = t
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = EOS_ID
    return Batch(pair, src, tgt_in, tgt_out)


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)[:, : (d_model - d_model // 2)]
    return table


# Called for every site activation: recorder(site_key, tensor, valid_positions).
Recorder = Callable[[SiteKey, Tensor, np.ndarray], None]


@dataclass
class _Ctx:
    mask: Mask | None
    recorder: Recorder | None
    rng: np.random.Generator | None
    rate: float


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Parameter], dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)
        self.registry: NeuronSiteRegistry = enumerate_sites(config)
        self._positions = sinusoidal_positions(config.max_seq_len, config.d_model).astype(self.dtype)
        self._embed_scale = math.sqrt(config.d_model)

    # -- parameter access ------------------------------------------------
    def p(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if state.keys() != self.params.keys():
            raise ShapeError("state dict parameter names differ from the model")
        for name, arr in state.items():
            p = self.params[name]
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} vs model {p.data.shape}")
            p.tensor.data = np.array(arr, dtype=self.dtype)
            p.tensor.grad = None

    def clone(self) -> "TransformerModel":
        params = {n: Parameter(n, p.data.copy()) for n, p in self.params.items()}
        for n, p in params.items():
            p.exp_avg = self.params[n].exp_avg.copy()
            p.exp_avg_sq = self.params[n].exp_avg_sq.copy()
        return TransformerModel(self.config, params, self.dtype)

    def check_mask(self, mask: Mask | None) -> None:
        if mask is not None:
            mask.check_compatible(self.registry)

    # -- building blocks -------------------------------------------------
    def _const(self, arr: np.ndarray) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype))

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return add(matmul(x, self.p(prefix + ".weight")), self.p(prefix + ".bias"))

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self.p(prefix + ".gain"), self.p(prefix + ".bias"))

    def _site(self, ctx: _Ctx, key: SiteKey, h: Tensor, valid: np.ndarray) -> Tensor:
        if ctx.mask is not None:
            h = mask_mul(h, ctx.mask.bits(key))
        if ctx.recorder is not None:
            h.retain_grad()
            ctx.recorder(key, h, valid)
        return h

    def _residual(self, ctx: _Ctx, x: Tensor, branch: Tensor) -> Tensor:
        if ctx.rng is not None and ctx.rate > 0:
            branch = dropout(branch, ctx.rate, ctx.rng)
        return add(x, branch)

    def _attention(self, q_in: Tensor, kv_in: Tensor, prefix: str, bias: np.ndarray) -> Tensor:
        cfg = self.config
        B, T, d = q_in.shape
        S = kv_in.shape[1]
        H = cfg.num_heads
        dh = d // H
        q = self._linear(q_in, prefix + ".q")
        k = self._linear(kv_in, prefix + ".k")
        v = self._linear(kv_in, prefix + ".v")
        q = reshape(transpose(reshape(q, (B, T, H, dh)), (0, 2, 1, 3)), (B * H, T, dh))
        kt = reshape(transpose(reshape(k, (B, S, H, dh)), (0, 2, 3, 1)), (B * H, dh, S))
        v = reshape(transpose(reshape(v, (B, S, H, dh)), (0, 2, 1, 3)), (B * H, S, dh))
        scores = scale(matmul(q, kt), 1.0 / math.sqrt(dh))
        scores = add(reshape(scores, (B, H, T, S)), self._const(bias))
        probs = reshape(softmax(scores), (B * H, T, S))
        ctx = matmul(probs, v)
        ctx = reshape(transpose(reshape(ctx, (B, H, T, dh)), (0, 2, 1, 3)), (B, T, d))
        return self._linear(ctx, prefix + ".o")

    def _embed(self, ids: np.ndarray, ctx: _Ctx) -> Tensor:
        T = ids.shape[1]
        if T > self.config.max_seq_len:
            raise ShapeError(f"sequence length {T} exceeds max_seq_len={self.config.max_seq_len}")
        x = scale(embedding_lookup(self.p("embed.weight"), ids), self._embed_scale)
        x = add(x, self._const(self._positions[:T]))
        if ctx.rng is not None and ctx.rate > 0:
            x = dropout(x, ctx.rate, ctx.rng)
        return x

    # -- forward ---------------------------------------------------------
    def _ctx(self, mask, recorder, rng) -> _Ctx:
        self.check_mask(mask)
        return _Ctx(mask, recorder, rng, self.config.dropout_rate)

    def encode(self, src: np.ndarray, mask: Mask | None = None, recorder: Recorder | None = None,
               rng: np.random.Generator | None = None) -> Tensor:
        return self._encode(np.asarray(src), self._ctx(mask, recorder, rng))

    def _encode(self, src: np.ndarray, ctx: _Ctx) -> Tensor:
        valid = src != PAD_ID
        bias = np.where(valid, 0.0, _NEG)[:, None, None, :]
        x = self._embed(src, ctx)
        for layer in range(1, self.config.num_layers + 1):
            pre = f"enc.{layer}"
            normed = self._norm(x, pre + ".ln1")
            h = self._attention(normed, normed, pre + ".self_attn", bias)
            h = self._site(ctx, ("encoder", layer, "self_attn_out"), h, valid)
            x = self._residual(ctx, x, h)
            x = self._residual(ctx, x, self._ffn(ctx, x, pre, ("encoder", layer, "ffn_inner"), valid))
        return self._norm(x, "enc.ln_f")

    def _ffn(self, ctx: _Ctx, x: Tensor, pre: str, key: SiteKey, valid: np.ndarray) -> Tensor:
        inner = relu(self._linear(self._norm(x, pre + ".ln_ffn"), pre + ".ffn.fc1"))
        inner = self._site(ctx, key, inner, valid)
        return self._linear(inner, pre + ".ffn.fc2")

    def decode(self, memory: Tensor, src: np.ndarray, tgt_in: np.ndarray, mask: Mask | None = None,
               recorder: Recorder | None = None, rng: np.random.Generator | None = None) -> Tensor:
        """Logits of shape (batch, target length, vocab)."""
        return self._decode(memory, np.asarray(src), np.asarray(tgt_in), self._ctx(mask, recorder, rng))

    def _decode(self, memory: Tensor, src: np.ndarray, tgt_in: np.ndarray, ctx: _Ctx) -> Tensor:
        T = tgt_in.shape[1]
        valid = tgt_in != PAD_ID
        cross_bias = np.where(src != PAD_ID, 0.0, _NEG)[:, None, None, :]
        causal = np.triu(np.full((T, T), _NEG), k=1)[None, None]
        x = self._embed(tgt_in, ctx)
        for layer in range(1, self.config.num_layers + 1):
            pre = f"dec.{layer}"
            normed = self._norm(x, pre + ".ln1")
            h = self._attention(normed, normed, pre + ".self_attn", causal)
            x = self._residual(ctx, x, self._site(ctx, ("decoder", layer, "self_attn_out"), h, valid))
            h = self._attention(self._norm(x, pre + ".ln2"), memory, pre + ".cross_attn", cross_bias)
            x = self._residual(ctx, x, self._site(ctx, ("decoder", layer, "cross_attn_out"), h, valid))
            x = self._residual(ctx, x, self._ffn(ctx, x, pre, ("decoder", layer, "ffn_inner"), valid))
        x = self._norm(x, "dec.ln_f")
        if self.config.tie_output:
            return matmul(x, transpose(self.p("embed.weight")))
        return self._linear(x, "out_proj")

    def logits(self, batch: Batch, mask: Mask | None = None, recorder: Recorder | None = None,
               rng: np.random.Generator | None = None) -> Tensor:
        ctx = self._ctx(mask, recorder, rng)
        memory = self._encode(batch.src, ctx)
        return self._decode(memory, batch.src, batch.tgt_in, ctx)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> TransformerModel:
    """Deterministically initialised model; same (config, seed) gives identical bytes."""
    if not isinstance(config, ModelConfig):
        raise UsageError("build_model expects a ModelConfig")
    rng = np.random.default_rng(seed)
    d, f, V = config.d_model, config.d_ffn, config.vocab_size
    arrays: dict[str, np.ndarray] = {}
    arrays["embed.weight"] = rng.uniform(-1.0, 1.0, size=(V, d)) * math.sqrt(3.0 / d)

    def linear(prefix: str, fan_in: int, fan_out: int) -> None:
        arrays[prefix + ".weight"] = _xavier(rng, fan_in, fan_out)
        arrays[prefix + ".bias"] = np.zeros(fan_out)

    def norm(prefix: str) -> None:
        arrays[prefix + ".gain"] = np.ones(d)
        arrays[prefix + ".bias"] = np.zeros(d)

    def attention(prefix: str) -> None:
        for proj in ("q", "k", "v", "o"):
            linear(f"{prefix}.{proj}", d, d)

    for layer in range(1, config.num_layers + 1):
        pre = f"enc.{layer}"
        norm(pre + ".ln1")
        attention(pre + ".self_attn")
        norm(pre + ".ln_ffn")
        linear(pre + ".ffn.fc1", d, f)
        linear(pre + ".ffn.fc2", f, d)
    norm("enc.ln_f")
    for layer in range(1, config.num_layers + 1):
        pre = f"dec.{layer}"
        norm(pre + ".ln1")
        attention(pre + ".self_attn")
        norm(pre + ".ln2")
        attention(pre + ".cross_attn")
        norm(pre + ".ln_ffn")
        linear(pre + ".ffn.fc1", d, f)
        linear(pre + ".ffn.fc2", f, d)
    norm("dec.ln_f")
    if not config.tie_output:
        linear("out_proj", d, V)
    params = {name: Parameter(name, arr.astype(dtype)) for name, arr in arrays.items()}
    return TransformerModel(config, params, dtype)


def forward_train(model: TransformerModel, batch: Batch, mask: Mask | None = None,
                  recorder: Recorder | None = None, rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced mean cross-entropy over non-pad target tokens."""
    logits = model.logits(batch, mask=mask, recorder=recorder, rng=rng)
    B, T, V = logits.shape
    return cross_entropy(reshape(logits, (B * T, V)), batch.tgt_out.reshape(-1), PAD_ID)


def parameters_for_site(model: TransformerModel, key: SiteKey) -> list[tuple[str, str]]:
    """Parameters tied exclusively to units of a site, as (name, axis) pairs.

    axis "col" means column j belongs to unit j, "row" means row j,
    "vec" means entry j.
    """
    side, layer, site = key
    pre = f"{'enc' if side == 'encoder' else 'dec'}.{layer}"
    if site == "ffn_inner":
        return [(pre + ".ffn.fc1.weight", "col"), (pre + ".ffn.fc1.bias", "vec"), (pre + ".ffn.fc2.weight", "row")]
    sub = "self_attn" if site == "self_attn_out" else "cross_attn"
    return [(f"{pre}.{sub}.o.weight", "col"), (f"{pre}.{sub}.o.bias", "vec")]


def update_masks_for(model: TransformerModel, mask: Mask) -> dict[str, np.ndarray]:
    """Boolean per-parameter arrays: False where the entry only serves inactive units."""
    out: dict[str, np.ndarray] = {}
    for g in model.registry.groups:
        bits = mask.bits(g.key).astype(bool)
        if bits.all():
            continue
        for name, axis in parameters_for_site(model, g.key):
            shape = model.params[name].data.shape
            if axis == "col":
                allowed = np.broadcast_to(bits[None, :], shape)
            elif axis == "row":
                allowed = np.broadcast_to(bits[:, None], shape)
            else:
                allowed = bits
            prev = out.get(name)
            out[name] = allowed.copy() if prev is None else (prev & allowed)
    return out


# -- decoding -------------------------------------------------------------

def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


StepFn = Callable[[list[list[int]]], np.ndarray]


def beam_search(step_logprobs: StepFn, bos: int, eos: int, beam_size: int, alpha: float,
                max_len: int) -> list[int]:
    """Length-normalised beam search over a next-token log-prob function.

    ``step_logprobs`` maps a list of prefixes (each starting with ``bos``) to a
    (num_prefixes, vocab) array of log-probabilities. Hypotheses are ranked by
    ``logp / ((5 + len) / 6) ** alpha`` where ``len`` counts generated tokens
    including EOS. At ``max_len`` generated tokens EOS is forced. Returns the
    best finished hypothesis without BOS/EOS.
    """
    if beam_size < 1:
        raise UsageError(f"beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise UsageError(f"max_len must be >= 1, got {max_len}")
    alive: list[tuple[list[int], float]] = [([bos], 0.0)]
    finished: list[tuple[float, list[int]]] = []
    for step in range(max_len):
        lp = np.asarray(step_logprobs([h for h, _ in alive]), dtype=np.float64)
        base = np.array([s for _, s in alive])
        if step == max_len - 1:
            for (toks, s), row in zip(alive, lp):
                total = s + row[eos]
                finished.append((total / length_penalty(len(toks), alpha), toks[1:]))
            break
        scores = base[:, None] + lp
        V = scores.shape[1]
        order = np.argsort(-scores.reshape(-1), kind="stable")
        nxt: list[tuple[list[int], float]] = []
        for rank, flat in enumerate(order):
            i, tok = divmod(int(flat), V)
            total = float(scores[i, tok])
            toks = alive[i][0]
            if tok == eos:
                if rank < beam_size:
                    finished.append((total / length_penalty(len(toks), alpha), toks[1:]))
            else:
                nxt.append((toks + [tok], total))
            if len(nxt) == beam_size:
                break
        if len(finished) >= beam_size or not nxt:
            break
        alive = nxt
    best = max(range(len(finished)), key=lambda j: (finished[j][0], -j))
    return finished[best][1]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def default_max_len(model: TransformerModel, src_len: int) -> int:
    return max(1, min(model.config.max_seq_len, src_len + 8))


def _mask_for(mask_set: MaskSet | None, pair: str) -> Mask | None:
    return None if mask_set is None else mask_set[pair]


def translate_beam(model: TransformerModel, source_ids: Sequence[int], pair: str,
                   mask_set: MaskSet | None = None, beam_size: int = 4,
                   length_penalty_alpha: float = 0.6, max_len: int | None = None) -> list[int]:
    """Beam-search translation of one source sentence (language token included)."""
    mask = _mask_for(mask_set, pair)
    src = np.asarray([list(source_ids) + [EOS_ID]], dtype=np.int64)
    if max_len is None:
        max_len = default_max_len(model, src.shape[1])
    with no_grad():
        memory = model.encode(src, mask)

        def step(prefixes: list[list[int]]) -> np.ndarray:
            n = len(prefixes)
            tgt = np.asarray(prefixes, dtype=np.int64)
            mem = Tensor(np.repeat(memory.data, n, axis=0))
            logits = model.decode(mem, np.repeat(src, n, axis=0), tgt, mask)
            return _log_softmax(logits.data[:, -1, :])

        return beam_search(step, BOS_ID, EOS_ID, beam_size, length_penalty_alpha, max_len)


def greedy_decode(model: TransformerModel, source_ids: Sequence[int], pair: str,
                  mask_set: MaskSet | None = None, max_len: int | None = None) -> list[int]:
    """Step-wise argmax decoding of one sentence."""
    mask = _mask_for(mask_set, pair)
    src = np.asarray([list(source_ids) + [EOS_ID]], dtype=np.int64)
    if max_len is None:
        max_len = default_max_len(model, src.shape[1])
    out = [BOS_ID]
    with no_grad():
        memory = model.encode(src, mask)
        for _ in range(max_len - 1):
            logits = model.decode(memory, src, np.asarray([out], dtype=np.int64), mask)
            tok = int(np.argmax(logits.data[0, -1]))
            if tok == EOS_ID:
                break
            out.append(tok)
    return out[1:]


def greedy_decode_batch(model: TransformerModel, sources: Sequence[Sequence[int]],
                        mask: Mask | None = None, max_len: int | None = None) -> list[list[int]]:
    """Batched greedy decoding for evaluation; sources carry the language token."""
    n = len(sources)
    width = max(len(s) for s in sources) + 1
    src = np.full((n, width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(sources):
        src[i, : len(s)] = s
        src[i, len(s)] = EOS_ID
    if max_len is None:
        max_len = default_max_len(model, width)
    tgt = np.full((n, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    with no_grad():
        memory = model.encode(src, mask)
        for _ in range(max_len - 1):
            logits = model.decode(memory, src, tgt, mask)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            nxt = np.where(done, PAD_ID, nxt)
            done |= nxt == EOS_ID
            tgt = np.concatenate([tgt, nxt[:, None]], axis=1)
            if done.all():
                break
    results = []
    for row in tgt[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS_ID, PAD_ID):
                break
            toks.append(int(t))
        results.append(toks)
    return results

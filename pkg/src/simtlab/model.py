"""Encoder-decoder transformer for wait-k decoding with lagging-routed adapters.

The encoder is causal, so appending a source token never changes the states
of earlier positions. Decoder position ``t`` cross-attends to the first
``g(t)`` encoder positions; at wait-k this is ``min(|Z|, t + k - 1)``.
Every adapter-carrying decoder layer holds one adapter per entry of the
adapter lagging list, and a forward pass uses exactly one of them, chosen by
:func:`route`.

Two execution paths share the same parameter set:

* batched teacher-forced passes (:meth:`SimtModel.forward_train`,
  :meth:`SimtModel.encode`, :meth:`SimtModel.decode_step`), and
* streaming inference (:meth:`SimtModel.encode_append`,
  :class:`IncrementalDecoder`) which caches per-layer keys and values.

Inference runs under :func:`ndgrad.deterministic`, which makes the streaming
path agree with the batched recomputation bit for bit.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndgrad as nd
from .corpus import BOS, EOS, PAD, Batch
from .ndgrad import Tensor


class RoutingError(ValueError):
    pass


class PreconditionError(RuntimeError):
    """The caller has not read enough source for the requested step."""


class EmptyTraceError(ValueError):
    pass


def route(k: int, lagging: tuple[int, ...] | list[int]) -> int:
    """Index of the largest adapter lagging value not exceeding ``k``."""
    if k < lagging[0]:
        raise RoutingError(f"lagging {k} is below the smallest adapter lagging {lagging[0]}")
    return bisect.bisect_right(lagging, k) - 1


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    embed_dim: int = 64
    ffn_dim: int = 128
    num_layers: int = 2
    num_heads: int = 2
    dropout: float = 0.1
    adapter_lagging: tuple[int, ...] = (1, 3, 5, 7)
    adapter_bottleneck: int = 16
    # decoder layers (0-based) that carry adapters; None means all of them
    adapter_layers: tuple[int, ...] | None = None
    backbone_frozen: bool = False

    def __post_init__(self):
        self.adapter_lagging = tuple(int(k) for k in self.adapter_lagging)
        if self.adapter_layers is not None:
            self.adapter_layers = tuple(int(i) for i in self.adapter_layers)
        self.validate()

    def validate(self) -> None:
        ka = self.adapter_lagging
        if not ka or ka[0] != 1 or any(b <= a for a, b in zip(ka, ka[1:])):
            raise ValueError(f"adapter lagging must start at 1 and strictly increase, got {ka}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.adapter_bottleneck < 1:
            raise ValueError("adapter bottleneck must be at least 1")
        if min(self.src_vocab, self.tgt_vocab, self.num_layers, self.ffn_dim) < 1:
            raise ValueError("vocabulary sizes, layer count and ffn size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        for layer in self.adapter_layers or ():
            if not 0 <= layer < self.num_layers:
                raise ValueError(f"adapter layer {layer} outside [0, {self.num_layers})")

    @property
    def layers_with_adapters(self) -> tuple[int, ...]:
        if self.adapter_layers is None:
            return tuple(range(self.num_layers))
        return tuple(sorted(self.adapter_layers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapter_lagging"] = list(self.adapter_lagging)
        if self.adapter_layers is not None:
            d["adapter_layers"] = list(self.adapter_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["adapter_lagging"] = tuple(d["adapter_lagging"])
        if d.get("adapter_layers") is not None:
            d["adapter_layers"] = tuple(d["adapter_layers"])
        return cls(**d)


def _sinusoid(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange((dim + 1) // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : dim // 2])
    return table


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nd.matmul(x, w) + b


@dataclass
class EncoderState:
    """Causal encoder states for the source prefix read so far.

    ``keys``/``values`` hold each encoder layer's self-attention projections
    (``(1, H, n, dh)``) so further tokens can be appended; ``z`` is the final
    encoder output, one row per position.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    z: np.ndarray
    tokens: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS


class SimtModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._pos = _sinusoid(256, config.embed_dim)
        self._build(np.random.default_rng(seed))
        self.apply_freeze()

    # -------------------------------------------------------------- parameters

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _xavier(self, rng, fan_in: int, fan_out: int) -> np.ndarray:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    def _add_attention(self, rng, prefix: str) -> None:
        d = self.config.embed_dim
        for proj in ("q", "k", "v", "o"):
            self._add(f"{prefix}.w{proj}", self._xavier(rng, d, d))
            self._add(f"{prefix}.b{proj}", np.zeros(d))

    def _add_norm(self, prefix: str) -> None:
        self._add(f"{prefix}.g", np.ones(self.config.embed_dim))
        self._add(f"{prefix}.b", np.zeros(self.config.embed_dim))

    def _add_ffn(self, rng, prefix: str) -> None:
        d, f = self.config.embed_dim, self.config.ffn_dim
        self._add(f"{prefix}.w1", self._xavier(rng, d, f))
        self._add(f"{prefix}.b1", np.zeros(f))
        self._add(f"{prefix}.w2", self._xavier(rng, f, d))
        self._add(f"{prefix}.b2", np.zeros(d))

    def _build(self, rng: np.random.Generator) -> None:
        c = self.config
        d = c.embed_dim
        self._add("enc.emb", rng.normal(0.0, d**-0.5, size=(c.src_vocab, d)))
        self._add("dec.emb", rng.normal(0.0, d**-0.5, size=(c.tgt_vocab, d)))
        for l in range(c.num_layers):
            self._add_norm(f"enc.{l}.ln1")
            self._add_attention(rng, f"enc.{l}.self")
            self._add_norm(f"enc.{l}.ln2")
            self._add_ffn(rng, f"enc.{l}.ffn")
        self._add_norm("enc.ln")
        for l in range(c.num_layers):
            self._add_norm(f"dec.{l}.ln1")
            self._add_attention(rng, f"dec.{l}.self")
            self._add_norm(f"dec.{l}.ln2")
            self._add_attention(rng, f"dec.{l}.cross")
            self._add_norm(f"dec.{l}.ln3")
            self._add_ffn(rng, f"dec.{l}.ffn")
        self._add_norm("dec.ln")
        for l in c.layers_with_adapters:
            for ka in c.adapter_lagging:
                p = self.adapter_prefix(l, ka)
                self._add_norm(f"{p}.ln")
                self._add(f"{p}.down_w", rng.normal(0.0, 0.01, size=(d, c.adapter_bottleneck)))
                self._add(f"{p}.down_b", np.zeros(c.adapter_bottleneck))
                # zero up-projection: a fresh adapter is the identity map
                self._add(f"{p}.up_w", np.zeros((c.adapter_bottleneck, d)))
                self._add(f"{p}.up_b", np.zeros(d))

    @staticmethod
    def adapter_prefix(layer: int, lagging: int) -> str:
        return f"dec.{layer}.adapter.k{lagging}"

    @staticmethod
    def is_adapter_param(name: str) -> bool:
        return ".adapter." in name

    def adapter_params(self, lagging: int | None = None) -> dict[str, Tensor]:
        tag = None if lagging is None else f".adapter.k{lagging}."
        return {
            n: p
            for n, p in self.params.items()
            if self.is_adapter_param(n) and (tag is None or tag in n + ".")
        }

    def backbone_params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if not self.is_adapter_param(n)}

    def apply_freeze(self) -> None:
        frozen = self.config.backbone_frozen
        for name, p in self.params.items():
            p.requires_grad = self.is_adapter_param(name) or not frozen

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def has_adapters(self) -> bool:
        return bool(self.config.layers_with_adapters)

    def route(self, k: int) -> int:
        return route(k, self.config.adapter_lagging)

    def route_lagging(self, k: int) -> int:
        return self.config.adapter_lagging[self.route(k)]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # ---------------------------------------------------------------- blocks

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return nd.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _proj(self, x: Tensor, prefix: str, which: str) -> Tensor:
        return _linear(x, self.params[f"{prefix}.w{which}"], self.params[f"{prefix}.b{which}"])

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.config.num_heads
        return nd.transpose(x.reshape(b, t, h, d // h), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, h, t, dh = x.shape
        return nd.transpose(x, (0, 2, 1, 3)).reshape(b, t, h * dh)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
        dh = self.config.embed_dim // self.config.num_heads
        scores = nd.matmul(q, nd.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        return nd.mix(nd.softmax(scores, axis=-1), v)

    def _ffn(self, x: Tensor, prefix: str, rng) -> Tensor:
        p = self.params
        hidden = nd.relu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        hidden = nd.dropout(hidden, self.config.dropout, rng)
        return _linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def adapter(self, h: Tensor, layer: int, lagging: int) -> Tensor:
        """Bottleneck adapter output (before the residual addition)."""
        p = self.params
        pre = self.adapter_prefix(layer, lagging)
        x = self._norm(h, f"{pre}.ln")
        x = nd.relu(_linear(x, p[f"{pre}.down_w"], p[f"{pre}.down_b"]))
        return _linear(x, p[f"{pre}.up_w"], p[f"{pre}.up_b"])

    def _embed(self, table: str, ids: np.ndarray, offset: int = 0) -> Tensor:
        d = self.config.embed_dim
        n = ids.shape[-1]
        if offset + n > self._pos.shape[0]:
            self._pos = _sinusoid(2 * (offset + n), d)
        emb = nd.embedding(self.params[table], ids) * math.sqrt(d)
        return emb + self._pos[offset : offset + n]

    # --------------------------------------------------------------- encoder

    def _check_src(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.src_vocab):
            raise ValueError(f"source id outside vocabulary [0, {self.config.src_vocab})")

    def _encode_batch(self, src: np.ndarray, src_lens: np.ndarray, rng=None, collect=None) -> Tensor:
        c = self.config
        b, s = src.shape
        causal = np.triu(np.full((s, s), -np.inf), 1)
        pad = np.where(np.arange(s)[None, :] < np.asarray(src_lens)[:, None], 0.0, -np.inf)
        mask = causal[None, None] + pad[:, None, None, :]
        h = nd.dropout(self._embed("enc.emb", src), c.dropout, rng)
        for l in range(c.num_layers):
            pre = f"enc.{l}"
            x = self._norm(h, f"{pre}.ln1")
            q = self._split(self._proj(x, f"{pre}.self", "q"))
            k = self._split(self._proj(x, f"{pre}.self", "k"))
            v = self._split(self._proj(x, f"{pre}.self", "v"))
            if collect is not None:
                collect.append((k.data, v.data))
            a = self._proj(self._merge(self._attend(q, k, v, mask)), f"{pre}.self", "o")
            h = h + nd.dropout(a, c.dropout, rng)
            h = h + nd.dropout(self._ffn(self._norm(h, f"{pre}.ln2"), f"{pre}.ffn", rng), c.dropout, rng)
        return self._norm(h, "enc.ln")

    def empty_state(self) -> EncoderState:
        c = self.config
        h, dh = c.num_heads, c.embed_dim // c.num_heads
        blank = np.zeros((1, h, 0, dh))
        return EncoderState(
            [blank] * c.num_layers, [blank] * c.num_layers, np.zeros((0, c.embed_dim)), []
        )

    def encode(self, src_ids) -> EncoderState:
        """One-shot causal encoding of a whole (single) source sequence."""
        ids = np.asarray(src_ids, dtype=np.int64)
        self._check_src(ids)
        if ids.size == 0:
            return self.empty_state()
        collect: list = []
        with nd.no_grad(), nd.deterministic():
            z = self._encode_batch(ids[None, :], np.array([ids.size]), None, collect)
        return EncoderState([k for k, _ in collect], [v for _, v in collect], z.data[0], list(map(int, ids)))

    def encode_append(self, state: EncoderState, token: int) -> EncoderState:
        """Extend the encoder states by one source token."""
        if not 0 <= int(token) < self.config.src_vocab:
            raise ValueError(f"source id {token} outside vocabulary [0, {self.config.src_vocab})")
        c = self.config
        pos = len(state)
        keys, values = [], []
        with nd.no_grad(), nd.deterministic():
            h = self._embed("enc.emb", np.array([[int(token)]]), offset=pos)
            for l in range(c.num_layers):
                pre = f"enc.{l}"
                x = self._norm(h, f"{pre}.ln1")
                q = self._split(self._proj(x, f"{pre}.self", "q"))
                k = self._split(self._proj(x, f"{pre}.self", "k"))
                v = self._split(self._proj(x, f"{pre}.self", "v"))
                kk = np.concatenate([state.keys[l], k.data], axis=2)
                vv = np.concatenate([state.values[l], v.data], axis=2)
                keys.append(kk)
                values.append(vv)
                a = self._proj(self._merge(self._attend(q, Tensor(kk), Tensor(vv), None)), f"{pre}.self", "o")
                h = h + a
                h = h + self._ffn(self._norm(h, f"{pre}.ln2"), f"{pre}.ffn", None)
            z = self._norm(h, "enc.ln").data[0]
        return EncoderState(keys, values, np.concatenate([state.z, z], axis=0), state.tokens + [int(token)])

    # --------------------------------------------------------------- decoder

    def _decoder_layer(
        self,
        l: int,
        h: Tensor,
        self_kv: tuple[Tensor, Tensor] | None,
        self_mask,
        cross_kv: tuple[Tensor, Tensor],
        cross_mask,
        adapter_k: int | None,
        rng,
        record: dict | None,
    ) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
        c = self.config
        pre = f"dec.{l}"
        x = self._norm(h, f"{pre}.ln1")
        q = self._split(self._proj(x, f"{pre}.self", "q"))
        k = self._split(self._proj(x, f"{pre}.self", "k"))
        v = self._split(self._proj(x, f"{pre}.self", "v"))
        new_kv = (k.data, v.data)
        if self_kv is not None:
            k = Tensor(np.concatenate([self_kv[0], k.data], axis=2))
            v = Tensor(np.concatenate([self_kv[1], v.data], axis=2))
        a = self._proj(self._merge(self._attend(q, k, v, self_mask)), f"{pre}.self", "o")
        h = h + nd.dropout(a, c.dropout, rng)
        x = self._norm(h, f"{pre}.ln2")
        q = self._split(self._proj(x, f"{pre}.cross", "q"))
        a = self._proj(self._merge(self._attend(q, cross_kv[0], cross_kv[1], cross_mask)), f"{pre}.cross", "o")
        h = h + nd.dropout(a, c.dropout, rng)
        h = h + nd.dropout(self._ffn(self._norm(h, f"{pre}.ln3"), f"{pre}.ffn", rng), c.dropout, rng)
        if adapter_k is not None and l in c.layers_with_adapters:
            out = self.adapter(h, l, adapter_k)
            if record is not None:
                record[l] = np.sqrt((out.data * out.data).sum(axis=-1))
            h = h + out
        return h, new_kv

    def _cross_kv(self, z: Tensor, l: int) -> tuple[Tensor, Tensor]:
        pre = f"dec.{l}.cross"
        return self._split(self._proj(z, pre, "k")), self._split(self._proj(z, pre, "v"))

    def _logits(self, h: Tensor) -> Tensor:
        h = self._norm(h, "dec.ln")
        return nd.matmul(h, nd.transpose(self.params["dec.emb"], (1, 0)))

    def _adapter_lagging(self, k: int | None) -> int | None:
        if k is None or not self.has_adapters:
            return None
        return self.route_lagging(k)

    def _decode_batch(self, z: Tensor, tgt_in: np.ndarray, visible: np.ndarray, adapter_k, rng=None, record=None) -> Tensor:
        """Teacher-forced logits; row ``t`` of sentence ``b`` sees ``visible[b, t]`` source positions."""
        c = self.config
        b, t = tgt_in.shape
        s = z.shape[1]
        self_mask = np.triu(np.full((t, t), -np.inf), 1)[None, None]
        cross = np.where(np.arange(s)[None, None, :] < visible[:, :, None], 0.0, -np.inf)
        cross_mask = cross[:, None]
        h = nd.dropout(self._embed("dec.emb", tgt_in), c.dropout, rng)
        for l in range(c.num_layers):
            h, _ = self._decoder_layer(l, h, None, self_mask, self._cross_kv(z, l), cross_mask, adapter_k, rng, record)
        return self._logits(h)

    @staticmethod
    def visibility(src_lens: np.ndarray, num_steps: int, k: int) -> np.ndarray:
        t = np.arange(1, num_steps + 1)[None, :]
        return np.minimum(np.asarray(src_lens)[:, None], t + k - 1)

    def forward_logits(self, batch: Batch, k: int, rng=None) -> Tensor:
        z = self._encode_batch(batch.src, batch.src_lens, rng)
        vis = self.visibility(batch.src_lens, batch.tgt_in.shape[1], k)
        return self._decode_batch(z, batch.tgt_in, vis, self._adapter_lagging(k), rng)

    def forward_train(self, batch: Batch, k: int, rng=None, epsilon: float = 0.1) -> Tensor:
        """Label-smoothed teacher-forced loss under wait-``k`` cross-attention masks.

        Only the adapters of ``route(k)`` enter the graph. Pass ``rng`` to
        enable dropout.
        """
        if k < 1:
            raise ValueError(f"lagging must be at least 1, got {k}")
        logits = self.forward_logits(batch, k, rng)
        mask = batch.tgt_out != PAD
        return nd.cross_entropy_label_smoothed(logits, batch.tgt_out, epsilon, mask)

    def forward_train_full(self, batch: Batch, rng=None, epsilon: float = 0.1) -> Tensor:
        """Loss with unrestricted (padding-only) cross-attention, largest adapter."""
        z = self._encode_batch(batch.src, batch.src_lens, rng)
        t = batch.tgt_in.shape[1]
        vis = np.repeat(np.asarray(batch.src_lens)[:, None], t, axis=1)
        adapter_k = self.config.adapter_lagging[-1] if self.has_adapters else None
        logits = self._decode_batch(z, batch.tgt_in, vis, adapter_k, rng)
        return nd.cross_entropy_label_smoothed(logits, batch.tgt_out, epsilon, batch.tgt_out != PAD)

    # ------------------------------------------------------------- inference

    def decode_step(self, state: EncoderState, prefix, k: int, t: int | None = None, visible=None) -> np.ndarray:
        """Next-token distribution recomputed from scratch over ``prefix``.

        ``prefix`` holds the target ids emitted so far (no BOS), so the step
        is ``t = len(prefix) + 1``. Row ``t'`` sees ``g_k(t')`` encoder
        positions unless ``visible`` gives explicit per-row counts.
        """
        if k < 1:
            raise ValueError(f"lagging must be at least 1, got {k}")
        prefix = [int(i) for i in prefix]
        if t is None:
            t = len(prefix) + 1
        if t != len(prefix) + 1:
            raise ValueError(f"step {t} does not follow a prefix of length {len(prefix)}")
        n = len(state)
        if visible is None:
            need = t + k - 1
            if n < need and not state.finished:
                raise PreconditionError(f"step {t} at wait-{k} needs {need} source positions, have {n}")
            visible = [min(n, s + k - 1) for s in range(1, t + 1)]
        visible = np.asarray(visible, dtype=np.int64)
        if visible.shape != (t,) or visible.min() < 1 or visible.max() > n:
            raise PreconditionError(f"visibility {visible.tolist()} not satisfiable with {n} encoder positions")
        tgt_in = np.array([[BOS] + prefix])
        with nd.no_grad(), nd.deterministic():
            logits = self._decode_batch(Tensor(state.z[None]), tgt_in, visible[None], self._adapter_lagging(k))
            return nd.softmax(Tensor(logits.data[0, -1]), axis=-1).data

    def incremental(self, state: EncoderState | None = None, record_norms: bool = False) -> "IncrementalDecoder":
        return IncrementalDecoder(self, state if state is not None else self.empty_state(), record_norms)

    # ----------------------------------------------------------- state dicts

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)


class IncrementalDecoder:
    """Streaming decoder over a growing encoder state.

    :meth:`query` scores the next target position given how many source
    positions are visible and which lagging selects the adapter; nothing is
    cached until :meth:`commit` writes a token. Committed positions keep the
    visibility they were computed with, exactly like the per-row masks used
    in training.
    """

    def __init__(self, model: SimtModel, state: EncoderState, record_norms: bool = False):
        self.model = model
        self.state = state
        c = model.config
        h, dh = c.num_heads, c.embed_dim // c.num_heads
        blank = np.zeros((1, h, 0, dh))
        self.self_kv = [(blank, blank) for _ in range(c.num_layers)]
        self.cross_k = [blank for _ in range(c.num_layers)]
        self.cross_v = [blank for _ in range(c.num_layers)]
        self.prefix: list[int] = []
        self.record_norms = record_norms
        self.norms: list[dict[int, float]] = []
        self._pending = None

    @property
    def num_read(self) -> int:
        return len(self.state)

    def append_source(self, token: int) -> None:
        self.state = self.model.encode_append(self.state, token)
        self._pending = None

    def _extend_cross(self, upto: int) -> None:
        z = self.state.z
        for l in range(self.model.config.num_layers):
            have = self.cross_k[l].shape[2]
            if have >= upto:
                continue
            k, v = self.model._cross_kv(Tensor(z[None, have:upto]), l)
            self.cross_k[l] = np.concatenate([self.cross_k[l], k.data], axis=2)
            self.cross_v[l] = np.concatenate([self.cross_v[l], v.data], axis=2)

    def query(self, visible: int, k: int) -> np.ndarray:
        """Distribution for the next target position."""
        model = self.model
        if not 1 <= visible <= len(self.state):
            raise PreconditionError(f"cannot show {visible} source positions, {len(self.state)} read")
        token = self.prefix[-1] if self.prefix else BOS
        record = {} if self.record_norms else None
        adapter_k = model._adapter_lagging(k)
        new_kv = []
        with nd.no_grad(), nd.deterministic():
            self._extend_cross(len(self.state))
            h = model._embed("dec.emb", np.array([[token]]), offset=len(self.prefix))
            for l in range(model.config.num_layers):
                cross = (Tensor(self.cross_k[l][:, :, :visible]), Tensor(self.cross_v[l][:, :, :visible]))
                h, kv = model._decoder_layer(l, h, self.self_kv[l], None, cross, None, adapter_k, None, record)
                new_kv.append(kv)
            probs = nd.softmax(Tensor(model._logits(h).data[0, -1]), axis=-1).data
        norms = {l: float(v.reshape(-1)[0]) for l, v in (record or {}).items()}
        self._pending = (new_kv, norms)
        return probs

    def commit(self, token: int) -> None:
        if self._pending is None:
            raise RuntimeError("commit without a preceding query")
        new_kv, norms = self._pending
        for l, (k, v) in enumerate(new_kv):
            sk, sv = self.self_kv[l]
            self.self_kv[l] = (np.concatenate([sk, k], axis=2), np.concatenate([sv, v], axis=2))
        self.prefix.append(int(token))
        if self.record_norms:
            self.norms.append(norms)
        self._pending = None


def adapter_norms(traces: list[list[dict[int, float]]], layers: tuple[int, ...]) -> np.ndarray:
    """Per-layer mean adapter-output L2 norm.

    ``traces`` holds, per sentence, the per-step ``{layer: norm}`` records of
    an :class:`IncrementalDecoder`; steps are averaged within a sentence and
    sentences are then averaged.
    """
    per_sentence = []
    for steps in traces:
        if steps:
            per_sentence.append([np.mean([s[l] for s in steps]) for l in layers])
    if not per_sentence:
        raise EmptyTraceError("no decoding steps were recorded")
    return np.mean(np.array(per_sentence), axis=0)

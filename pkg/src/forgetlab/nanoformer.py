"""Tiny encoder-decoder transformer with a tagged parameter registry.

Every trainable tensor is addressed by a :class:`ParamTag` that records
which stack it lives in, which layer, which sublayer type and which role
it plays there. The tags drive freezing (by position or by type), the
importance maps and the checkpoint format.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


class ConfigError(ValueError):
    """Invalid configuration value (maps to CLI exit code 2)."""


class Side(str, enum.Enum):
    ENCODER = "Encoder"
    DECODER = "Decoder"


class Sublayer(str, enum.Enum):
    EMB = "Emb"
    SA = "SA"
    CA = "CA"
    FFN = "FFN"
    LN = "LN"
    OUT = "Out"


class Grouping(str, enum.Enum):
    POSITION = "position"
    TYPE = "type"


@dataclass(frozen=True)
class ParamTag:
    side: Side
    layer: int | None
    sublayer: Sublayer
    role: str

    def __post_init__(self):
        if self.sublayer is Sublayer.CA and self.side is not Side.DECODER:
            raise ConfigError("cross-attention parameters only exist in the decoder")
        if self.sublayer is Sublayer.OUT and (self.side is not Side.DECODER or self.layer is not None):
            raise ConfigError("output-layer parameters live in the decoder with no layer index")

    @property
    def host(self) -> Sublayer:
        """Sublayer a layer-norm parameter belongs to (itself otherwise)."""
        if self.sublayer is not Sublayer.LN:
            return self.sublayer
        prefix = self.role.split(".", 1)[0]
        if prefix == "final":
            return Sublayer.FFN
        return Sublayer(prefix)

    def key(self) -> str:
        layer = "-" if self.layer is None else str(self.layer)
        return f"{self.side.value}/{layer}/{self.sublayer.value}/{self.role}"

    def __str__(self) -> str:
        return self.key()

    @classmethod
    def parse(cls, key: str) -> "ParamTag":
        try:
            side, layer, sub, role = key.split("/", 3)
            return cls(Side(side), None if layer == "-" else int(layer), Sublayer(sub), role)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"malformed parameter tag {key!r}") from exc


@dataclass
class ModelConfig:
    num_layers: int = 2
    d_model: int = 32
    d_ffn: int = 64
    num_heads: int = 4
    src_vocab: int = 64
    tgt_vocab: int = 64
    max_len: int = 32
    dropout: float = 0.0
    seed: int = 0
    pre_norm: bool = True

    def validate(self) -> "ModelConfig":
        for name in ("num_layers", "d_model", "d_ffn", "num_heads", "src_vocab", "tgt_vocab", "max_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.num_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """The 32/64 width preset used for the analysis runs."""
    base = dict(num_layers=2, d_model=32, d_ffn=64, num_heads=4)
    base.update(overrides)
    return ModelConfig(**base).validate()


_ATTN_ROLES = ("q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias", "o.weight", "o.bias")
_FFN_ROLES = ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias")


def _param_layout(cfg: ModelConfig) -> list[tuple[ParamTag, tuple[int, ...]]]:
    d, f, n = cfg.d_model, cfg.d_ffn, cfg.num_layers
    enc, dec = Side.ENCODER, Side.DECODER
    out: list[tuple[ParamTag, tuple[int, ...]]] = [
        (ParamTag(enc, None, Sublayer.EMB, "token"), (cfg.src_vocab, d)),
        (ParamTag(enc, None, Sublayer.EMB, "position"), (cfg.max_len, d)),
        (ParamTag(dec, None, Sublayer.EMB, "token"), (cfg.tgt_vocab, d)),
        (ParamTag(dec, None, Sublayer.EMB, "position"), (cfg.max_len, d)),
    ]

    def attn(side, layer, sub):
        for role in _ATTN_ROLES:
            out.append((ParamTag(side, layer, sub, role), (d, d) if role.endswith("weight") else (d,)))
        out.append((ParamTag(side, layer, Sublayer.LN, f"{sub.value}.gain"), (d,)))
        out.append((ParamTag(side, layer, Sublayer.LN, f"{sub.value}.bias"), (d,)))

    def ffn(side, layer):
        shapes = {"fc1.weight": (d, f), "fc1.bias": (f,), "fc2.weight": (f, d), "fc2.bias": (d,)}
        for role in _FFN_ROLES:
            out.append((ParamTag(side, layer, Sublayer.FFN, role), shapes[role]))
        out.append((ParamTag(side, layer, Sublayer.LN, "FFN.gain"), (d,)))
        out.append((ParamTag(side, layer, Sublayer.LN, "FFN.bias"), (d,)))

    for layer in range(n):
        attn(enc, layer, Sublayer.SA)
        ffn(enc, layer)
    for layer in range(n):
        attn(dec, layer, Sublayer.SA)
        attn(dec, layer, Sublayer.CA)
        ffn(dec, layer)
    if cfg.pre_norm:
        # final norm of each stack; filed under the top layer
        out.append((ParamTag(enc, n - 1, Sublayer.LN, "final.gain"), (d,)))
        out.append((ParamTag(enc, n - 1, Sublayer.LN, "final.bias"), (d,)))
        out.append((ParamTag(dec, n - 1, Sublayer.LN, "final.gain"), (d,)))
        out.append((ParamTag(dec, n - 1, Sublayer.LN, "final.bias"), (d,)))
    out.append((ParamTag(dec, None, Sublayer.OUT, "W_o"), (d, cfg.tgt_vocab)))
    out.append((ParamTag(dec, None, Sublayer.OUT, "b_o"), (cfg.tgt_vocab,)))
    return out


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``cfg``."""
    d, f, n = cfg.d_model, cfg.d_ffn, cfg.num_layers
    attn = 4 * (d * d + d) + 2 * d
    ffn = 2 * d * f + f + d + 2 * d
    emb = (cfg.src_vocab + cfg.tgt_vocab) * d + 2 * cfg.max_len * d
    final_ln = 4 * d if cfg.pre_norm else 0
    out = d * cfg.tgt_vocab + cfg.tgt_vocab
    return emb + n * (attn + ffn) + n * (2 * attn + ffn) + final_ln + out


class Model:
    """Parameter container plus the forward computation."""

    def __init__(self, config: ModelConfig, params: dict[ParamTag, Tensor]):
        self.config = config
        self.params = params
        self._by_key = {t.key(): t for t in params}

    def __getitem__(self, tag: ParamTag | str) -> Tensor:
        if isinstance(tag, str):
            tag = self.tag(tag)
        return self.params[tag]

    def tag(self, key: str) -> ParamTag:
        try:
            return self._by_key[key]
        except KeyError:
            raise ConfigError(f"unknown parameter tag {key!r}") from None

    def tags(self) -> list[ParamTag]:
        return list(self.params)

    def named_parameters(self) -> Iterator[tuple[ParamTag, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {t.key(): p.data.copy() for t, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for t, p in self.params.items():
            arr = np.asarray(state[t.key()], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"shape mismatch for {t.key()}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    # ---------------------------------------------------------------- forward

    def _p(self, side, layer, sub, role) -> Tensor:
        return self.params[ParamTag(side, layer, sub, role)]

    def _attn_block(self, side, layer, sub, x, mem, mask, rng):
        p = lambda role: self._p(side, layer, sub, role)
        h = self.config.num_heads
        q = nd.split_heads(nd.linear(x, p("q.weight"), p("q.bias")), h)
        k = nd.split_heads(nd.linear(mem, p("k.weight"), p("k.bias")), h)
        v = nd.split_heads(nd.linear(mem, p("v.weight"), p("v.bias")), h)
        a = nd.merge_heads(nd.attention(q, k, v, mask))
        out = nd.linear(a, p("o.weight"), p("o.bias"))
        return nd.dropout(out, self.config.dropout, rng)

    def _ffn_block(self, side, layer, x, rng):
        p = lambda role: self._p(side, layer, Sublayer.FFN, role)
        hdn = nd.relu(nd.linear(x, p("fc1.weight"), p("fc1.bias")))
        hdn = nd.dropout(hdn, self.config.dropout, rng)
        return nd.dropout(nd.linear(hdn, p("fc2.weight"), p("fc2.bias")), self.config.dropout, rng)

    def _ln(self, side, layer, host: str, x):
        return nd.layer_norm(
            x,
            self._p(side, layer, Sublayer.LN, f"{host}.gain"),
            self._p(side, layer, Sublayer.LN, f"{host}.bias"),
        )

    def _sublayer(self, side, layer, host, x, fn):
        if self.config.pre_norm:
            return nd.add(x, fn(self._ln(side, layer, host, x)))
        return self._ln(side, layer, host, nd.add(x, fn(x)))

    def _embed(self, side, ids, rng):
        t = ids.shape[1]
        tok = nd.embedding(self._p(side, None, Sublayer.EMB, "token"), ids)
        pos = nd.embedding(self._p(side, None, Sublayer.EMB, "position"), np.broadcast_to(np.arange(t), ids.shape))
        return nd.dropout(nd.add(tok, pos), self.config.dropout, rng)

    def encode(self, src: np.ndarray, rng=None) -> tuple[Tensor, np.ndarray]:
        cfg = self.config
        key_mask = (src != PAD_ID)[:, None, None, :]
        x = self._embed(Side.ENCODER, src, rng)
        for layer in range(cfg.num_layers):
            x = self._sublayer(
                Side.ENCODER, layer, "SA", x,
                lambda z: self._attn_block(Side.ENCODER, layer, Sublayer.SA, z, z, key_mask, rng),
            )
            x = self._sublayer(Side.ENCODER, layer, "FFN", x, lambda z: self._ffn_block(Side.ENCODER, layer, z, rng))
        if cfg.pre_norm:
            x = self._ln(Side.ENCODER, cfg.num_layers - 1, "final", x)
        return x, key_mask

    def decode(self, memory: Tensor, src_mask: np.ndarray, tgt_in: np.ndarray, rng=None) -> Tensor:
        cfg = self.config
        t = tgt_in.shape[1]
        causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
        y = self._embed(Side.DECODER, tgt_in, rng)
        for layer in range(cfg.num_layers):
            y = self._sublayer(
                Side.DECODER, layer, "SA", y,
                lambda z: self._attn_block(Side.DECODER, layer, Sublayer.SA, z, z, causal, rng),
            )
            y = self._sublayer(
                Side.DECODER, layer, "CA", y,
                lambda z: self._attn_block(Side.DECODER, layer, Sublayer.CA, z, memory, src_mask, rng),
            )
            y = self._sublayer(Side.DECODER, layer, "FFN", y, lambda z: self._ffn_block(Side.DECODER, layer, z, rng))
        if cfg.pre_norm:
            y = self._ln(Side.DECODER, cfg.num_layers - 1, "final", y)
        return y

    def project(self, states: Tensor) -> Tensor:
        """Output layer: ``W_o s_i + b_o`` for every decoder state."""
        return nd.linear(
            states,
            self._p(Side.DECODER, None, Sublayer.OUT, "W_o"),
            self._p(Side.DECODER, None, Sublayer.OUT, "b_o"),
        )


def _check_ids(ids: np.ndarray, vocab: int, max_len: int, what: str) -> None:
    if ids.shape[-1] > max_len:
        raise ValueError(f"{what} length {ids.shape[-1]} exceeds max_len={max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"{what} contains ids outside [0, {vocab})")


def build_model(config: ModelConfig) -> Model:
    """Seeded Glorot-uniform init; biases and LN shifts 0, LN gains 1."""
    config = copy.deepcopy(config).validate()
    rng = np.random.default_rng(config.seed)
    params: dict[ParamTag, Tensor] = {}
    for tag, shape in _param_layout(config):
        if tag.sublayer is Sublayer.LN:
            data = np.ones(shape) if tag.role.endswith("gain") else np.zeros(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        params[tag] = Tensor(data, requires_grad=True)
    return Model(config, params)


def forward(model: Model, src_ids, tgt_prefix_ids, *, return_hidden: bool = False, rng=None):
    """Logits for every target position given source and target prefix.

    Accepts a single sentence (1-D id arrays, logits ``(I, V)``) or a padded
    batch (2-D arrays, logits ``(B, I, V)``).
    """
    src = np.asarray(src_ids, dtype=np.int64)
    tgt = np.asarray(tgt_prefix_ids, dtype=np.int64)
    single = src.ndim == 1
    if single:
        src, tgt = src[None], tgt[None]
    cfg = model.config
    _check_ids(src, cfg.src_vocab, cfg.max_len, "source")
    _check_ids(tgt, cfg.tgt_vocab, cfg.max_len, "target prefix")
    memory, mask = model.encode(src, rng)
    states = model.decode(memory, mask, tgt, rng)
    logits = model.project(states)
    if single:
        logits = nd.reshape(logits, logits.shape[1:])
        states = nd.reshape(states, states.shape[1:])
    return (logits, states) if return_hidden else logits


def loss_on_batch(model: Model, batch, rng=None) -> Tensor:
    """Mean per-token cross-entropy over non-pad targets (teacher forcing)."""
    logits = forward(model, batch.src, batch.tgt_in, rng=rng)
    return nd.cross_entropy(logits, batch.tgt_out, pad_id=PAD_ID)


# ------------------------------------------------------------------ grouping


def _pair_name(prefix: str, layer: int, n: int) -> str:
    lo = layer - layer % 2
    hi = min(lo + 1, n - 1)
    return f"{prefix}_{lo}{hi}" if hi != lo else f"{prefix}_{lo}"


def enumerate_groups(
    model_or_config, grouping: Grouping | str, attach_ln: bool = True
) -> list[tuple[str, frozenset[ParamTag]]]:
    """Module groups used by the freeze/update strategies.

    ``position``: pairs of consecutive layers per stack (``Enc_01``, ...),
    a trailing singleton when the layer count is odd, then ``Dec_out``.
    ``type``: ``Emb(enc)``, ``Emb(dec)``, ``SA(enc)``, ``SA(dec)``, ``CA``,
    ``FFN(enc)``, ``FFN(dec)``, ``Out``.

    With ``attach_ln`` layer-norm parameters join their host sublayer's
    group; otherwise they belong to no group.
    """
    cfg = model_or_config.config if isinstance(model_or_config, Model) else model_or_config
    grouping = Grouping(grouping)
    n = cfg.num_layers
    groups: dict[str, set[ParamTag]] = {}
    for tag, _ in _param_layout(cfg):
        if tag.sublayer is Sublayer.LN and not attach_ln:
            continue
        if grouping is Grouping.POSITION:
            if tag.sublayer is Sublayer.EMB:
                continue
            if tag.sublayer is Sublayer.OUT:
                name = "Dec_out"
            else:
                prefix = "Enc" if tag.side is Side.ENCODER else "Dec"
                name = _pair_name(prefix, tag.layer, n)
        else:
            host = tag.host
            if host is Sublayer.OUT:
                name = "Out"
            elif host is Sublayer.CA:
                name = "CA"
            else:
                name = f"{host.value}({'enc' if tag.side is Side.ENCODER else 'dec'})"
        groups.setdefault(name, set()).add(tag)
    if grouping is Grouping.POSITION:
        order = [k for k in groups if k.startswith("Enc")] + [
            k for k in groups if k.startswith("Dec") and k != "Dec_out"
        ] + ["Dec_out"]
    else:
        order = [k for k in ("Emb(enc)", "Emb(dec)", "SA(enc)", "SA(dec)", "CA", "FFN(enc)", "FFN(dec)", "Out") if k in groups]
    return [(k, frozenset(groups[k])) for k in order]


def resolve_group(model: Model, name: str, attach_ln: bool = True) -> frozenset[ParamTag]:
    """Tags of the group ``name`` in either grouping, or a single tag key."""
    valid = []
    for grouping in Grouping:
        for gname, tags in enumerate_groups(model, grouping, attach_ln):
            if gname == name:
                return tags
            valid.append(gname)
    if name in model._by_key:
        return frozenset([model._by_key[name]])
    raise ConfigError(f"unknown group {name!r}; valid groups: {', '.join(valid)}")


# ---------------------------------------------------------------- checkpoint

MAGIC = b"FGLCKPT\x00"
FORMAT_VERSION = 1


def _pack_section(arrays: dict[str, np.ndarray], offset: int) -> tuple[list[dict], list[bytes]]:
    entries, blobs = [], []
    for key in arrays:
        arr = np.ascontiguousarray(arrays[key], dtype="<f8")
        raw = arr.tobytes(order="C")
        entries.append({"key": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    return entries, blobs


def write_container(path, config: ModelConfig, sections: dict[str, dict[str, np.ndarray]], meta: dict | None = None) -> None:
    """Self-describing little-endian container.

    Layout: 8-byte magic, uint64 header length, canonical JSON header, then
    the raw float64 payloads in header order. Offsets are relative to the
    end of the header.
    """
    header: dict = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "meta": meta or {},
        "sections": {},
    }
    blobs: list[bytes] = []
    offset = 0
    for name, arrays in sections.items():
        entries, raw = _pack_section(arrays, offset)
        header["sections"][name] = entries
        blobs.extend(raw)
        offset += sum(len(b) for b in raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for b in blobs:
        buf.write(b)
    Path(path).write_bytes(buf.getvalue())


def read_container(path) -> tuple[ModelConfig, dict[str, dict[str, np.ndarray]], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a forgetlab checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    base = 16 + hlen
    sections = {}
    for name, entries in header["sections"].items():
        arrays = {}
        for e in entries:
            start = base + e["offset"]
            arr = np.frombuffer(raw[start : start + e["nbytes"]], dtype="<f8").reshape(e["shape"])
            arrays[e["key"]] = arr.astype(np.float64)
        sections[name] = arrays
    return ModelConfig.from_dict(header["config"]), sections, header.get("meta", {})


def save_checkpoint(model: Model, path, importance: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    sections = {"params": model.state_dict()}
    if importance is not None:
        sections["importance"] = importance
    write_container(path, model.config, sections, meta)


def load_checkpoint(path) -> Model:
    config, sections, _ = read_container(path)
    model = build_model(config)
    model.load_state_dict(sections["params"])
    return model

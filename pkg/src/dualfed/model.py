"""Frozen encoder plus the dual-adapter knowledge integrator.

The encoder is a small feed-forward network whose parameters never receive
gradients. After a configurable set of encoder layers the representation
``h`` is refined by two bottleneck adapters:

* the domain-invariant adapter, shared through the server, and
* the domain-aware adapter, kept by the client and optionally passed
  through a multi-head self-attention fusion over the token pair
  ``[A_dw(h); h]``.

The refined representation is ``h + (lam/2) A_dw_hat(h) + (lam/2) A_di(h)``
(or a learned projection of the concatenated adapter outputs).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParseError, ShapeError
from .tensor import Tensor

ADAPTER_MAGIC = b"ADP1"
ADAPTER_HEADER = struct.Struct("<4sIII")  # magic, d_h, rank, reserved
ADAPTER_HEADER_SIZE = ADAPTER_HEADER.size

NONLINEARITIES = {"gelu": T.gelu, "relu": T.relu, "identity": T.identity}


# ---------------------------------------------------------------- parameters


@dataclass
class BackboneParams:
    """Encoder layers ``(W, b)`` and a classification head. Always frozen."""

    layers: list[tuple[Tensor, Tensor]]
    head_w: Tensor
    head_b: Tensor
    activation: str = "gelu"

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def d_h(self) -> int:
        return self.head_w.shape[0]

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def init(cls, d_in: int, d_h: int, n_classes: int, n_layers: int = 2,
             rng: np.random.Generator | None = None, activation: str = "gelu") -> BackboneParams:
        rng = rng if rng is not None else np.random.default_rng(0)
        layers = []
        fan_in = d_in
        for _ in range(n_layers):
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, d_h))
            b = rng.normal(0.0, 0.1, size=d_h)
            layers.append((Tensor(w), Tensor(b)))
            fan_in = d_h
        head_w = rng.normal(0.0, math.sqrt(1.0 / d_h), size=(d_h, n_classes))
        return cls(layers, Tensor(head_w), Tensor(np.zeros(n_classes)), activation)

    def tensors(self) -> list[Tensor]:
        out = [t for pair in self.layers for t in pair]
        return out + [self.head_w, self.head_b]

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.tensors()]


@dataclass
class AdapterParams:
    """Bottleneck adapter ``act(h W_down + b_down) W_up + b_up``."""

    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor

    @property
    def d_h(self) -> int:
        return self.w_down.shape[0]

    @property
    def rank(self) -> int:
        return self.w_down.shape[1]

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.parameters())

    @classmethod
    def init(cls, d_h: int, rank: int, rng: np.random.Generator, trainable: bool = True) -> AdapterParams:
        if not 0 < rank < d_h:
            raise ConfigError(f"adapter rank must satisfy 0 < r < d_h, got r={rank}, d_h={d_h}",
                              field="model.rank")
        w_down = rng.normal(0.0, math.sqrt(1.0 / d_h), size=(d_h, rank))
        return cls(Tensor(w_down, trainable), Tensor(np.zeros(rank), trainable),
                   Tensor(np.zeros((rank, d_h)), trainable), Tensor(np.zeros(d_h), trainable))

    def parameters(self) -> list[Tensor]:
        return [self.w_down, self.b_down, self.w_up, self.b_up]

    def copy(self, trainable: bool | None = None) -> AdapterParams:
        ps = self.parameters()
        flags = [p.requires_grad if trainable is None else trainable for p in ps]
        return AdapterParams(*(Tensor(p.data.copy(), f) for p, f in zip(ps, flags)))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])


@dataclass
class FusionParams:
    """Pre-fusion layer norm and H-head attention projections over d_h."""

    ln_gain: Tensor
    ln_bias: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    heads: int

    @property
    def d_h(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, d_h: int, heads: int, rng: np.random.Generator, trainable: bool = True) -> FusionParams:
        if heads < 1 or d_h % heads:
            raise ConfigError(f"d_h={d_h} is not divisible by heads={heads}", field="model.heads")
        std = math.sqrt(1.0 / d_h)

        def proj():
            return Tensor(rng.normal(0.0, std, size=(d_h, d_h)), trainable)

        def zeros(*shape):
            return Tensor(np.zeros(shape), trainable)

        # zero output projection keeps the fused branch silent at start
        return cls(Tensor(np.ones(d_h), trainable), zeros(d_h),
                   proj(), zeros(d_h), proj(), zeros(d_h), proj(), zeros(d_h),
                   zeros(d_h, d_h), zeros(d_h), heads)

    def parameters(self) -> list[Tensor]:
        return [self.ln_gain, self.ln_bias, self.w_q, self.b_q, self.w_k, self.b_k,
                self.w_v, self.b_v, self.w_o, self.b_o]

    def copy(self) -> FusionParams:
        ps = [Tensor(p.data.copy(), p.requires_grad) for p in self.parameters()]
        return FusionParams(*ps, heads=self.heads)


@dataclass(frozen=True)
class FusionStrategy:
    variant: str = "weighted-sum"
    lam: float = 1.0

    def __post_init__(self):
        if self.variant not in ("weighted-sum", "concat-project"):
            raise ConfigError(f"unknown fusion variant {self.variant!r}", field="fusion.variant")
        if self.lam < 0:
            raise ConfigError("fusion weight must be nonnegative", field="fusion.lam")


def init_projection(d_h: int, trainable: bool = True) -> Tensor:
    """Concat projection ``P`` (2 d_h x d_h), started at ``[I/2; I/2]``."""
    eye = np.eye(d_h)
    return Tensor(np.concatenate([0.5 * eye, 0.5 * eye], axis=0), trainable)


# ---------------------------------------------------------------- forward ops


def backbone_forward(params: BackboneParams, x, upto: int | None = None) -> Tensor:
    """Encoder output after layer ``upto`` (default: last layer)."""
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ShapeError(f"backbone_forward: expected (batch, {params.d_in}), got {x.shape}")
    act = NONLINEARITIES[params.activation]
    last = params.n_layers - 1 if upto is None else upto
    h = x
    for w, b in params.layers[: last + 1]:
        h = act(h @ w + b)
    return h


def encoder_layer(params: BackboneParams, layer: int, h: Tensor) -> Tensor:
    w, b = params.layers[layer]
    return NONLINEARITIES[params.activation](h @ w + b)


def head_forward(params: BackboneParams, h: Tensor) -> Tensor:
    return h @ params.head_w + params.head_b


def adapter_forward(a: AdapterParams, h, nonlinearity: str = "gelu") -> Tensor:
    h = T.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != a.d_h:
        raise ShapeError(f"adapter_forward: expected (batch, {a.d_h}), got {h.shape}")
    z = NONLINEARITIES[nonlinearity](h @ a.w_down + a.b_down)
    return z @ a.w_up + a.b_up


def mhsa_fuse(f: FusionParams, a_dw_out, h, return_attention: bool = False):
    """Self-attention over the per-sample token pair ``[A_dw(h); h]``.

    Both tokens are layer-normalised, attended over by ``f.heads`` heads and
    projected; the output at the first token position is returned.
    """
    a_dw_out, h = T.as_tensor(a_dw_out), T.as_tensor(h)
    if a_dw_out.shape != h.shape or h.ndim != 2:
        raise ShapeError(f"mhsa_fuse: incompatible shapes {a_dw_out.shape} and {h.shape}")
    bsz, d = h.shape
    if d % f.heads:
        raise ConfigError(f"d_h={d} is not divisible by heads={f.heads}", field="model.heads")
    hd = d // f.heads
    # token-major rows: [0, bsz) is the adapter token, [bsz, 2 bsz) is h
    x = T.layer_norm(T.concat([a_dw_out, h], axis=0), f.ln_gain, f.ln_bias)

    def split(t, n_tok):
        return t.reshape(n_tok, bsz, f.heads, hd).transpose(1, 2, 0, 3)

    # only the first token's output is used, so only its query is needed
    n_q = 2 if return_attention else 1
    q = split((x if return_attention else x[:bsz]) @ f.w_q + f.b_q, n_q)
    k = split(x @ f.w_k + f.b_k, 2)
    v = split(x @ f.w_v + f.b_v, 2)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    attn = T.softmax(scores, axis=-1)
    ctx = (attn @ v)[:, :, 0, :].reshape(bsz, d)
    out = ctx @ f.w_o + f.b_o
    if return_attention:
        return out, attn
    return out


def kia_forward(h, a_dw_hat, a_di_hat, strategy: FusionStrategy = FusionStrategy(),
                projection: Tensor | None = None) -> Tensor:
    """Residual integration of the two adapter outputs into ``h``.

    ``None`` for an adapter output means that branch contributes nothing.
    """
    h = T.as_tensor(h)
    parts = [p for p in (a_dw_hat, a_di_hat) if p is not None]
    for p in parts:
        if T.as_tensor(p).shape != h.shape:
            raise ShapeError(f"kia_forward: incompatible shapes {h.shape} and {T.as_tensor(p).shape}")
    if not parts:
        return h
    if strategy.variant == "weighted-sum":
        half = strategy.lam / 2.0
        out = h
        if a_dw_hat is not None:
            out = out + a_dw_hat * half
        if a_di_hat is not None:
            out = out + a_di_hat * half
        return out
    if projection is None:
        raise ConfigError("concat-project fusion needs a projection tensor", field="fusion.variant")
    zeros = Tensor(np.zeros(h.shape))
    dw = a_dw_hat if a_dw_hat is not None else zeros
    di = a_di_hat if a_di_hat is not None else zeros
    return h + T.concat([dw, di], axis=1) @ projection


# ---------------------------------------------------------------- full model


@dataclass
class DualAdapterModel:
    """One client's view: frozen backbone plus whichever adapters are enabled.

    ``a_di``/``a_dw``/``fusion``/``projection`` map an encoder layer index to
    that layer's parameters; ``None`` disables the component.
    """

    backbone: BackboneParams
    kia_layers: tuple[int, ...]
    a_di: dict[int, AdapterParams] | None = None
    a_dw: dict[int, AdapterParams] | None = None
    fusion: dict[int, FusionParams] | None = None
    projection: dict[int, Tensor] | None = None
    strategy: FusionStrategy = field(default_factory=FusionStrategy)
    nonlinearity: str = "gelu"

    @property
    def first_kia_layer(self) -> int:
        return self.kia_layers[0]

    def trunk(self, x) -> Tensor:
        """Frozen encoder output up to the first KIA layer (cacheable)."""
        return backbone_forward(self.backbone, x, upto=self.first_kia_layer)

    def private_parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for layer in self.kia_layers:
            if self.a_dw is not None:
                out += self.a_dw[layer].parameters()
            if self.fusion is not None:
                out += self.fusion[layer].parameters()
            if self.projection is not None:
                out.append(self.projection[layer])
        return out

    def shared_parameters(self) -> list[Tensor]:
        if self.a_di is None:
            return []
        return [p for layer in self.kia_layers for p in self.a_di[layer].parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return self.shared_parameters() + self.private_parameters()

    def _aware(self, layer: int, h: Tensor) -> Tensor:
        out = adapter_forward(self.a_dw[layer], h, self.nonlinearity)
        if self.fusion is not None:
            out = mhsa_fuse(self.fusion[layer], out, h)
        return out

    def forward_from_trunk(self, trunk: Tensor, use_di: bool = True, use_dw: bool = True):
        """Run from the cached trunk to the head; returns ``(features, logits)``."""
        use_di = use_di and self.a_di is not None
        use_dw = use_dw and self.a_dw is not None
        h = trunk
        for layer in range(self.first_kia_layer, self.backbone.n_layers):
            if layer != self.first_kia_layer:
                h = encoder_layer(self.backbone, layer, h)
            if layer in self.kia_layers:
                dw = self._aware(layer, h) if use_dw else None
                di = adapter_forward(self.a_di[layer], h, self.nonlinearity) if use_di else None
                proj = self.projection[layer] if self.projection is not None else None
                h = kia_forward(h, dw, di, self.strategy, proj)
        return h, head_forward(self.backbone, h)

    def set_shared(self, adapters: dict[int, AdapterParams]) -> None:
        self.a_di = {layer: adapters[layer].copy(trainable=True) for layer in self.kia_layers}


@dataclass
class BranchLogits:
    z_di: Tensor
    z_dw: Tensor
    z_fused: Tensor


def branch_logits(model: DualAdapterModel, x=None, trunk: Tensor | None = None,
                  need_fused: bool = True) -> BranchLogits:
    """Invariant-only, aware-only and fused logits over one shared trunk."""
    if trunk is None:
        trunk = model.trunk(x)
    _, z_di = model.forward_from_trunk(trunk, use_di=True, use_dw=False)
    _, z_dw = model.forward_from_trunk(trunk, use_di=False, use_dw=True)
    z_fused = model.forward_from_trunk(trunk)[1] if need_fused else None
    return BranchLogits(z_di, z_dw, z_fused)


def build_model(backbone: BackboneParams, rng: np.random.Generator, *, rank: int = 8, heads: int = 4,
                kia_layers: Iterable[int] | None = None, use_di: bool = True, use_dw: bool = True,
                use_mhsa: bool = True, strategy: FusionStrategy = FusionStrategy(),
                nonlinearity: str = "gelu") -> DualAdapterModel:
    """Initialise adapters for a backbone. Disabling ``use_dw`` disables MHSA too."""
    layers = tuple(sorted(kia_layers)) if kia_layers is not None else (backbone.n_layers - 1,)
    if not layers or any(not 0 <= ly < backbone.n_layers for ly in layers):
        raise ConfigError(f"KIA layers {layers} out of range for {backbone.n_layers} layers",
                          field="model.kia_layers")
    d = backbone.d_h
    model = DualAdapterModel(backbone, layers, strategy=strategy, nonlinearity=nonlinearity)
    if use_di:
        model.a_di = {ly: AdapterParams.init(d, rank, rng) for ly in layers}
    if use_dw:
        model.a_dw = {ly: AdapterParams.init(d, rank, rng) for ly in layers}
        if use_mhsa:
            model.fusion = {ly: FusionParams.init(d, heads, rng) for ly in layers}
    if strategy.variant == "concat-project" and (use_di or use_dw):
        model.projection = {ly: init_projection(d) for ly in layers}
    return model


def with_strategy(model: DualAdapterModel, strategy: FusionStrategy) -> DualAdapterModel:
    return replace(model, strategy=strategy)


# ---------------------------------------------------------------- wire format


def serialize_adapter(a: AdapterParams) -> bytes:
    """16-byte header (magic, d_h, rank, reserved) + float64 LE parameters."""
    body = a.flat().astype("<f8").tobytes()
    return ADAPTER_HEADER.pack(ADAPTER_MAGIC, a.d_h, a.rank, 0) + body


def adapter_nbytes(d_h: int, rank: int) -> int:
    return ADAPTER_HEADER_SIZE + 8 * (d_h * rank + rank + rank * d_h + d_h)


def deserialize_adapter(buf: bytes, offset: int = 0) -> tuple[AdapterParams, int]:
    """Parse one adapter starting at ``offset``; returns it and the next offset."""
    if len(buf) - offset < ADAPTER_HEADER_SIZE:
        raise ParseError("adapter payload shorter than its header")
    magic, d_h, rank, _ = ADAPTER_HEADER.unpack_from(buf, offset)
    if magic != ADAPTER_MAGIC:
        raise ParseError(f"bad adapter magic {magic!r}")
    if not 0 < rank < d_h:
        raise ParseError(f"invalid adapter dimensions d_h={d_h}, rank={rank}")
    end = offset + adapter_nbytes(d_h, rank)
    if len(buf) < end:
        raise ParseError(f"truncated adapter payload: need {end - offset} bytes, have {len(buf) - offset}")
    flat = np.frombuffer(buf, dtype="<f8", count=(end - offset - ADAPTER_HEADER_SIZE) // 8,
                         offset=offset + ADAPTER_HEADER_SIZE).astype(np.float64)
    sizes = [d_h * rank, rank, rank * d_h, d_h]
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    shapes = [(d_h, rank), (rank,), (rank, d_h), (d_h,)]
    return AdapterParams(*(Tensor(p.reshape(s)) for p, s in zip(parts, shapes))), end


def serialize_adapters(adapters: dict[int, AdapterParams]) -> bytes:
    """Concatenate per-layer adapters in ascending layer order."""
    return b"".join(serialize_adapter(adapters[k]) for k in sorted(adapters))


def deserialize_adapters(buf: bytes, layers: tuple[int, ...]) -> dict[int, AdapterParams]:
    out, off = {}, 0
    for layer in layers:
        out[layer], off = deserialize_adapter(buf, off)
    if off != len(buf):
        raise ParseError(f"{len(buf) - off} trailing bytes after adapter payload")
    return out

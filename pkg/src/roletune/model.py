"""Small causal decoder transformer with role-switchable low-rank adapters.

The base weights are frozen; all training capacity lives in two sets of
low-rank deltas ("agent" and "user") applied to attention projections. The
block structure is pre-RMS-norm attention + SiLU feed-forward with rotary
position embeddings and an LM head tied to the token embedding.

`forward_segment` processes one utterance segment against an optional store of
previously cached key/value slots; it returns the segment's logits plus its
freshly computed K/V so the caller can extend the cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as rt
from .errors import CapacityError, ConfigError, ShapeError
from .rng import labeled_rng
from .tensor import Tensor

ROLES = ("user", "agent")
PROJECTIONS = ("q", "k", "v", "o")
DEFAULT_TARGETS = {"agent": ("q", "v"), "user": ("q",)}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 512
    max_positions: int = 2048
    rope_base: float = 10000.0
    norm_epsilon: float = 1e-5
    # Init scale of the (frozen, head-tied) token embedding. Because the base
    # never trains, the embedding row norm permanently bounds how sharp the
    # output softmax can get (max logit ~ sqrt(d_model) * row_norm after the
    # final layer norm), while larger rows also mean larger logits and thus
    # larger f32 round-off. None picks 2/sqrt(d_model) (row norm ~2), which
    # favors trainability; numerical-equivalence checks may prefer ~1/sqrt(d).
    embed_std: float | None = None

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head dimension {self.head_dim} must be even for rotary pairing")
        if self.rope_base <= 1.0:
            raise ConfigError(f"rope_base must exceed 1, got {self.rope_base}")
        if self.embed_std is not None and self.embed_std <= 0:
            raise ConfigError(f"embed_std must be positive, got {self.embed_std}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def embed_init_std(self) -> float:
        if self.embed_std is not None:
            return self.embed_std
        return 2.0 / math.sqrt(self.d_model)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "rope_base": self.rope_base,
            "norm_epsilon": self.norm_epsilon,
            "embed_std": self.embed_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class BaseWeights:
    """Frozen backbone parameters, addressable by name.

    Weight matrices are stored (out_features, in_features); a linear layer is
    y = x @ W^T. The LM head reuses the token embedding (tied weights).
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "BaseWeights":
        rng = labeled_rng(seed, "base-init")
        d, ff = config.d_model, config.d_ff

        def mat(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32))

        params: dict[str, Tensor] = {
            "embed": mat((config.vocab_size, d), config.embed_init_std)
        }
        proj_std = 1.0 / math.sqrt(d)
        for i in range(config.n_layers):
            p = f"layer{i}."
            for name in ("wq", "wk", "wv", "wo"):
                params[p + name] = mat((d, d), proj_std)
            params[p + "w1"] = mat((ff, d), proj_std)
            params[p + "w2"] = mat((d, ff), 1.0 / math.sqrt(ff))
            params[p + "norm_attn"] = Tensor(np.ones(d, dtype=np.float32))
            params[p + "norm_ffn"] = Tensor(np.ones(d, dtype=np.float32))
        params["norm_out"] = Tensor(np.ones(d, dtype=np.float32))
        return cls(config, params)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}


class LoraDelta:
    """One low-rank update: delta(x) = (alpha/r) * x @ A^T @ B^T.

    A has shape (r, in_features), B has shape (out_features, r). B starts at
    zero so a fresh delta is exactly a no-op.
    """

    def __init__(self, A: Tensor, B: Tensor, alpha: float):
        if A.shape[0] != B.shape[1]:
            raise ConfigError(f"rank mismatch: A rank {A.shape[0]} vs B rank {B.shape[1]}")
        self.A = A
        self.B = B
        self.alpha = float(alpha)
        self.rank = A.shape[0]

    @classmethod
    def create(cls, d_out: int, d_in: int, rank: int, alpha: float, rng: np.random.Generator) -> "LoraDelta":
        if rank < 1:
            raise ConfigError(f"rank must be positive, got {rank}")
        if rank > min(d_out, d_in):
            raise ConfigError(f"rank {rank} exceeds min(d_out={d_out}, d_in={d_in})")
        bound = 1.0 / math.sqrt(d_in)
        A = Tensor(rng.uniform(-bound, bound, size=(rank, d_in)).astype(np.float32), requires_grad=True)
        B = Tensor(np.zeros((d_out, rank), dtype=np.float32), requires_grad=True)
        return cls(A, B, alpha)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class RoleAdapters:
    """Per-role low-rank deltas over a shared frozen base.

    Each role adapts its own set of attention projections, keyed by
    (layer, projection). The defaults adapt query+value for the agent and
    query only for the user, so the user role can never reshape cached values.
    """

    def __init__(self, config: ModelConfig, rank: int = 8, alpha: float = 16.0,
                 targets: dict[str, tuple[str, ...]] | None = None, seed: int = 0):
        targets = dict(DEFAULT_TARGETS) if targets is None else {r: tuple(p) for r, p in targets.items()}
        for role, projs in targets.items():
            if role not in ROLES:
                raise ConfigError(f"unknown adapter role {role!r}; expected one of {ROLES}")
            for proj in projs:
                if proj not in PROJECTIONS:
                    raise ConfigError(f"unknown projection target {proj!r}; expected one of {PROJECTIONS}")
        self.config = config
        self.rank = rank
        self.alpha = float(alpha)
        self.targets = targets
        self.deltas: dict[str, dict[tuple[int, str], LoraDelta]] = {}
        d = config.d_model
        for role in ROLES:
            projs = targets.get(role, ())
            rng = labeled_rng(seed, f"adapter-init-{role}")
            self.deltas[role] = {
                (layer, proj): LoraDelta.create(d, d, rank, alpha, rng)
                for layer in range(config.n_layers)
                for proj in projs
            }

    def delta(self, role: str, layer: int, proj: str) -> LoraDelta | None:
        return self.deltas[role].get((layer, proj))

    def trainable_parameters(self, roles: tuple[str, ...] = ROLES) -> dict[str, Tensor]:
        """Flat name -> tensor map, in deterministic order."""
        out: dict[str, Tensor] = {}
        for role in roles:
            for (layer, proj) in sorted(self.deltas[role]):
                delta = self.deltas[role][(layer, proj)]
                out[f"{role}.layer{layer}.{proj}.A"] = delta.A
                out[f"{role}.layer{layer}.{proj}.B"] = delta.B
        return out

    def parameter_count(self, role: str) -> int:
        return sum(d.A.data.size + d.B.data.size for d in self.deltas[role].values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.trainable_parameters().items()}


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """y = x @ W^T for x of shape (..., in) and W of shape (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight in-width {weight.shape[-1]}")
    lead = x.shape[:-1]
    n = int(np.prod(lead))
    flat = rt.reshape(x, (n, x.shape[-1]))
    out = rt.matmul(flat, rt.swapaxes(weight, 0, 1))
    return rt.reshape(out, lead + (weight.shape[0],))


def lora_linear(x: Tensor, base_w: Tensor, delta: LoraDelta | None) -> Tensor:
    """Base projection plus, when a delta is present, its scaled low-rank update."""
    y = linear(x, base_w)
    if delta is None:
        return y
    low = linear(x, delta.A)          # (..., r)
    up = linear(low, delta.B)         # (..., out)
    return y + up * delta.scaling


def rope_apply(x: Tensor, positions: np.ndarray, base: float) -> Tensor:
    """Rotate head-split queries or keys (B, H, S, Dh) by per-slot positions (B, S)."""
    positions = np.asarray(positions)
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rotary pairing needs an even head dimension, got {x.shape[-1]}")
    if positions.shape != (x.shape[0], x.shape[2]):
        raise ShapeError(
            f"positions shape {positions.shape} does not match batch/slots {(x.shape[0], x.shape[2])}"
        )
    return rt.rope_rotate(x, positions, base)


class Transformer:
    """The frozen backbone plus whatever adapters the caller passes per call."""

    def __init__(self, config: ModelConfig, base: BaseWeights):
        self.config = config
        self.base = base

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "Transformer":
        return cls(config, BaseWeights.create(config, seed))

    def _split_heads(self, x: Tensor, batch: int, seq: int) -> Tensor:
        c = self.config
        return rt.swapaxes(rt.reshape(x, (batch, seq, c.n_heads, c.head_dim)), 1, 2)

    def _merge_heads(self, x: Tensor, batch: int, seq: int) -> Tensor:
        c = self.config
        return rt.reshape(rt.swapaxes(x, 1, 2), (batch, seq, c.d_model))

    def forward_segment(self, tokens: np.ndarray, positions: np.ndarray, role: str,
                        adapters: RoleAdapters | None = None,
                        cache: list[tuple[np.ndarray, np.ndarray]] | None = None,
                        mask: np.ndarray | None = None):
        """Run one segment through all layers under `role`'s deltas.

        tokens, positions: (batch, seg) integer grids. cache: per-layer
        (K, V) arrays of shape (batch, heads, stored, head_dim), already
        rotated; mask: additive attention mask (batch, seg, stored+seg) with
        0 for visible and a large negative value for blocked slots. With no
        cache and no mask a causal mask over the segment is used.

        Returns (logits Tensor (batch, seg, vocab), new_kv): a per-layer list
        of live (K, V) tensors (batch, heads, seg, head_dim); storing them in
        a round memory detaches them.
        """
        c = self.config
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}; expected one of {ROLES}")
        tokens = np.asarray(tokens)
        positions = np.asarray(positions)
        if tokens.ndim != 2 or positions.shape != tokens.shape:
            raise ShapeError(f"tokens {tokens.shape} and positions {positions.shape} must be matching 2-D grids")
        if tokens.min() < 0 or tokens.max() >= c.vocab_size:
            raise IndexError(f"token id outside vocab of size {c.vocab_size}")
        if positions.max() >= c.max_positions:
            raise CapacityError(
                f"position id {int(positions.max())} exceeds max_positions={c.max_positions}"
            )
        batch, seg = tokens.shape
        stored = 0
        if cache is not None:
            if len(cache) != c.n_layers:
                raise ShapeError(f"cache has {len(cache)} layers, model has {c.n_layers}")
            stored = cache[0][0].shape[2]
        if stored:
            # entries are numpy arrays (detached cache) or live Tensors (the
            # backpropagation-through-rounds ablation)
            cache = [(k if isinstance(k, Tensor) else Tensor(k),
                      v if isinstance(v, Tensor) else Tensor(v)) for k, v in cache]
        total = stored + seg

        if mask is None:
            if stored:
                raise ShapeError("a mask is required when attending over cached slots")
            mask = np.where(np.tri(seg, dtype=bool), 0.0, rt.MASK_NEG).astype(np.float32)
            mask = np.broadcast_to(mask, (batch, seg, total))
        else:
            mask = np.asarray(mask)
            if mask.shape != (batch, seg, total):
                raise ShapeError(f"mask shape {mask.shape}, expected {(batch, seg, total)}")
        params = self.base.params
        # one copy per head; suffix broadcasting does not cover (B, 1, S, T)
        mask_t = Tensor(np.ascontiguousarray(
            np.broadcast_to(mask[:, None, :, :], (batch, c.n_heads, seg, total))
        ).astype(params["embed"].dtype))
        h = rt.embedding(params["embed"], tokens)
        new_kv: list[tuple[np.ndarray, np.ndarray]] = []
        scale = 1.0 / math.sqrt(c.head_dim)

        for i in range(c.n_layers):
            p = f"layer{i}."
            x = rt.rms_norm(h, params[p + "norm_attn"], c.norm_epsilon)

            def proj(name):
                delta = adapters.delta(role, i, name) if adapters is not None else None
                return lora_linear(x, params[p + "w" + name], delta)

            q = rope_apply(self._split_heads(proj("q"), batch, seg), positions, c.rope_base)
            k = rope_apply(self._split_heads(proj("k"), batch, seg), positions, c.rope_base)
            v = self._split_heads(proj("v"), batch, seg)
            new_kv.append((k, v))

            if stored:
                k_all = rt.concat([cache[i][0], k], axis=2)
                v_all = rt.concat([cache[i][1], v], axis=2)
            else:
                k_all, v_all = k, v

            scores = (q @ rt.swapaxes(k_all, 2, 3)) * scale + mask_t
            probs = rt.softmax(scores, axis=-1)
            ctx = self._merge_heads(probs @ v_all, batch, seg)
            delta_o = adapters.delta(role, i, "o") if adapters is not None else None
            h = h + lora_linear(ctx, params[p + "wo"], delta_o)

            x2 = rt.rms_norm(h, params[p + "norm_ffn"], c.norm_epsilon)
            h = h + linear(rt.silu(linear(x2, params[p + "w1"])), params[p + "w2"])

        h = rt.rms_norm(h, params["norm_out"], c.norm_epsilon)
        logits = linear(h, params["embed"])  # tied LM head
        return logits, new_kv

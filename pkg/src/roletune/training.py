"""Round-by-round adapter training plus the two whole-sequence baselines.

Three modes over the same frozen backbone:

- "midi": per-round alternation. The instruction segment runs under the agent
  deltas and builds the initial memory; each round then forwards the user
  utterance under the user deltas (accumulating the user loss) and the agent
  utterance under the agent deltas (accumulating the agent loss), appending
  every segment's detached K/V to the memory. One step optimizes
  L = L_s + beta * L_u over both delta sets.
- "concat": each dialogue as one causal sequence, loss on agent spans,
  agent deltas only.
- "split": one (context, response) sample per round, loss on the response,
  agent deltas only.

Losses are token means per role per batch. All randomness forks from the run
seed by labeled streams, so e.g. midi and concat runs share base and agent
initializations exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as rt
from .data import (
    ByteTokenizer,
    DialogueSample,
    RoundBatch,
    build_round_batches,
    make_concat_sample,
    make_split_samples,
)
from .errors import ConfigError
from .memory import RoundMemory
from .model import ModelConfig, RoleAdapters, Transformer
from .rng import labeled_rng
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

MODES = ("midi", "concat", "split")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "midi"
    beta: float = 1.0               # user-loss weight; 0 is the stop-gradient diagnostic
    lr: float = 2e-5
    warmup_ratio: float = 0.03
    batch_size: int = 16
    micro_batch: int | None = None  # per-backward slice for gradient accumulation
    epochs: int = 3
    max_rounds: int = 10
    seed: int = 0
    rank: int = 8
    alpha: float = 16.0
    weight_decay: float = 0.0
    strict_cross_round: bool = False        # segments attend cache + self only
    user_sees_instruction: bool = True      # mask instruction slots for user turns if off
    backprop_through_rounds: bool = False   # ablation: keep cached K/V differentiable

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("batch_size", "epochs", "max_rounds", "rank"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.micro_batch is not None and not 1 <= self.micro_batch <= self.batch_size:
            raise ConfigError(f"micro_batch must lie in 1..batch_size, got {self.micro_batch}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "beta": self.beta, "lr": self.lr,
            "warmup_ratio": self.warmup_ratio, "batch_size": self.batch_size,
            "micro_batch": self.micro_batch, "epochs": self.epochs,
            "max_rounds": self.max_rounds, "seed": self.seed, "rank": self.rank,
            "alpha": self.alpha, "weight_decay": self.weight_decay,
            "strict_cross_round": self.strict_cross_round,
            "user_sees_instruction": self.user_sees_instruction,
            "backprop_through_rounds": self.backprop_through_rounds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over the first warmup_ratio of steps, then a
    cosine decay toward 0 at total_steps."""
    warmup = int(cfg.warmup_ratio * total_steps)
    if step < warmup:
        return cfg.lr * step / warmup
    span = max(total_steps - warmup, 1)
    progress = (step - warmup) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay Adam over named parameter tensors."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def shifted_targets(tokens: np.ndarray, loss_mask: np.ndarray):
    """Next-token targets aligned with each position's logits: position j is
    scored (against token j+1) exactly when token j+1 carries the loss mask."""
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    mask = np.zeros(loss_mask.shape, dtype=bool)
    mask[:, :-1] = loss_mask[:, 1:]
    return targets, mask


def _mean_of_terms(terms: list[tuple[Tensor, int]], dtype) -> tuple[Tensor, int]:
    """Token-weighted combination of per-segment mean losses -> global mean."""
    total = sum(n for _, n in terms)
    if total == 0:
        return Tensor(np.zeros((), dtype=dtype)), 0
    acc = None
    for loss, n in terms:
        if n == 0:
            continue
        piece = loss * float(n)
        acc = piece if acc is None else acc + piece
    return acc * (1.0 / total), total


def midi_losses(model: Transformer, adapters: RoleAdapters, batch: RoundBatch,
                cfg: TrainConfig):
    """Forward a round batch through the memory; returns (L_s, L_u, n_s, n_u).

    L_s and L_u are live tensors (token means over agent and user targets).
    Cached K/V are detached unless cfg.backprop_through_rounds is set.
    """
    c = model.config
    dtype = model.base.params["embed"].dtype
    mem = RoundMemory.empty(batch.batch, c.n_layers, c.n_heads, c.head_dim, dtype=dtype)
    live_cache = [[] for _ in range(c.n_layers)] if cfg.backprop_through_rounds else None
    include_current = not cfg.strict_cross_round
    agent_terms: list[tuple[Tensor, int]] = []
    user_terms: list[tuple[Tensor, int]] = []

    def run_segment(seg, role, tag, scored):
        nonlocal mem
        if not seg.validity.any():
            logger.warning("skipping %s segment with zero valid tokens in every dialogue", tag)
            return
        exclude = ()
        if role == "user" and not cfg.user_sees_instruction:
            exclude = ("instruction",)
        mask = mem.build_mask(seg.validity, include_current=include_current,
                              exclude_tags=exclude)
        if live_cache is not None and mem.stored:
            cache = [
                (rt.concat([k for k, _ in entries], axis=2),
                 rt.concat([v for _, v in entries], axis=2))
                for entries in live_cache
            ]
        else:
            cache = mem.layers
        positions = mem.next_positions(seg.validity)
        logits, kv = model.forward_segment(seg.tokens, positions, role, adapters,
                                           cache=cache, mask=mask)
        if scored:
            targets, tmask = shifted_targets(seg.tokens, seg.loss_mask)
            loss, n = rt.cross_entropy(logits, targets, tmask)
            (agent_terms if role == "agent" else user_terms).append((loss, n))
        mem = mem.append(kv, seg.validity, tag)  # append detaches the live tensors
        if live_cache is not None:
            for layer, (k, v) in enumerate(kv):
                live_cache[layer].append((k, v))

    run_segment(batch.instruction, "agent", "instruction", scored=False)
    for round_segs in batch.rounds:
        run_segment(round_segs["user"], "user", "user", scored=True)
        run_segment(round_segs["agent"], "agent", "agent", scored=True)

    ls, n_s = _mean_of_terms(agent_terms, dtype)
    lu, n_u = _mean_of_terms(user_terms, dtype)
    return ls, lu, n_s, n_u


def combine_losses(ls: Tensor, lu: Tensor, beta: float) -> Tensor:
    """L = L_s + beta * L_u; at beta=0 the user branch is dropped entirely so
    no gradient path into the user deltas exists at all."""
    if beta == 0.0:
        return ls
    return ls + lu * beta


# ---------------------------------------------------------------------------
# whole-sequence baselines (concat and split share the causal machinery)
# ---------------------------------------------------------------------------

@dataclass
class CausalBatch:
    tokens: np.ndarray      # (batch, width)
    validity: np.ndarray
    loss_mask: np.ndarray
    positions: np.ndarray


def pad_causal_batch(pairs: list[tuple[np.ndarray, np.ndarray]]) -> CausalBatch:
    """Pad (ids, loss_mask) sequences into one right-padded grid."""
    width = max(len(ids) for ids, _ in pairs)
    batch = len(pairs)
    tokens = np.full((batch, width), ByteTokenizer.PAD, dtype=np.int64)
    loss = np.zeros((batch, width), dtype=bool)
    for i, (ids, mask) in enumerate(pairs):
        tokens[i, :len(ids)] = ids
        loss[i, :len(mask)] = mask
    validity = tokens != ByteTokenizer.PAD
    offsets = np.cumsum(validity, axis=1) - 1
    positions = np.where(validity, offsets, 0).astype(np.int64)
    return CausalBatch(tokens, validity, loss, positions)


def concat_pairs(samples: list[DialogueSample], tokenizer: ByteTokenizer,
                 cfg: TrainConfig, max_positions: int):
    out = []
    for s in samples:
        trimmed = DialogueSample(s.instruction, s.rounds[-cfg.max_rounds:], s.target)
        out.append(make_concat_sample(trimmed, tokenizer, max_positions))
    return out

def split_pairs(samples: list[DialogueSample], tokenizer: ByteTokenizer,
                cfg: TrainConfig):
    out = []
    for s in samples:
        trimmed = DialogueSample(s.instruction, s.rounds[-cfg.max_rounds:], s.target)
        for context, response in make_split_samples(trimmed, tokenizer):
            ids = np.concatenate([context, response])
            mask = np.zeros(len(ids), dtype=bool)
            mask[len(context) + 1:] = True  # response bytes + EOS, not its role special
            out.append((ids, mask))
    return out


def causal_loss(model: Transformer, adapters: RoleAdapters, batch: CausalBatch):
    """Agent-span token-mean loss of a plain causal pass (agent deltas)."""
    c = model.config
    mem = RoundMemory.empty(batch.tokens.shape[0], c.n_layers, c.n_heads, c.head_dim)
    mask = mem.build_mask(batch.validity)
    logits, _ = model.forward_segment(batch.tokens, batch.positions, "agent",
                                      adapters, cache=None, mask=mask)
    targets, tmask = shifted_targets(batch.tokens, batch.loss_mask)
    return rt.cross_entropy(logits, targets, tmask)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Transformer
    adapters: RoleAdapters
    loss_log: list[dict] = field(default_factory=list)


def _chunk(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def train(samples: list[DialogueSample], cfg: TrainConfig,
          model_config: ModelConfig | None = None,
          model: Transformer | None = None,
          adapters: RoleAdapters | None = None) -> TrainResult:
    """Run the configured mode over the corpus; deterministic under cfg.seed.

    Emits one loss-log record per optimizer step: {step, L_s, L_u, L_total, lr}.
    Aborts with a RuntimeError if the loss leaves the finite range.
    """
    if not samples:
        raise ConfigError("training corpus is empty")
    model_config = model_config or ModelConfig()
    model = model or Transformer.create(model_config, cfg.seed)
    adapters = adapters or RoleAdapters(model_config, rank=cfg.rank, alpha=cfg.alpha,
                                        seed=cfg.seed)
    tokenizer = ByteTokenizer()
    roles = ("user", "agent") if cfg.mode == "midi" else ("agent",)
    optimizer = AdamW(adapters.trainable_parameters(roles),
                      weight_decay=cfg.weight_decay)
    micro = cfg.micro_batch or cfg.batch_size

    def epoch_units(epoch):
        order = labeled_rng(cfg.seed, f"data-order-epoch{epoch}").permutation(len(samples))
        shuffled = [samples[i] for i in order]
        if cfg.mode == "midi":
            return _chunk(shuffled, cfg.batch_size)
        if cfg.mode == "concat":
            pairs = concat_pairs(shuffled, tokenizer, cfg, model_config.max_positions)
        else:
            pairs = split_pairs(shuffled, tokenizer, cfg)
        return _chunk(pairs, cfg.batch_size)

    steps_per_epoch = len(epoch_units(0))
    total_steps = steps_per_epoch * cfg.epochs
    log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        for unit in epoch_units(epoch):
            lr = lr_at(step, total_steps, cfg)
            optimizer.zero_grad()
            micro_units = _chunk(unit, micro)
            scale = 1.0 / len(micro_units)
            sums = {"L_s": 0.0, "L_u": 0.0, "L_total": 0.0}
            for micro_unit in micro_units:
                with Tape() as tape:
                    if cfg.mode == "midi":
                        [batch] = build_round_batches(micro_unit, tokenizer,
                                                      len(micro_unit), cfg.max_rounds)
                        ls, lu, _, _ = midi_losses(model, adapters, batch, cfg)
                        total = combine_losses(ls, lu, cfg.beta)
                    else:
                        batch = pad_causal_batch(micro_unit)
                        ls, _ = causal_loss(model, adapters, batch)
                        lu, total = Tensor(np.zeros(())), ls
                    scaled = total * scale if scale != 1.0 else total
                tape.backward(scaled)
                sums["L_s"] += ls.item() * scale
                sums["L_u"] += lu.item() * scale
                sums["L_total"] += total.item() * scale
            if not all(math.isfinite(v) for v in sums.values()):
                raise RuntimeError(
                    f"training diverged at step {step}: non-finite loss {sums}"
                )
            optimizer.step(lr)
            log.append({"step": step, "L_s": sums["L_s"], "L_u": sums["L_u"],
                        "L_total": sums["L_total"], "lr": lr})
            step += 1
    return TrainResult(model=model, adapters=adapters, loss_log=log)


class DialogueTuner:
    """Estimator-style wrapper: configure, fit on a corpus, inspect results.

    Parameters mirror TrainConfig plus the model size; after fit() the trained
    pieces are available as model_, adapters_, and loss_log_.
    """

    def __init__(self, mode: str = "midi", beta: float = 1.0, lr: float = 2e-5,
                 warmup_ratio: float = 0.03, batch_size: int = 16,
                 micro_batch: int | None = None, epochs: int = 3,
                 max_rounds: int = 10, seed: int = 0, rank: int = 8,
                 alpha: float = 16.0, weight_decay: float = 0.0,
                 strict_cross_round: bool = False,
                 user_sees_instruction: bool = True,
                 backprop_through_rounds: bool = False,
                 model_config: ModelConfig | None = None):
        self.mode = mode
        self.beta = beta
        self.lr = lr
        self.warmup_ratio = warmup_ratio
        self.batch_size = batch_size
        self.micro_batch = micro_batch
        self.epochs = epochs
        self.max_rounds = max_rounds
        self.seed = seed
        self.rank = rank
        self.alpha = alpha
        self.weight_decay = weight_decay
        self.strict_cross_round = strict_cross_round
        self.user_sees_instruction = user_sees_instruction
        self.backprop_through_rounds = backprop_through_rounds
        self.model_config = model_config

    _PARAM_NAMES = (
        "mode", "beta", "lr", "warmup_ratio", "batch_size", "micro_batch",
        "epochs", "max_rounds", "seed", "rank", "alpha", "weight_decay",
        "strict_cross_round", "user_sees_instruction", "backprop_through_rounds",
        "model_config",
    )

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "DialogueTuner":
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ConfigError(f"unknown parameter {name!r} for DialogueTuner")
            setattr(self, name, value)
        return self

    def train_config(self) -> TrainConfig:
        fields = {n: getattr(self, n) for n in self._PARAM_NAMES if n != "model_config"}
        return TrainConfig(**fields)

    def fit(self, samples: list[DialogueSample]) -> "DialogueTuner":
        result = train(samples, self.train_config(), model_config=self.model_config)
        self.model_ = result.model
        self.adapters_ = result.adapters
        self.loss_log_ = result.loss_log
        return self

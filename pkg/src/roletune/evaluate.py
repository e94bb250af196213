"""Teacher-forced round-by-round evaluation.

For every dialogue the gold context is replayed into the round memory
(instruction, then each gold user turn); the agent reply for the round is
sampled on top of it and recorded, after which the gold agent reply — not
the sampled one — enters the memory. Each dialogue therefore scores every
round under the same ground-truth context the training objective saw, and
per-round quality stays comparable across models.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import ByteTokenizer, DialogueSample
from .errors import CapacityError
from .generate import GenerationConfig, extend_memory, generate_response, prime_memory
from .metrics import ConsistencyOracle, MetricReport, score_replies
from .model import RoleAdapters, Transformer
from .rng import labeled_rng


def generate_round_replies(model: Transformer, adapters: RoleAdapters,
                           tokenizer: ByteTokenizer, sample: DialogueSample,
                           gen_cfg: GenerationConfig, rng=None,
                           max_rounds: int | None = None) -> list[str]:
    """Sample one agent reply per round under the gold context.

    Stops early (returning the replies so far) if the position capacity runs
    out; the per-round curve then simply counts fewer dialogues there.
    """
    rounds = sample.rounds if max_rounds is None else sample.rounds[:max_rounds]
    if rng is None:
        rng = labeled_rng(gen_cfg.seed, "eval")
    replies: list[str] = []
    try:
        memory = prime_memory(model, adapters, tokenizer, sample.instruction, [])
        for user, agent in rounds:
            memory = extend_memory(model, adapters, tokenizer, memory, "user", user)
            reply, _ = generate_response(model, adapters, tokenizer, memory,
                                         "agent", gen_cfg, rng)
            replies.append(reply.text)
            if reply.exhausted:
                break
            # the gold reply, not the sampled one, becomes context
            memory = extend_memory(model, adapters, tokenizer, memory, "agent", agent)
    except CapacityError:
        pass
    return replies


@dataclass
class EvalResult:
    report: MetricReport
    responses: list[list[str]]

    def to_dict(self) -> dict:
        return {"report": self.report.to_dict(), "responses": self.responses}


def evaluate_corpus(model: Transformer, adapters: RoleAdapters,
                    samples: list[DialogueSample], gen_cfg: GenerationConfig,
                    oracle: ConsistencyOracle | None = None,
                    max_rounds: int | None = None,
                    success_window: int = 1) -> EvalResult:
    """Generate and score replies for a whole corpus, deterministically.

    Each dialogue draws from its own labeled random stream, so how many
    tokens one dialogue samples never perturbs another's replies.
    """
    tokenizer = ByteTokenizer()
    responses = []
    for index, sample in enumerate(samples):
        rng = labeled_rng(gen_cfg.seed, f"eval-dialogue-{index}")
        responses.append(generate_round_replies(
            model, adapters, tokenizer, sample, gen_cfg, rng, max_rounds))
    report = score_replies(samples, responses, oracle=oracle,
                           success_window=success_window)
    return EvalResult(report=report, responses=responses)


def gold_curve(samples: list[DialogueSample], oracle: ConsistencyOracle,
               max_rounds: int | None = None):
    """Consistency of the ground-truth replies themselves (the reference
    ceiling every generated curve is compared against)."""
    from .metrics import consistency_curve

    dialogues = [(s.instruction, [agent for _, agent in s.rounds]) for s in samples]
    return consistency_curve(dialogues, oracle, max_rounds=max_rounds)

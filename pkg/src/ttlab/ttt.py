"""Feedback-driven test-time tuning.

On each failed attempt the model is trained to predict the verbal feedback
(optionally plus a reflection on the failure) and one optimizer step is
applied to low-rank adapters, so failure information accumulates in fast
weights rather than in the context.  Base weights are never mutated; one
solve call owns one adapter state exclusively.
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import chat, model
from .optim import Adam
from .tasks import oracle_reflection
from .tokenizer import EOS


class TruncationError(Exception):
    """Generation hit the context cap before finishing."""


class VerifierAbort(Exception):
    """The verifier raised; carries the partial trace."""

    def __init__(self, cause, records):
        self.cause = cause
        self.records = records
        super().__init__(f"verifier failed: {cause!r}")


@contextmanager
def frozen(weights):
    """Temporarily drop requires_grad on base weights (skips their gradient
    accumulation while adapter/predictor gradients still flow)."""
    prev = [(t, t.requires_grad) for t in weights.tensors.values()]
    for t, _ in prev:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, rg in prev:
            t.requires_grad = rg


@dataclass
class TTTConfig:
    lora_rank: int = 4
    lora_dropout: float = 0.05
    lora_init_std: float = 0.05
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 0.6
    top_p: float = 0.95
    max_new: int = 16
    feedback_text: str = chat.FEEDBACK_TEXT
    reflection: str = "oracle"  # "oracle" | "model" | "none"
    reflection_max_new: int = 96
    skip_final_update: bool = True


@dataclass
class Adapter:
    a: ad.Tensor  # [rank, d_in]
    b: ad.Tensor  # [d_out, rank], zero-initialized so the adapted model starts at M0
    dropout: float


class AdapterState:
    """Low-rank deltas plus optimizer moments for one question.

    Targets the query/value projections of every block.  The effective
    weight is W + B.A (applied as a branch so adapter dropout hits only the
    adapter input); base weights are untouched.
    """

    def __init__(self, adapters, optimizer):
        self.adapters = adapters
        self.opt = optimizer

    @classmethod
    def init(cls, weights, cfg, rng):
        dtype = weights.dtype
        adapters = {}
        params = {}
        for k in range(weights.config.n_layers):
            for proj in ("q", "v"):
                lid = f"blk{k}.{proj}"
                d_in, d_out = weights.layer_shape(lid)
                a = ad.Tensor(rng.normal(0.0, cfg.lora_init_std, size=(cfg.lora_rank, d_in)),
                              requires_grad=True, dtype=dtype)
                b = ad.Tensor(np.zeros((d_out, cfg.lora_rank)), requires_grad=True, dtype=dtype)
                adapters[lid] = Adapter(a=a, b=b, dropout=cfg.lora_dropout)
                params[f"{lid}.A"] = a
                params[f"{lid}.B"] = b
        opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        return cls(adapters, opt)

    @property
    def steps(self):
        return self.opt.t

    def zero_grad(self):
        self.opt.zero_grad()


# ---------------------------------------------------------------------------
# Losses


def fttt_loss(weights, vocab, question, attempt, feedback=chat.FEEDBACK_TEXT,
              adapters=None, train=False, rng=None):
    """Mean NLL of the verbal feedback given the (question, attempt) turn."""
    if not feedback:
        raise ValueError("fttt_loss: empty feedback text")
    ctx, tgt = chat.feedback_pair(vocab, question, attempt, feedback)
    return model.nll(weights, ctx, tgt, adapters=adapters, train=train, rng=rng)


def aux_loss(weights, vocab, question, attempt, reflection, feedback=chat.FEEDBACK_TEXT,
             adapters=None, train=False, rng=None):
    """Mean NLL of the reflection, conditioned through the feedback turn."""
    if not reflection:
        raise ValueError("aux_loss: empty reflection")
    ctx, tgt = chat.reflection_pair(vocab, question, attempt, reflection, feedback)
    return model.nll(weights, ctx, tgt, adapters=adapters, train=train, rng=rng)


def final_loss(weights, vocab, question, attempt, reflection=None,
               feedback=chat.FEEDBACK_TEXT, adapters=None, train=False, rng=None):
    """Feedback loss plus the reflection term when a reflection is given."""
    loss = fttt_loss(weights, vocab, question, attempt, feedback, adapters, train, rng)
    if reflection:
        loss = ad.add(loss, aux_loss(weights, vocab, question, attempt, reflection,
                                     feedback, adapters, train, rng))
    return loss


# ---------------------------------------------------------------------------
# Reflection providers


class OracleReflector:
    """Renders the verifier diagnostic through the fixed template."""

    uses_generation = False

    def __call__(self, question, attempt, verdict, rng):
        return oracle_reflection(verdict)


class ModelReflector:
    """Samples a reflection from the raw model (never the adapted one)."""

    uses_generation = True

    def __init__(self, weights, vocab, cfg):
        self.weights = weights  # raw model reference, adapters never applied
        self.vocab = vocab
        self.cfg = cfg

    def __call__(self, question, attempt, verdict, rng):
        ctx = chat.reflection_sampling_context(self.vocab, question, attempt, self.cfg.feedback_text)
        toks = model.nucleus_sample(self.weights, ctx, self.cfg.reflection_max_new,
                                    self.cfg.temperature, self.cfg.top_p, rng)
        if len(ctx) + len(toks) >= self.weights.config.max_seq_len:
            raise TruncationError("reflection generation hit max_seq_len before <eos>")
        return self.vocab.decode_text(toks)


def make_reflector(kind, weights, vocab, cfg):
    if kind in (None, "none", ""):
        return None
    if kind == "oracle":
        return OracleReflector()
    if kind == "model":
        return ModelReflector(weights, vocab, cfg)
    raise ValueError(f"unknown reflection provider {kind!r}")


# ---------------------------------------------------------------------------
# The solve loop


@dataclass
class AttemptRecord:
    attempt_index: int
    attempt: str
    verdict: bool
    diagnostic: str = ""
    reflection: str | None = None
    loss: float | None = None
    wall_ms: float = 0.0


@dataclass
class SolveResult:
    answer: str
    solved: bool
    records: list
    updates: int = 0
    generation_calls: int = 0
    meta: dict = field(default_factory=dict)


def fttt_solve(weights, vocab, question, verifier, budget, cfg, rng, reflector=None):
    """Attempt/verify/update loop over a per-question adapter.

    Samples attempt n from the adapted model, returns on the first verifier
    pass, otherwise trains the adapter on the feedback (and reflection) with
    exactly one optimizer step.  The update after the final failed attempt
    is skipped by default (the updated model would never be used), so N
    failed attempts take N-1 steps.
    """
    if budget < 1:
        raise ValueError("fttt_solve: budget must be >= 1")
    update_rng = rng.spawn(1)[0]
    adapter = AdapterState.init(weights, cfg, update_rng)
    if reflector is None:
        reflector = make_reflector(cfg.reflection, weights, vocab, cfg)
    records = []
    calls = 0
    ctx = chat.attempt_context(vocab, question)
    text = ""
    for n in range(1, budget + 1):
        t0 = time.perf_counter()
        toks = model.nucleus_sample(weights, ctx, cfg.max_new, cfg.temperature,
                                    cfg.top_p, rng, adapters=adapter.adapters)
        calls += 1
        text = vocab.decode_text(toks)
        try:
            verdict = verifier(text)
        except Exception as exc:
            raise VerifierAbort(exc, records) from exc
        rec = AttemptRecord(attempt_index=n, attempt=text, verdict=verdict.passed,
                            diagnostic=verdict.kind)
        if verdict.passed:
            rec.wall_ms = (time.perf_counter() - t0) * 1e3
            records.append(rec)
            return SolveResult(text, True, records, updates=adapter.steps, generation_calls=calls)
        if n == budget and cfg.skip_final_update:
            rec.wall_ms = (time.perf_counter() - t0) * 1e3
            records.append(rec)
            break
        reflection = None
        if reflector is not None:
            reflection = reflector(question, text, verdict, update_rng)
            if reflector.uses_generation:
                calls += 1
            rec.reflection = reflection
        with frozen(weights):
            loss = final_loss(weights, vocab, question, text, reflection,
                              cfg.feedback_text, adapters=adapter.adapters,
                              train=True, rng=update_rng)
            ad.backward(loss)
        adapter.opt.step()
        adapter.zero_grad()
        rec.loss = float(loss.data)
        rec.wall_ms = (time.perf_counter() - t0) * 1e3
        records.append(rec)
    return SolveResult(text, False, records, updates=adapter.steps, generation_calls=calls)

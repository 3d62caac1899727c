"""Test-time scaling baselines under a common result shape.

best_of_n and self_consistency are written against a plain ``sample_fn(rng)
-> text`` callable so they can be driven by the real model or by rigged
generators in statistical tests; the transcript-shaped methods (beam,
revision, self-refine) take the model directly.  None of them touch model
weights.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import chat, model
from .tokenizer import EOS
from .ttt import AttemptRecord, SolveResult, VerifierAbort


def make_sampler(weights, vocab, question, cfg):
    """Bind the model to a question as a nucleus-sampling callable."""
    ctx = chat.attempt_context(vocab, question)

    def sample(rng):
        toks = model.nucleus_sample(weights, ctx, cfg.max_new, cfg.temperature,
                                    cfg.top_p, rng)
        return vocab.decode_text(toks)

    return sample


def best_of_n(sample_fn, verifier, n, rng):
    """Independent samples; solved iff any passes (success stops early,
    which cannot change the outcome and stays within budget)."""
    if n < 1:
        raise ValueError("best_of_n: n must be >= 1")
    records = []
    text = ""
    for i in range(1, n + 1):
        t0 = time.perf_counter()
        text = sample_fn(rng)
        try:
            verdict = verifier(text)
        except Exception as exc:
            raise VerifierAbort(exc, records) from exc
        records.append(AttemptRecord(attempt_index=i, attempt=text, verdict=verdict.passed,
                                     diagnostic=verdict.kind,
                                     wall_ms=(time.perf_counter() - t0) * 1e3))
        if verdict.passed:
            return SolveResult(text, True, records, generation_calls=i)
    return SolveResult(text, False, records, generation_calls=n)


@dataclass
class VoteResult:
    answer: str
    counts: dict
    records: list = field(default_factory=list)
    generation_calls: int = 0


def self_consistency(sample_fn, extractor, n, rng):
    """Majority vote over extracted canonical answers, no verifier access.

    Ties break toward the earliest-sampled answer; attempts the extractor
    cannot parse are excluded from the vote.
    """
    if n < 1:
        raise ValueError("self_consistency: n must be >= 1")
    counts = {}
    first_seen = {}
    records = []
    for i in range(1, n + 1):
        text = sample_fn(rng)
        canon = extractor(text)
        records.append(AttemptRecord(attempt_index=i, attempt=text, verdict=False,
                                     diagnostic="excluded" if canon is None else "voted"))
        if canon is None:
            continue
        counts[canon] = counts.get(canon, 0) + 1
        first_seen.setdefault(canon, i)
    if not counts:
        return VoteResult(answer="", counts={}, records=records, generation_calls=n)
    winner = min(counts, key=lambda a: (-counts[a], first_seen[a]))
    return VoteResult(answer=winner, counts=counts, records=records, generation_calls=n)


def beam_search(weights, vocab, question, beam_width, max_new, length_normalize=True):
    """Length-normalized log-probability beam over next tokens.

    Completed hypotheses stay in the pool and compete at selection; ties
    break deterministically by insertion order.
    """
    if beam_width < 1:
        raise ValueError("beam_search: beam width must be >= 1")
    ctx = chat.attempt_context(vocab, question)
    cap = weights.config.max_seq_len
    live = [((), 0.0, False)]
    for _ in range(max_new):
        if all(done for _, _, done in live):
            break
        cands = []
        for toks, lp, done in live:
            if done or len(ctx) + len(toks) >= cap:
                cands.append((toks, lp, True))
                continue
            logits = model.next_token_logits(weights, ctx + list(toks)).astype(np.float64)
            logits -= logits.max()
            logprobs = logits - np.log(np.exp(logits).sum())
            top = np.argsort(-logprobs, kind="stable")[:beam_width]
            for t in top:
                t = int(t)
                if t == EOS:
                    cands.append((toks, lp + logprobs[t], True))
                else:
                    cands.append((toks + (t,), lp + logprobs[t], False))
        order = sorted(range(len(cands)), key=lambda i: (-cands[i][1], i))
        live = [cands[i] for i in order[:beam_width]]

    def score(h):
        toks, lp, _ = h
        return lp / max(len(toks), 1) if length_normalize else lp

    best = max(range(len(live)), key=lambda i: (score(live[i]), -i))
    return vocab.decode_text(list(live[best][0]))


def revision_loop(weights, vocab, question, verifier, n, cfg, rng):
    """Each attempt conditions on the question plus all prior attempts and
    their verdict markers; on context overflow the oldest attempts are
    dropped (sliding window) and the event is counted."""
    if n < 1:
        raise ValueError("revision_loop: n must be >= 1")
    cap = weights.config.max_seq_len
    window = []
    records = []
    truncations = 0
    text = ""
    for i in range(1, n + 1):
        ctx = chat.revision_context(vocab, question, window, cfg.feedback_text)
        while window and len(ctx) + cfg.max_new > cap:
            window.pop(0)
            truncations += 1
            ctx = chat.revision_context(vocab, question, window, cfg.feedback_text)
        t0 = time.perf_counter()
        toks = model.nucleus_sample(weights, ctx, cfg.max_new, cfg.temperature,
                                    cfg.top_p, rng)
        text = vocab.decode_text(toks)
        try:
            verdict = verifier(text)
        except Exception as exc:
            raise VerifierAbort(exc, records) from exc
        records.append(AttemptRecord(attempt_index=i, attempt=text, verdict=verdict.passed,
                                     diagnostic=verdict.kind,
                                     wall_ms=(time.perf_counter() - t0) * 1e3))
        if verdict.passed:
            return SolveResult(text, True, records, generation_calls=i,
                               meta={"truncations": truncations})
        window.append(text)
    return SolveResult(text, False, records, generation_calls=n,
                       meta={"truncations": truncations})


def self_refine_loop(weights, vocab, question, verifier, n, cfg, rng, critiquer):
    """Alternating attempts and critiques; both consume budget.

    Critiques come from the pluggable provider (oracle or model) and are
    never passed through the verifier; solved iff any attempt passes.
    """
    if n < 1:
        raise ValueError("self_refine_loop: n must be >= 1")
    cap = weights.config.max_seq_len
    history = []
    records = []
    calls = 0
    truncations = 0
    text = ""
    last_verdict = None
    budget_used = 0
    while budget_used < n:
        want_attempt = not history or history[-1][1] is not None
        if want_attempt:
            ctx = chat.critique_context(vocab, question, history)
            while history and len(ctx) + cfg.max_new > cap:
                history.pop(0)
                truncations += 1
                ctx = chat.critique_context(vocab, question, history)
            t0 = time.perf_counter()
            toks = model.nucleus_sample(weights, ctx, cfg.max_new, cfg.temperature,
                                        cfg.top_p, rng)
            text = vocab.decode_text(toks)
            calls += 1
            budget_used += 1
            try:
                verdict = verifier(text)
            except Exception as exc:
                raise VerifierAbort(exc, records) from exc
            last_verdict = verdict
            records.append(AttemptRecord(attempt_index=budget_used, attempt=text,
                                         verdict=verdict.passed, diagnostic=verdict.kind,
                                         wall_ms=(time.perf_counter() - t0) * 1e3))
            if verdict.passed:
                return SolveResult(text, True, records, generation_calls=calls,
                                   meta={"truncations": truncations})
            history.append([text, None])
        else:
            critique = critiquer(question, history[-1][0], last_verdict, rng)
            budget_used += 1
            if critiquer.uses_generation:
                calls += 1
            history[-1][1] = critique
            records[-1].reflection = critique
    return SolveResult(text, False, records, generation_calls=calls,
                       meta={"truncations": truncations})

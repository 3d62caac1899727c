"""Chat transcript assembly.

Turns are delimited by role-marker tokens; an assistant answer in a solve
transcript is terminated by <eos>.  Feedback and reflection text live in the
user turn that follows a failed attempt, matching the multi-turn training
layout the tuning losses target.
"""

from .tokenizer import ASST, EOS, USER

FEEDBACK_TEXT = "Your answer is incorrect."
REFLECTION_PREFIX = "Here is the summary of the mistakes in the previous solution: "
REFLECTION_INSTRUCTION = "Summarize all mistakes in short."


def attempt_context(vocab, question):
    """Context for sampling an attempt: <user> Q <asst>."""
    return [USER] + vocab.encode(question) + [ASST]


def solve_pair(vocab, question, answer, with_eos=True):
    """(context, target) for the likelihood of an answer given the question."""
    target = vocab.encode(answer)
    if with_eos:
        target = target + [EOS]
    return attempt_context(vocab, question), target


def feedback_pair(vocab, question, attempt, feedback=FEEDBACK_TEXT):
    """(context, target) for predicting the verbal feedback after a failed
    attempt: context <user> Q <asst> A <user>, target F."""
    context = [USER] + vocab.encode(question) + [ASST] + vocab.encode(attempt) + [USER]
    return context, vocab.encode(feedback)


def reflection_pair(vocab, question, attempt, reflection, feedback=FEEDBACK_TEXT):
    """(context, target) for predicting a reflection after the feedback:
    context ... <user> F ' ', target R."""
    context, f_tokens = feedback_pair(vocab, question, attempt, feedback)
    return context + f_tokens + vocab.encode(" "), vocab.encode(reflection)


def reflection_sampling_context(vocab, question, attempt, feedback=FEEDBACK_TEXT,
                                instruction=REFLECTION_INSTRUCTION):
    """Context for sampling a reflection from the raw model: the feedback
    turn carries the instruction, the reflection is the next assistant turn."""
    context, f_tokens = feedback_pair(vocab, question, attempt, feedback)
    return context + f_tokens + vocab.encode(" " + instruction) + [ASST]


def revision_context(vocab, question, attempts, feedback=FEEDBACK_TEXT):
    """Context conditioning on all prior (failed) attempts and their verdict
    markers, ending with <asst> ready for the next attempt."""
    toks = [USER] + vocab.encode(question)
    for a in attempts:
        toks += [ASST] + vocab.encode(a) + [USER] + vocab.encode(feedback)
    return toks + [ASST]


def critique_context(vocab, question, attempt_critiques):
    """Context for self-refine style transcripts: alternating attempts and
    critique turns, ending with <asst> for the next attempt."""
    toks = [USER] + vocab.encode(question)
    for attempt, critique in attempt_critiques:
        toks += [ASST] + vocab.encode(attempt)
        if critique is not None:
            toks += [USER] + vocab.encode(critique)
    return toks + [ASST]

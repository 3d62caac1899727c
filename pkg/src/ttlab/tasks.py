"""Synthetic verifiable task families.

Each family ships a generator, an exact binary verifier with a diagnostic
record, and an oracle reflection renderer.  Generators are deterministic
given their rng; verifiers are pure and total over arbitrary attempt
strings (malformed input fails with an ``unparseable`` diagnostic).
"""

import json
from dataclasses import dataclass, field

ARITH = "arith"
STRINGS = "strings"


@dataclass
class TaskInstance:
    id: str
    question: str
    answer: str
    family: str
    meta: dict = field(default_factory=dict)


@dataclass
class Verdict:
    passed: bool
    kind: str  # correct | unparseable | too_large | too_small | wrong_length | wrong_order | wrong_chars
    detail: str = ""


# ---------------------------------------------------------------------------
# Arithmetic


def _digits_nocarry_sum(a, b):
    """Digit-wise sum with carries discarded (the planted error mode)."""
    out = []
    while a or b:
        out.append((a % 10 + b % 10) % 10)
        a //= 10
        b //= 10
    if not out:
        out = [0]
    return int("".join(str(d) for d in reversed(out)))


def _has_carry(a, b):
    while a or b:
        if a % 10 + b % 10 >= 10:
            return True
        a //= 10
        b //= 10
    return False


def gen_arithmetic(rng, count, difficulty=1):
    """Integer/modular arithmetic expressions with canonical answers.

    difficulty 1: one +/- with operands up to two digits;
    difficulty 2: adds a third operand and small products;
    difficulty 3: adds parenthesized mod expressions.
    """
    if difficulty not in (1, 2, 3):
        raise ValueError(f"difficulty must be 1, 2 or 3, got {difficulty}")
    out = []
    for i in range(count):
        a = int(rng.integers(0, 100))
        b = int(rng.integers(0, 100))
        kind = int(rng.integers(0, 2 if difficulty == 1 else 3))
        if difficulty >= 3 and int(rng.integers(0, 3)) == 0:
            m = int(rng.integers(2, 10))
            op = "+" if int(rng.integers(0, 2)) == 0 else "-"
            value = (a + b if op == "+" else a - b) % m
            question = f"({a}{op}{b})%{m}"
            sub = "mod"
        elif kind == 0:
            value = a + b
            question = f"{a}+{b}"
            sub = "add_carry" if _has_carry(a, b) else "add_plain"
        elif kind == 1:
            value = a - b
            question = f"{a}-{b}"
            sub = "sub"
        else:
            a = int(rng.integers(2, 13))
            c = int(rng.integers(0, 100))
            value = a * b + c if difficulty == 2 else a * b
            question = f"{a}*{b}+{c}" if difficulty == 2 else f"{a}*{b}"
            sub = "mul"
        meta = {"subfamily": sub, "difficulty": difficulty}
        if sub in ("add_carry", "add_plain"):
            meta["operands"] = [a, b]
            meta["biased_answer"] = str(_digits_nocarry_sum(a, b))
        out.append(TaskInstance(
            id=f"{ARITH}{difficulty}-{i:05d}", question=question, answer=str(value),
            family=ARITH, meta=meta,
        ))
    return out


def canonical_int(text):
    """Canonical integer string or None: strip whitespace, normalize leading
    zeros, reject anything that is not an optionally signed integer."""
    s = text.strip()
    neg = s.startswith("-")
    if neg:
        s = s[1:]
    if not s or not s.isdigit():
        return None
    v = int(s)
    return str(-v if neg else v)


def _verify_arith(instance, attempt):
    canon = canonical_int(attempt)
    if canon is None:
        return Verdict(False, "unparseable", "the answer could not be parsed")
    got, want = int(canon), int(instance.answer)
    if got == want:
        return Verdict(True, "correct")
    if got > want:
        return Verdict(False, "too_large", f"{got} > {want}")
    return Verdict(False, "too_small", f"{got} < {want}")


# ---------------------------------------------------------------------------
# String transforms


_TRANSFORMS = ("rev", "rot1", "rot2", "swap")


def _apply_transform(name, s, arg=None):
    if name == "rev":
        return s[::-1]
    if name.startswith("rot"):
        k = int(name[3:]) % len(s)
        return s[-k:] + s[:-k] if k else s
    if name == "swap":
        x, y = arg
        return s.translate(str.maketrans({x: y, y: x}))
    raise ValueError(f"unknown transform {name!r}")


def gen_string_transform(rng, count):
    """Composed string transformations (reverse, rotate, letter swap); the
    question is standard nested function notation, innermost applied first."""
    letters = "abcdefghij"
    out = []
    for i in range(count):
        n = int(rng.integers(3, 8))
        s = "".join(letters[int(rng.integers(0, len(letters)))] for _ in range(n))
        depth = int(rng.integers(1, 3))
        expr = s
        value = s
        names = []
        for _ in range(depth):
            name = _TRANSFORMS[int(rng.integers(0, len(_TRANSFORMS)))]
            if name == "swap":
                x = s[int(rng.integers(0, len(s)))]
                y = letters[int(rng.integers(0, len(letters)))]
                value = _apply_transform(name, value, (x, y))
                expr = f"swap{x}{y}({expr})"
            else:
                value = _apply_transform(name, value)
                expr = f"{name}({expr})"
            names.append(name)
        out.append(TaskInstance(
            id=f"{STRINGS}-{i:05d}", question=expr, answer=value,
            family=STRINGS, meta={"transforms": names, "base": s},
        ))
    return out


def _verify_strings(instance, attempt):
    s = attempt.strip()
    if not s or not all("a" <= c <= "z" for c in s):
        return Verdict(False, "unparseable", "the answer could not be parsed")
    if s == instance.answer:
        return Verdict(True, "correct")
    if len(s) != len(instance.answer):
        return Verdict(False, "wrong_length", f"length {len(s)} != {len(instance.answer)}")
    if sorted(s) == sorted(instance.answer):
        return Verdict(False, "wrong_order", "the characters are in the wrong order")
    return Verdict(False, "wrong_chars", "the characters are wrong")


def verify(instance, attempt):
    """Binary verdict plus diagnostic for an attempt string; pure and total."""
    if instance.family == ARITH:
        return _verify_arith(instance, attempt)
    if instance.family == STRINGS:
        return _verify_strings(instance, attempt)
    raise ValueError(f"unknown task family {instance.family!r}")


_REFLECTION_CLAUSES = {
    "unparseable": "the answer could not be parsed",
    "too_large": "result too large",
    "too_small": "result too small",
    "wrong_length": "the transformed string has the wrong length",
    "wrong_order": "the characters are in the wrong order",
    "wrong_chars": "the characters are wrong",
}

REFLECTION_PREFIX = "Here is the summary of the mistakes in the previous solution: "


def oracle_reflection(verdict):
    """Deterministic reflection text rendered from a failure diagnostic."""
    if verdict.passed:
        raise ValueError("oracle_reflection: verdict is a pass, nothing to reflect on")
    clause = _REFLECTION_CLAUSES.get(verdict.kind)
    if clause is None:
        raise ValueError(f"oracle_reflection: unknown diagnostic kind {verdict.kind!r}")
    return f"{REFLECTION_PREFIX}{clause}."


# ---------------------------------------------------------------------------
# Pretraining corpus and the planted bias


@dataclass
class CorpusExample:
    kind: str  # solve | judge | reflect
    question: str
    target: str  # answer for solve, the wrong attempt for judge/reflect
    reflection: str = ""
    meta: dict = field(default_factory=dict)


def solve_corpus(instances):
    return [
        CorpusExample(kind="solve", question=t.question, target=t.answer, meta=dict(t.meta))
        for t in instances
    ]


def plant_bias(corpus, fraction, rng, subfamily="add_carry"):
    """Corrupt a controlled fraction of solve targets within one sub-family.

    Returns a new corpus list; exactly floor(fraction * n_eligible) targets
    are replaced with the sub-family's systematic error (carries dropped for
    addition).  Corrupted items are tagged meta["corrupted"] = True.
    """
    if not (0.0 <= fraction < 1.0):
        raise ValueError(f"plant_bias: fraction {fraction} outside [0, 1)")
    out = [CorpusExample(e.kind, e.question, e.target, e.reflection, dict(e.meta)) for e in corpus]
    eligible = [i for i, e in enumerate(out)
                if e.kind == "solve" and e.meta.get("subfamily") == subfamily and "biased_answer" in e.meta]
    n_corrupt = int(fraction * len(eligible))
    for i in rng.permutation(len(eligible))[:n_corrupt]:
        e = out[eligible[int(i)]]
        e.target = e.meta["biased_answer"]
        e.meta["corrupted"] = True
    return out


def wrong_attempt(instance, rng):
    """A plausible wrong answer for feedback-style training examples; for
    carry additions this is the planted error mode itself."""
    if instance.family == ARITH:
        biased = instance.meta.get("biased_answer")
        if biased is not None and biased != instance.answer:
            return biased
        return str(int(instance.answer) + int(rng.integers(1, 10)) * (1 if rng.integers(0, 2) else -1))
    flipped = instance.answer[::-1]
    if flipped != instance.answer:
        return flipped
    return instance.answer[1:] + instance.answer[:1] if len(instance.answer) > 1 else instance.answer + "a"


def feedback_corpus(instances, rng, judge_fraction=0.2, reflect_fraction=0.1):
    """Judge and reflection examples so feedback/reflection text is
    in-distribution for the pretrained model."""
    out = []
    for inst in instances:
        r = rng.random()
        if r >= judge_fraction + reflect_fraction:
            continue
        wrong = wrong_attempt(inst, rng)
        verdict = verify(inst, wrong)
        if verdict.passed:
            continue
        if r < judge_fraction:
            out.append(CorpusExample(kind="judge", question=inst.question, target=wrong,
                                     meta=dict(inst.meta)))
        else:
            out.append(CorpusExample(kind="reflect", question=inst.question, target=wrong,
                                     reflection=oracle_reflection(verdict), meta=dict(inst.meta)))
    return out


# ---------------------------------------------------------------------------
# Task set persistence (line-delimited records)


def save_tasks(path, instances):
    with open(path, "w", encoding="utf-8") as fh:
        for t in instances:
            fh.write(json.dumps(
                {"id": t.id, "question": t.question, "answer": t.answer,
                 "family": t.family, "meta": t.meta},
                sort_keys=True) + "\n")


def load_tasks(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(TaskInstance(id=rec["id"], question=rec["question"],
                                    answer=rec["answer"], family=rec["family"],
                                    meta=rec.get("meta", {})))
    return out

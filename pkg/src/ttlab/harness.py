"""Experiment orchestration: pretraining, budget sweeps, reporting.

Runs are driven by a config dict (see config.py) against a workspace
directory that accumulates task files, checkpoints, traces and CSVs.
Everything is seeded; identical config + seeds reproduce byte-identical
aggregate CSVs (timings live in the trace log and a sidecar, never in the
aggregate).
"""

import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import baselines, learned_opt, model, ttt
from . import chat
from . import tasks as tasklib
from .config import meta_train_config, model_config, predictor_config, ttt_config
from .optim import Adam
from .tokenizer import Vocab

CSV_SCHEMA = "v1"


class HarnessError(Exception):
    """Orchestration-level failure (missing inputs, divergence, ...)."""


def _rng(*entropy):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def question_rng(seed, question_id):
    """Deterministic per-(seed, question) stream, identical across methods
    so first attempts are coupled (common random numbers)."""
    h = int.from_bytes(hashlib.sha256(question_id.encode()).digest()[:8], "little")
    return _rng(seed, h)


# ---------------------------------------------------------------------------
# Task generation


def generate_tasks(cfg, out_dir):
    t = cfg["tasks"]
    rng = _rng(t["seed"])
    total = t["train_count"] + t["eval_count"]
    if t["family"] == tasklib.ARITH:
        insts = tasklib.gen_arithmetic(rng, total, t["difficulty"])
    elif t["family"] == tasklib.STRINGS:
        insts = tasklib.gen_string_transform(rng, total)
    else:
        raise HarnessError(f"unknown task family {t['family']!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_path = out_dir / cfg["paths"]["tasks_train"]
    eval_path = out_dir / cfg["paths"]["tasks_eval"]
    tasklib.save_tasks(train_path, insts[: t["train_count"]])
    tasklib.save_tasks(eval_path, insts[t["train_count"]:])
    return train_path, eval_path


# ---------------------------------------------------------------------------
# Pretraining


def _corpus_items(vocab, corpus):
    items = []
    for ex in corpus:
        if ex.kind == "solve":
            items.append(chat.solve_pair(vocab, ex.question, ex.target))
        elif ex.kind == "judge":
            items.append(chat.feedback_pair(vocab, ex.question, ex.target))
        elif ex.kind == "reflect":
            items.append(chat.reflection_pair(vocab, ex.question, ex.target, ex.reflection))
        else:
            raise HarnessError(f"unknown corpus kind {ex.kind!r}")
    return items


def _mean_nll(weights, items):
    total = 0.0
    with ad.no_grad():
        for ctx, tgt in items:
            total += float(model.nll(weights, ctx, tgt).data)
    return total / len(items)


def pretrain(cfg, out_dir, log=print):
    """Next-token training on the task corpus (with the planted bias and the
    feedback-text mixture); writes the checkpoint and a training-curve log.

    Aborts with a diagnostic if validation NLL exceeds twice its initial
    value on three consecutive evaluations.
    """
    out_dir = Path(out_dir)
    train_path = out_dir / cfg["paths"]["tasks_train"]
    if not train_path.exists():
        raise HarnessError(f"missing task file {train_path}; run gen-tasks first")
    insts = tasklib.load_tasks(train_path)
    t = cfg["tasks"]
    p = cfg["pretrain"]
    vocab = Vocab()
    rng = _rng(p["seed"])

    corpus = tasklib.solve_corpus(insts)
    corpus = tasklib.plant_bias(corpus, t["bias_fraction"], rng, t["bias_subfamily"])
    corpus += tasklib.feedback_corpus(insts, rng, t["judge_fraction"], t["reflect_fraction"])
    items = _corpus_items(vocab, corpus)
    order = rng.permutation(len(items))
    n_val = max(1, int(len(items) * p["val_fraction"]))
    val_items = [items[int(i)] for i in order[:n_val]]
    train_items = [items[int(i)] for i in order[n_val:]]

    weights = model.ModelWeights.init(model_config(cfg, vocab.size))
    opt = Adam(weights.tensors, lr=p["lr"])
    batch = p["batch_size"]

    log_rows = []
    initial_val = _mean_nll(weights, val_items)
    log_rows.append((0, "val", initial_val))
    log(f"pretrain: initial val nll {initial_val:.4f} ({len(train_items)} train items)")
    bad_evals = 0
    for epoch in range(1, p["epochs"] + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_items))
        running = 0.0
        for start in range(0, len(order), batch):
            idxs = order[start:start + batch]
            opt.zero_grad()
            for i in idxs:
                ctx, tgt = train_items[int(i)]
                loss = model.nll(weights, ctx, tgt)
                ad.backward(ad.smul(loss, 1.0 / len(idxs)))
                running += float(loss.data)
            opt.step()
        train_nll = running / len(order)
        val_nll = _mean_nll(weights, val_items)
        log_rows.append((epoch, "train", train_nll))
        log_rows.append((epoch, "val", val_nll))
        log(f"pretrain: epoch {epoch} train {train_nll:.4f} val {val_nll:.4f} "
            f"({time.perf_counter() - t0:.1f}s)")
        if val_nll > 2.0 * initial_val:
            bad_evals += 1
            if bad_evals >= 3:
                raise HarnessError(
                    f"pretraining diverged: val nll {val_nll:.4f} > 2x initial "
                    f"{initial_val:.4f} for 3 consecutive evals")
        else:
            bad_evals = 0
        if p["target_val_nll"] > 0 and val_nll <= p["target_val_nll"]:
            log(f"pretrain: reached target val nll {p['target_val_nll']}")
            break

    ckpt = out_dir / cfg["paths"]["checkpoint"]
    weights.save(ckpt)
    with open(out_dir / "pretrain_log.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema={CSV_SCHEMA}\n")
        fh.write("epoch,split,nll\n")
        for epoch, split, nll in log_rows:
            fh.write(f"{epoch},{split},{nll:.6f}\n")
    return ckpt


# ---------------------------------------------------------------------------
# Greedy-failure evaluation subset


def greedy_failure_subset(weights, vocab, insts, cache_dir, max_new=16):
    """Instances the checkpoint fails with greedy decoding; cached under the
    checkpoint content hash."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache = cache_dir / f"subset_{weights.content_hash()[:16]}.json"
    if cache.exists():
        keep = set(json.loads(cache.read_text()))
    else:
        keep = set()
        for inst in insts:
            toks = model.greedy_decode(weights, chat.attempt_context(vocab, inst.question), max_new)
            if not tasklib.verify(inst, vocab.decode_text(toks)).passed:
                keep.add(inst.id)
        cache.write_text(json.dumps(sorted(keep)))
    return [inst for inst in insts if inst.id in keep]


# ---------------------------------------------------------------------------
# Method dispatch


def _extractor(family):
    if family == tasklib.ARITH:
        return tasklib.canonical_int

    def strings_extractor(text):
        s = text.strip()
        return s if s and all("a" <= c <= "z" for c in s) else None

    return strings_extractor


METHODS = ("best_of_n", "self_consistency", "beam_search", "revision",
           "self_refine", "fttt", "fttt_no_reflection", "optune")


def run_method(name, weights, vocab, inst, budget, rng, cfg, predictor=None):
    """One (method, question, budget) cell; returns a SolveResult."""
    scfg = ttt_config(cfg)

    def verifier(text):
        return tasklib.verify(inst, text)

    if name == "best_of_n":
        sampler = baselines.make_sampler(weights, vocab, inst.question, scfg)
        return baselines.best_of_n(sampler, verifier, budget, rng)
    if name == "self_consistency":
        sampler = baselines.make_sampler(weights, vocab, inst.question, scfg)
        vote = baselines.self_consistency(sampler, _extractor(inst.family), budget, rng)
        solved = bool(vote.answer) and verifier(vote.answer).passed
        return ttt.SolveResult(vote.answer, solved, vote.records,
                               generation_calls=vote.generation_calls)
    if name == "beam_search":
        text = baselines.beam_search(weights, vocab, inst.question, budget, scfg.max_new)
        verdict = verifier(text)
        rec = ttt.AttemptRecord(attempt_index=1, attempt=text, verdict=verdict.passed,
                                diagnostic=verdict.kind)
        return ttt.SolveResult(text, verdict.passed, [rec], generation_calls=budget)
    if name == "revision":
        return baselines.revision_loop(weights, vocab, inst.question, verifier, budget, scfg, rng)
    if name == "self_refine":
        critiquer = ttt.make_reflector(scfg.reflection or "oracle", weights, vocab, scfg)
        if critiquer is None:
            critiquer = ttt.OracleReflector()
        return baselines.self_refine_loop(weights, vocab, inst.question, verifier,
                                          budget, scfg, rng, critiquer)
    if name == "fttt":
        return ttt.fttt_solve(weights, vocab, inst.question, verifier, budget, scfg, rng)
    if name == "fttt_no_reflection":
        import dataclasses
        raw_cfg = dataclasses.replace(scfg, reflection="none")
        return ttt.fttt_solve(weights, vocab, inst.question, verifier, budget, raw_cfg, rng)
    if name == "optune":
        if predictor is None:
            raise HarnessError("optune method requires a trained predictor checkpoint")
        return learned_opt.optune_solve(weights, vocab, predictor, inst.question,
                                        verifier, budget, scfg, rng)
    raise HarnessError(f"unknown method {name!r} (known: {', '.join(METHODS)})")


# ---------------------------------------------------------------------------
# Sweeps


def _scan_traces(trace_path):
    done = {}
    if not trace_path.exists():
        return done
    with open(trace_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            key = (rec["method"], rec["budget"], rec["seed"], rec["qid"])
            done[key] = (rec["solved"], rec["calls"])
    return done


def run_sweep(cfg, out_dir, log=print):
    """method x budget x seed over the greedy-failure subset.

    Appends per-question trace records (resume skips completed cells) and
    writes the deterministic aggregate CSV plus a timing sidecar.
    """
    out_dir = Path(out_dir)
    ckpt = out_dir / cfg["paths"]["checkpoint"]
    if not ckpt.exists():
        raise HarnessError(f"missing checkpoint {ckpt}; run pretrain first")
    eval_path = out_dir / cfg["paths"]["tasks_eval"]
    if not eval_path.exists():
        raise HarnessError(f"missing task file {eval_path}; run gen-tasks first")
    weights = model.ModelWeights.load(ckpt)
    vocab = Vocab()
    insts = tasklib.load_tasks(eval_path)
    sw = cfg["sweep"]
    subset = greedy_failure_subset(weights, vocab, insts, out_dir,
                                   cfg["sampling"]["max_new"])[: sw["max_questions"]]
    if not subset:
        raise HarnessError("greedy-failure subset is empty; nothing to evaluate")
    log(f"sweep: {len(subset)} greedy-failure questions, methods {sw['methods']}, "
        f"budgets {sw['budgets']}, seeds {sw['seeds']}")

    predictor = None
    if "optune" in sw["methods"]:
        ppath = out_dir / cfg["paths"]["predictor"]
        if not ppath.exists():
            raise HarnessError(f"missing predictor checkpoint {ppath}; run meta-train first")
        predictor = learned_opt.UpdatePredictor.load(ppath)

    trace_path = out_dir / "traces.jsonl"
    results = _scan_traces(trace_path)
    wall = {}
    with open(trace_path, "a", encoding="utf-8") as tracef:
        for method in sw["methods"]:
            for budget in sw["budgets"]:
                for seed in sw["seeds"]:
                    t_cell = time.perf_counter()
                    fresh = 0
                    for inst in subset:
                        key = (method, budget, seed, inst.id)
                        if key in results:
                            continue
                        rng = question_rng(seed, inst.id)
                        t0 = time.perf_counter()
                        try:
                            res = run_method(method, weights, vocab, inst, budget, rng,
                                             cfg, predictor)
                        except (ttt.VerifierAbort, ad.EngineError) as exc:
                            print(f"sweep: {method} b{budget} s{seed} {inst.id} failed: {exc}",
                                  file=sys.stderr)
                            rec = {"method": method, "budget": budget, "seed": seed,
                                   "qid": inst.id, "solved": False, "calls": 0,
                                   "error": str(exc), "wall_ms": 0.0, "attempts": []}
                            tracef.write(json.dumps(rec, sort_keys=True) + "\n")
                            results[key] = (False, 0)
                            continue
                        wall_ms = (time.perf_counter() - t0) * 1e3
                        if res.generation_calls > budget:
                            raise HarnessError(
                                f"{method}: {res.generation_calls} generation calls "
                                f"exceed budget {budget}")
                        rec = {
                            "method": method, "budget": budget, "seed": seed,
                            "qid": inst.id, "solved": bool(res.solved),
                            "calls": res.generation_calls, "wall_ms": round(wall_ms, 3),
                            "attempts": [
                                {"n": r.attempt_index, "attempt": r.attempt,
                                 "verdict": r.verdict, "diagnostic": r.diagnostic,
                                 "reflection": r.reflection, "loss": r.loss,
                                 "wall_ms": round(r.wall_ms, 3)}
                                for r in res.records
                            ],
                        }
                        tracef.write(json.dumps(rec, sort_keys=True) + "\n")
                        tracef.flush()
                        results[key] = (bool(res.solved), res.generation_calls)
                        fresh += 1
                    wall[(method, budget, seed)] = time.perf_counter() - t_cell
                    solved = sum(1 for inst in subset
                                 if results[(method, budget, seed, inst.id)][0])
                    log(f"sweep: {method} budget {budget} seed {seed}: "
                        f"{solved}/{len(subset)} solved ({fresh} fresh)")

    agg_path = out_dir / "aggregate.csv"
    qids = [inst.id for inst in subset]
    with open(agg_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema={CSV_SCHEMA}\n")
        fh.write("method,budget,seed,solve_rate,generation_calls,n_questions\n")
        for method in sorted(sw["methods"]):
            for budget in sorted(sw["budgets"]):
                for seed in sorted(sw["seeds"]):
                    cells = [results[(method, budget, seed, q)] for q in qids]
                    rate = sum(1 for s, _ in cells if s) / len(cells)
                    calls = sum(c for _, c in cells)
                    fh.write(f"{method},{budget},{seed},{rate:.6f},{calls},{len(cells)}\n")
    with open(out_dir / "timings.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema={CSV_SCHEMA}\n")
        fh.write("method,budget,seed,wall_s\n")
        for (method, budget, seed), secs in sorted(wall.items()):
            fh.write(f"{method},{budget},{seed},{secs:.3f}\n")
    return agg_path


# ---------------------------------------------------------------------------
# Meta-training entry


def run_meta_train(cfg, out_dir, log=print):
    out_dir = Path(out_dir)
    ckpt = out_dir / cfg["paths"]["checkpoint"]
    if not ckpt.exists():
        raise HarnessError(f"missing checkpoint {ckpt}; run pretrain first")
    train_path = out_dir / cfg["paths"]["tasks_train"]
    if not train_path.exists():
        raise HarnessError(f"missing task file {train_path}; run gen-tasks first")
    weights = model.ModelWeights.load(ckpt)
    vocab = Vocab()
    insts = tasklib.load_tasks(train_path)[: cfg["meta"]["train_count"]]
    rng = _rng(cfg["meta"]["seed"])
    mcfg = meta_train_config(cfg)
    predictor = learned_opt.UpdatePredictor.init(weights, predictor_config(cfg))

    t0 = time.perf_counter()
    triples = learned_opt.build_meta_triples(weights, vocab, insts, tasklib.verify, mcfg, rng)
    log(f"meta-train: {len(triples)} failure triples from {len(insts)} examples "
        f"({time.perf_counter() - t0:.1f}s)")
    if not triples:
        raise HarnessError("no failed attempts sampled; nothing to meta-train on")
    history = learned_opt.meta_train(
        weights, vocab, predictor, triples, mcfg, rng,
        log_cb=lambda e, l: log(f"meta-train: epoch {e} mean loss {l:.4f}"))
    ppath = out_dir / cfg["paths"]["predictor"]
    predictor.save(ppath)
    with open(out_dir / "meta_log.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema={CSV_SCHEMA}\n")
        fh.write("epoch,mean_meta_loss\n")
        for i, loss in enumerate(history):
            fh.write(f"{i},{loss:.6f}\n")
    return ppath, history


# ---------------------------------------------------------------------------
# Reporting


def _read_aggregate(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = None
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                continue
            vals = dict(zip(header, line.split(",")))
            rows.append({"method": vals["method"], "budget": int(vals["budget"]),
                         "seed": int(vals["seed"]), "solve_rate": float(vals["solve_rate"])})
    return rows


def report(results_dir, log=print):
    """Mean and population std of solve rate across seeds per method/budget;
    writes summary.csv and prints the table."""
    results_dir = Path(results_dir)
    files = sorted(results_dir.rglob("aggregate*.csv"))
    rows = [r for f in files for r in _read_aggregate(f)]
    if not rows:
        raise HarnessError(f"no runs found under {results_dir}")

    grids = {}
    for r in rows:
        grids.setdefault((r["method"], r["seed"]), set()).add(r["budget"])
    by_method = {}
    for (method, seed), budgets in grids.items():
        by_method.setdefault(method, {})[seed] = budgets
    for method, per_seed in by_method.items():
        ref_seed = min(per_seed)
        ref = per_seed[ref_seed]
        for seed, budgets in per_seed.items():
            if budgets != ref:
                raise HarnessError(
                    f"inconsistent budget grids for {method}: seed {seed} has "
                    f"{sorted(budgets)}, seed {ref_seed} has {sorted(ref)}")

    cells = {}
    for r in rows:
        cells.setdefault((r["method"], r["budget"]), []).append(r["solve_rate"])
    summary = []
    for (method, budget), rates in sorted(cells.items()):
        arr = np.asarray(rates, dtype=np.float64)
        summary.append((method, budget, len(rates), arr.mean(), arr.std()))

    out = results_dir / "summary.csv"
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema={CSV_SCHEMA}\n")
        fh.write("method,budget,n_seeds,mean_solve_rate,std_solve_rate\n")
        for method, budget, n, mu, sd in summary:
            fh.write(f"{method},{budget},{n},{mu:.6f},{sd:.6f}\n")

    log(f"{'method':<20}{'budget':>8}{'seeds':>7}{'mean':>10}{'std':>10}")
    for method, budget, n, mu, sd in summary:
        log(f"{method:<20}{budget:>8}{n:>7}{mu:>10.4f}{sd:>10.4f}")
    return out

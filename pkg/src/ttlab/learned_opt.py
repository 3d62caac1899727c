"""Learned test-time optimizer in the gradient space.

A failed attempt is compressed into per-token (input, output-gradient)
vector pairs on target linear layers via one backward pass; a small shared
bottleneck network transforms each pair and the weight update is rebuilt as
the mean of the transformed outer products.  Training maximizes the
likelihood of the ground-truth answer under the updated weights, with the
inner gradient pairs treated as constants (first-order truncation).
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import chat, model, serialize
from .optim import Adam
from .tokenizer import ASST, USER
from .ttt import AttemptRecord, SolveResult, VerifierAbort, frozen

import time


@dataclass
class GradPair:
    """One token's decomposed gradient contribution on one linear layer."""

    u: np.ndarray      # layer input, width d_in
    delta: np.ndarray  # loss gradient w.r.t. layer output, width d_out
    layer_id: str
    token_index: int


def pairs_from_tap(tap):
    return [GradPair(u=tap.inputs[t], delta=tap.output_grads[t],
                     layer_id=tap.layer_id, token_index=t)
            for t in range(tap.count)]


def _stack_pairs(pairs):
    if not pairs:
        raise ValueError("no gradient pairs given")
    lids = {p.layer_id for p in pairs}
    if len(lids) != 1:
        raise ValueError(f"pairs span multiple layers: {sorted(lids)}")
    u = np.stack([p.u for p in pairs])
    d = np.stack([p.delta for p in pairs])
    return u, d


@dataclass
class PredictorConfig:
    rank: int = 16
    dropout: float = 0.1
    scale: float = 1.0
    norm_eps: float = 1e-6
    seed: int = 0


def default_target_layers(model_config):
    """Query/value projections of the last two transformer blocks."""
    last = model_config.n_layers
    blocks = range(max(0, last - 2), last)
    return [f"blk{k}.{p}" for k in blocks for p in ("q", "v")]


class UpdatePredictor:
    """Shared per-shape-group transform of (u, delta) pairs.

    For each (d_in, d_out) group: theta1 [rank, d_in+d_out] and theta2
    [d_in+d_out, rank], theta2 zero-initialized so the initial transform is
    the residual (normalize-only) map.  Parameters are shared across all
    target layers of the same shape.
    """

    def __init__(self, config, target_layers, groups, layer_shapes):
        self.config = config
        self.target_layers = list(target_layers)
        self.groups = groups              # (d_in, d_out) -> {"theta1": Tensor, "theta2": Tensor}
        self.layer_shapes = layer_shapes  # layer_id -> (d_in, d_out)

    @classmethod
    def init(cls, weights, config=None, target_layers=None):
        config = config or PredictorConfig()
        targets = list(target_layers) if target_layers is not None else default_target_layers(weights.config)
        rng = np.random.Generator(np.random.PCG64(config.seed))
        dtype = weights.dtype
        shapes = {}
        groups = {}
        for lid in targets:
            if lid not in weights.tensors:
                raise ValueError(f"unknown target layer {lid!r}")
            d_in, d_out = weights.layer_shape(lid)
            shapes[lid] = (d_in, d_out)
            key = (d_in, d_out)
            if key not in groups:
                width = d_in + d_out
                theta1 = ad.Tensor(rng.normal(0.0, 1.0 / np.sqrt(width), size=(config.rank, width)),
                                   requires_grad=True, dtype=dtype)
                theta2 = ad.Tensor(np.zeros((width, config.rank)), requires_grad=True, dtype=dtype)
                groups[key] = {"theta1": theta1, "theta2": theta2}
        return cls(config, targets, groups, shapes)

    def params(self):
        out = {}
        for (d_in, d_out), g in sorted(self.groups.items()):
            out[f"group{d_in}x{d_out}.theta1"] = g["theta1"]
            out[f"group{d_in}x{d_out}.theta2"] = g["theta2"]
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.grad = None

    def transform(self, u_arr, d_arr, train=False, rng=None):
        """Batched pair transform: rows of u_arr [T, d_in] and d_arr [T, d_out]
        are normalized per vector, passed through the bottleneck with a
        residual path, and split back into (u_tilde, delta_tilde) tensors."""
        d_in, d_out = u_arr.shape[1], d_arr.shape[1]
        key = (d_in, d_out)
        if key not in self.groups:
            raise ValueError(f"no parameter group for shape {key}")
        g = self.groups[key]
        eps = self.config.norm_eps
        ub = ad.standardize(ad.constant(u_arr), eps)
        db = ad.standardize(ad.constant(d_arr), eps)
        x = ad.concat([ub, db], axis=1)
        h = ad.matmul(x, g["theta1"], transpose_b=True)
        if train and self.config.dropout > 0.0:
            h = ad.dropout(h, self.config.dropout, rng)
        h = ad.matmul(h, g["theta2"], transpose_b=True)
        y = ad.add(h, x)
        return ad.narrow(y, 1, 0, d_in), ad.narrow(y, 1, d_in, d_in + d_out)

    def transform_pair(self, pair, train=False, rng=None):
        """Single-pair convenience wrapper; returns (u_tilde, delta_tilde)
        as 1-D arrays."""
        ut, dt = self.transform(pair.u.reshape(1, -1), pair.delta.reshape(1, -1), train, rng)
        return ut.data[0], dt.data[0]

    def predict_update(self, pairs, train=False, rng=None):
        """Mean of transformed outer products over a layer's token pairs,
        as a differentiable [d_out, d_in] tensor."""
        if isinstance(pairs, tuple):
            u_arr, d_arr = pairs
        else:
            u_arr, d_arr = _stack_pairs(pairs)
        ut, dt = self.transform(u_arr, d_arr, train, rng)
        return ad.smul(ad.matmul(dt, ut, transpose_a=True), 1.0 / u_arr.shape[0])

    def save(self, path):
        meta = {
            "kind": "predictor",
            "config": asdict(self.config),
            "target_layers": self.target_layers,
            "layer_shapes": {lid: list(s) for lid, s in self.layer_shapes.items()},
            "groups": [list(k) for k in sorted(self.groups)],
        }
        tensors = {}
        for (d_in, d_out), g in self.groups.items():
            tensors[f"group{d_in}x{d_out}.theta1"] = g["theta1"].data
            tensors[f"group{d_in}x{d_out}.theta2"] = g["theta2"].data
        serialize.save_checkpoint(path, meta, tensors)

    @classmethod
    def load(cls, path):
        meta, arrays = serialize.load_checkpoint(path)
        if meta.get("kind") != "predictor":
            raise ValueError(f"{path}: not a predictor checkpoint")
        config = PredictorConfig(**meta["config"])
        groups = {}
        for key in meta["groups"]:
            d_in, d_out = key
            groups[(d_in, d_out)] = {
                "theta1": ad.Tensor(arrays[f"group{d_in}x{d_out}.theta1"], requires_grad=True),
                "theta2": ad.Tensor(arrays[f"group{d_in}x{d_out}.theta2"], requires_grad=True),
            }
        shapes = {lid: tuple(s) for lid, s in meta["layer_shapes"].items()}
        return cls(config, meta["target_layers"], groups, shapes)


# ---------------------------------------------------------------------------
# Gradient-based input compression


def compress_loss(weights, vocab, question, attempt, feedback=chat.FEEDBACK_TEXT, taps=None):
    """Mean NLL of the attempt given the question plus the feedback loss,
    fused into one forward so a single backward fills all taps."""
    if not attempt:
        raise ValueError("compress_loss: empty attempt")
    q_toks = vocab.encode(question)
    a_toks = vocab.encode(attempt)
    f_toks = vocab.encode(feedback)
    tokens = [USER] + q_toks + [ASST] + a_toks + [USER] + f_toks
    if len(tokens) > weights.config.max_seq_len + 1:
        raise ad.EngineError("compress_loss: transcript exceeds max_seq_len")
    logits = model.forward(weights, tokens[:-1], taps=taps)
    losses = ad.cross_entropy_with_logits(logits, np.asarray(tokens[1:], dtype=np.int64))
    a_start = 1 + len(q_toks) + 1  # position of the first attempt token
    a_span = ad.narrow(losses, 0, a_start - 1, a_start - 1 + len(a_toks))
    f_start = a_start + len(a_toks) + 1
    f_span = ad.narrow(losses, 0, f_start - 1, f_start - 1 + len(f_toks))
    return ad.add(ad.mean(a_span), ad.mean(f_span))


def collect_pairs(weights, vocab, question, attempt, feedback=chat.FEEDBACK_TEXT,
                  target_layers=None):
    """Backward through the compression loss with taps registered on the
    target layers; returns {layer_id: (U, D)} per-token pair arrays."""
    targets = list(target_layers) if target_layers is not None else default_target_layers(weights.config)
    taps = weights.tap_registry()
    for lid in targets:
        taps.register(lid)
    loss = compress_loss(weights, vocab, question, attempt, feedback, taps=taps)
    ad.backward(loss)
    out = {lid: (taps[lid].inputs, taps[lid].output_grads) for lid in targets}
    weights.zero_grad()
    return out, float(loss.data)


def apply_updates(weights, updates, scale):
    """Non-destructive overlay: {layer_id: W + scale * update} for the given
    layers; all other weights resolve to the base tensors."""
    overrides = {}
    for lid, upd in updates.items():
        base = weights.tensors.get(lid)
        if base is None:
            raise ValueError(f"apply_updates: unknown layer {lid!r}")
        data = upd.data if isinstance(upd, ad.Tensor) else np.asarray(upd)
        if data.shape != base.data.shape:
            raise ad.ShapeMismatch("apply_updates", base.data.shape, data.shape)
        upd_t = upd if isinstance(upd, ad.Tensor) else ad.constant(data, dtype=base.data.dtype)
        overrides[lid] = ad.add(base, ad.smul(upd_t, scale))
    return overrides


# ---------------------------------------------------------------------------
# Meta objective and training


def meta_loss(weights, vocab, predictor, question, attempt, answer,
              feedback=chat.FEEDBACK_TEXT, train=False, rng=None):
    """NLL of the ground-truth answer under the predicted-update overlay.

    Differentiable w.r.t. the predictor parameters; the inner gradient pairs
    are constants (no second-order path through the compression backward).
    """
    if not answer:
        raise ValueError("meta_loss: missing ground-truth answer")
    pair_arrays, _ = collect_pairs(weights, vocab, question, attempt, feedback,
                                   predictor.target_layers)
    updates = {lid: predictor.predict_update(pair_arrays[lid], train, rng)
               for lid in predictor.target_layers}
    with frozen(weights):
        overrides = apply_updates(weights, updates, predictor.config.scale)
        ctx, tgt = chat.solve_pair(vocab, question, answer, with_eos=False)
        return model.nll(weights, ctx, tgt, overrides=overrides)


@dataclass
class MetaTrainConfig:
    epochs: int = 3
    batch_size: int = 20
    lr: float = 1e-5
    attempts_per_example: int = 10
    temperature: float = 0.6
    top_p: float = 0.95
    max_new: int = 16
    feedback_text: str = chat.FEEDBACK_TEXT


def build_meta_triples(weights, vocab, instances, verifier, cfg, rng):
    """Pre-sample attempts for each training example and keep the failures
    as (question, attempt, answer) triples."""
    triples = []
    for inst in instances:
        if not inst.answer:
            raise ValueError(f"instance {inst.id}: no ground truth")
        ctx = chat.attempt_context(vocab, inst.question)
        for _ in range(cfg.attempts_per_example):
            toks = model.nucleus_sample(weights, ctx, cfg.max_new, cfg.temperature,
                                        cfg.top_p, rng)
            text = vocab.decode_text(toks)
            if not verifier(inst, text).passed:
                triples.append((inst.question, text, inst.answer))
    return triples


def mean_meta_loss(weights, vocab, predictor, triples, feedback=chat.FEEDBACK_TEXT):
    total = 0.0
    for q, a, ans in triples:
        total += float(meta_loss(weights, vocab, predictor, q, a, ans, feedback).data)
    return total / len(triples)


def meta_train(weights, vocab, predictor, triples, cfg, rng, log_cb=None):
    """Adam on the predictor parameters over the failure triples; returns the
    per-epoch mean-loss history (epoch 0 is the pre-training evaluation)."""
    if not triples:
        raise ValueError("meta_train: no training triples (did every attempt pass?)")
    opt = Adam(predictor.params(), lr=cfg.lr)
    history = [mean_meta_loss(weights, vocab, predictor, triples, cfg.feedback_text)]
    if log_cb:
        log_cb(0, history[0])
    order_rng = rng
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(triples))
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                q, a, ans = triples[int(idx)]
                loss = meta_loss(weights, vocab, predictor, q, a, ans,
                                 cfg.feedback_text, train=True, rng=rng)
                ad.backward(ad.smul(loss, 1.0 / len(batch)))
                running += float(loss.data)
            opt.step()
            weights.zero_grad()
        history.append(running / len(order))
        if log_cb:
            log_cb(epoch, history[-1])
    final = mean_meta_loss(weights, vocab, predictor, triples, cfg.feedback_text)
    history.append(final)
    if log_cb:
        log_cb(cfg.epochs + 1, final)
    return history


# ---------------------------------------------------------------------------
# Solving with the trained predictor


def refine_attempt(weights, vocab, predictor, question, failed_attempt,
                   feedback=chat.FEEDBACK_TEXT, max_new=16):
    """Greedy decode under the overlay predicted from one failed attempt;
    the overlay is local to this call and discarded afterwards."""
    pair_arrays, _ = collect_pairs(weights, vocab, question, failed_attempt,
                                   feedback, predictor.target_layers)
    with ad.no_grad():
        updates = {lid: predictor.predict_update(pair_arrays[lid])
                   for lid in predictor.target_layers}
        overrides = apply_updates(weights, updates, predictor.config.scale)
    toks = model.greedy_decode(weights, chat.attempt_context(vocab, question),
                               max_new, overrides=overrides)
    return vocab.decode_text(toks)


def optune_solve(weights, vocab, predictor, question, verifier, budget, cfg, rng):
    """Alternate raw-model sampling with predicted refinements.

    Odd attempts are nucleus samples from the raw model; each even attempt
    greedily decodes under the overlay predicted from the preceding failed
    attempt (latest attempt only, per the Markov reading).  Success returns
    immediately; every attempt consumes budget.
    """
    if budget < 1:
        raise ValueError("optune_solve: budget must be >= 1")
    records = []
    calls = 0
    ctx = chat.attempt_context(vocab, question)
    text = ""
    last_failed = None
    for n in range(1, budget + 1):
        t0 = time.perf_counter()
        if n % 2 == 1 or last_failed is None:
            toks = model.nucleus_sample(weights, ctx, cfg.max_new, cfg.temperature,
                                        cfg.top_p, rng)
            text = vocab.decode_text(toks)
        else:
            text = refine_attempt(weights, vocab, predictor, question, last_failed,
                                  cfg.feedback_text, cfg.max_new)
        calls += 1
        try:
            verdict = verifier(text)
        except Exception as exc:
            raise VerifierAbort(exc, records) from exc
        records.append(AttemptRecord(attempt_index=n, attempt=text, verdict=verdict.passed,
                                     diagnostic=verdict.kind,
                                     wall_ms=(time.perf_counter() - t0) * 1e3))
        if verdict.passed:
            return SolveResult(text, True, records, generation_calls=calls)
        last_failed = text
    return SolveResult(text, False, records, generation_calls=calls)

"""Decoder-only toy transformer on the autodiff engine.

Pre-norm blocks, learned absolute positional embeddings, no biases on the
projections so every weight matrix is a plain tappable linear layer.  The
forward pass accepts per-layer weight overrides (non-destructive overlays)
and low-rank adapter branches, which is how test-time tuning plugs in
without touching base weights.
"""

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import serialize
from .tokenizer import EOS


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, field) <= 0:
                raise ValueError(f"ModelConfig.{field} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")


_PROJ_SHAPES = {
    "q": lambda c: (c.d_model, c.d_model),
    "k": lambda c: (c.d_model, c.d_model),
    "v": lambda c: (c.d_model, c.d_model),
    "o": lambda c: (c.d_model, c.d_model),
    "fc1": lambda c: (c.d_ff, c.d_model),
    "fc2": lambda c: (c.d_model, c.d_ff),
}


class ModelWeights:
    """Named weight tensors addressable by stable layer ids."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config, dtype=np.float32):
        rng = np.random.Generator(np.random.PCG64(config.seed))
        std = 0.02
        resid_std = std / np.sqrt(2.0 * config.n_layers)
        t = {}

        def normal(shape, scale):
            return ad.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=dtype)

        t["embed.tok"] = normal((config.vocab_size, config.d_model), std)
        t["embed.pos"] = normal((config.max_seq_len, config.d_model), std)
        for k in range(config.n_layers):
            for name, shape_fn in _PROJ_SHAPES.items():
                scale = resid_std if name in ("o", "fc2") else std
                t[f"blk{k}.{name}"] = normal(shape_fn(config), scale)
            for ln in ("ln1", "ln2"):
                t[f"blk{k}.{ln}.scale"] = ad.Tensor(np.ones(config.d_model), requires_grad=True, dtype=dtype)
                t[f"blk{k}.{ln}.offset"] = ad.Tensor(np.zeros(config.d_model), requires_grad=True, dtype=dtype)
        t["final.scale"] = ad.Tensor(np.ones(config.d_model), requires_grad=True, dtype=dtype)
        t["final.offset"] = ad.Tensor(np.zeros(config.d_model), requires_grad=True, dtype=dtype)
        t["unembed"] = normal((config.vocab_size, config.d_model), std)
        return cls(config, t)

    @property
    def dtype(self):
        return self.tensors["unembed"].data.dtype

    def linear_ids(self):
        ids = []
        for k in range(self.config.n_layers):
            ids.extend(f"blk{k}.{name}" for name in _PROJ_SHAPES)
        ids.append("unembed")
        return ids

    def layer_shape(self, layer_id):
        """(d_in, d_out) of a linear layer."""
        w = self.tensors[layer_id].data
        return (w.shape[1], w.shape[0])

    def tap_registry(self):
        return ad.TapRegistry(valid_ids=self.linear_ids())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def to_dtype(self, dtype):
        return ModelWeights(
            self.config,
            {n: ad.Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype) for n, t in self.tensors.items()},
        )

    def content_hash(self):
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()

    def save(self, path):
        meta = {"kind": "model", "config": asdict(self.config)}
        serialize.save_checkpoint(path, meta, {n: t.data for n, t in self.tensors.items()})

    @classmethod
    def load(cls, path):
        meta, arrays = serialize.load_checkpoint(path)
        if meta.get("kind") != "model":
            raise ValueError(f"{path}: not a model checkpoint")
        config = ModelConfig(**meta["config"])
        tensors = {n: ad.Tensor(a, requires_grad=True) for n, a in arrays.items()}
        return cls(config, tensors)


_mask_cache = {}


def _causal_mask(t, dtype):
    key = (t, np.dtype(dtype).name)
    m = _mask_cache.get(key)
    if m is None:
        m = np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)
        _mask_cache[key] = m
    return m


def forward(weights, tokens, overrides=None, adapters=None, taps=None, train=False, rng=None):
    """Run the transformer over a token sequence; returns [T, vocab] logits.

    overrides: {layer_id: Tensor} replaces a linear weight for this pass.
    adapters:  {layer_id: adapter} adds a low-rank branch
               x @ A.T @ B.T (input dropped out when train=True).
    taps:      TapRegistry capturing (u, delta) pairs on backward.
    """
    cfg = weights.config
    ids = np.asarray(tokens, dtype=np.int64)
    t_len = ids.shape[0]
    if t_len == 0:
        raise ad.EngineError("forward: empty token sequence")
    if t_len > cfg.max_seq_len:
        raise ad.EngineError(f"forward: sequence length {t_len} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise ad.EngineError("forward: token id out of range")

    def w(name):
        if overrides is not None and name in overrides:
            return overrides[name]
        return weights.tensors[name]

    def proj(x, layer_id):
        y = ad.linear(x, w(layer_id), layer_id=layer_id, taps=taps)
        if adapters is not None and layer_id in adapters:
            a = adapters[layer_id]
            xin = ad.dropout(x, a.dropout, rng) if (train and a.dropout > 0.0) else x
            y = ad.add(y, ad.matmul(ad.matmul(xin, a.a, transpose_b=True), a.b, transpose_b=True))
        return y

    x = ad.add(ad.embedding(w("embed.tok"), ids), ad.embedding(w("embed.pos"), np.arange(t_len)))
    d_head = cfg.d_model // cfg.n_heads
    mask = _causal_mask(t_len, weights.dtype)
    inv_sqrt = 1.0 / np.sqrt(d_head)

    for k in range(cfg.n_layers):
        h = ad.layer_norm(x, w(f"blk{k}.ln1.scale"), w(f"blk{k}.ln1.offset"))
        q = proj(h, f"blk{k}.q")
        key = proj(h, f"blk{k}.k")
        val = proj(h, f"blk{k}.v")
        heads = []
        for i in range(cfg.n_heads):
            lo, hi = i * d_head, (i + 1) * d_head
            qh = ad.narrow(q, 1, lo, hi)
            kh = ad.narrow(key, 1, lo, hi)
            vh = ad.narrow(val, 1, lo, hi)
            scores = ad.add_const(ad.smul(ad.matmul(qh, kh, transpose_b=True), inv_sqrt), mask)
            heads.append(ad.matmul(ad.softmax(scores), vh))
        attn = heads[0] if cfg.n_heads == 1 else ad.concat(heads, axis=1)
        x = ad.add(x, proj(attn, f"blk{k}.o"))

        h2 = ad.layer_norm(x, w(f"blk{k}.ln2.scale"), w(f"blk{k}.ln2.offset"))
        x = ad.add(x, proj(ad.gelu(proj(h2, f"blk{k}.fc1")), f"blk{k}.fc2"))

    x = ad.layer_norm(x, w("final.scale"), w("final.offset"))
    return proj(x, "unembed")


def nll(weights, context, target, **fwd_kwargs):
    """Length-normalized negative log-likelihood of target given context.

    Differentiable; equals (1/len(target)) sum_t -log p(target_t | prefix).
    """
    context = list(context)
    target = list(target)
    if not target:
        raise ad.EngineError("nll: empty target")
    if not context:
        raise ad.EngineError("nll: empty context")
    total = len(context) + len(target)
    if total > weights.config.max_seq_len:
        raise ad.EngineError(
            f"nll: context+target length {total} exceeds max_seq_len {weights.config.max_seq_len}"
        )
    tokens = context + target
    logits = forward(weights, tokens[:-1], **fwd_kwargs)
    losses = ad.cross_entropy_with_logits(logits, np.asarray(tokens[1:], dtype=np.int64))
    span = ad.narrow(losses, 0, len(context) - 1, len(context) - 1 + len(target))
    return ad.mean(span)


def next_token_logits(weights, tokens, overrides=None, adapters=None):
    """Logits for the next token after ``tokens`` (no graph recorded)."""
    with ad.no_grad():
        logits = forward(weights, tokens, overrides=overrides, adapters=adapters)
    return logits.data[-1]


def greedy_decode(weights, context, max_new, overrides=None, adapters=None):
    """Argmax decoding; stops at <eos>, max_new tokens, or the context cap."""
    if max_new < 1:
        raise ValueError("greedy_decode: max_new must be >= 1")
    cfg = weights.config
    if len(context) > cfg.max_seq_len:
        raise ad.EngineError(f"greedy_decode: context length {len(context)} exceeds max_seq_len")
    toks = list(context)
    out = []
    for _ in range(max_new):
        if len(toks) >= cfg.max_seq_len:
            break
        nxt = int(np.argmax(next_token_logits(weights, toks, overrides, adapters)))
        if nxt == EOS:
            break
        out.append(nxt)
        toks.append(nxt)
    return out


def nucleus_sample(weights, context, max_new, temperature, top_p, rng,
                   overrides=None, adapters=None):
    """Top-p sampling with temperature.

    At each step logits are divided by temperature and softmaxed; tokens are
    sorted by descending probability and the nucleus is the shortest prefix
    whose cumulative mass reaches top_p (the crossing token is included).
    """
    if temperature <= 0.0:
        raise ValueError("nucleus_sample: temperature must be > 0")
    if not (0.0 < top_p <= 1.0):
        raise ValueError("nucleus_sample: top_p must be in (0, 1]")
    if max_new < 1:
        raise ValueError("nucleus_sample: max_new must be >= 1")
    cfg = weights.config
    if len(context) > cfg.max_seq_len:
        raise ad.EngineError(f"nucleus_sample: context length {len(context)} exceeds max_seq_len")
    toks = list(context)
    out = []
    for _ in range(max_new):
        if len(toks) >= cfg.max_seq_len:
            break
        logits = next_token_logits(weights, toks, overrides, adapters).astype(np.float64)
        logits /= temperature
        logits -= logits.max()
        probs = np.exp(logits)
        probs /= probs.sum()
        order = np.argsort(-probs, kind="stable")
        cum = np.cumsum(probs[order])
        cut = min(int(np.searchsorted(cum, top_p, side="left")), probs.size - 1)
        keep = order[: cut + 1]
        kp = probs[keep] / probs[keep].sum()
        nxt = int(rng.choice(keep, p=kp))
        if nxt == EOS:
            break
        out.append(nxt)
        toks.append(nxt)
    return out

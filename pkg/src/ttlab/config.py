"""Experiment configuration.

A nested key-value file (YAML) merged over the defaults below; a persisted
config plus its seeds reproduces a run exactly.  Section helpers build the
typed configs the library modules take.
"""

import copy

import yaml

from .learned_opt import MetaTrainConfig, PredictorConfig
from .model import ModelConfig
from .ttt import TTTConfig

DEFAULTS = {
    "model": {
        "d_model": 64,
        "n_layers": 4,
        "n_heads": 4,
        "d_ff": 256,
        "max_seq_len": 256,
        "seed": 0,
    },
    "tasks": {
        "family": "arith",
        "difficulty": 1,
        "train_count": 4000,
        "eval_count": 400,
        "seed": 1234,
        "bias_fraction": 0.7,
        "bias_subfamily": "add_carry",
        "judge_fraction": 0.25,
        "reflect_fraction": 0.15,
    },
    "pretrain": {
        "epochs": 12,
        "lr": 3e-3,
        "batch_size": 16,
        "val_fraction": 0.05,
        "target_val_nll": 0.0,
        "seed": 7,
    },
    "sampling": {
        "temperature": 0.6,
        "top_p": 0.95,
        "max_new": 16,
    },
    "ttt": {
        "lora_rank": 4,
        "lora_dropout": 0.05,
        "lr": 1e-5,
        "reflection": "oracle",
    },
    "predictor": {
        "rank": 16,
        "dropout": 0.1,
        "scale": 1.0,
        "seed": 0,
    },
    "meta": {
        "epochs": 3,
        "batch_size": 20,
        "lr": 1e-3,
        "attempts_per_example": 10,
        "train_count": 500,
        "seed": 99,
    },
    "sweep": {
        "methods": ["best_of_n", "fttt"],
        "budgets": [2, 4, 8],
        "seeds": [0, 1, 2],
        "max_questions": 150,
    },
    "paths": {
        "tasks_train": "tasks_train.jsonl",
        "tasks_eval": "tasks_eval.jsonl",
        "checkpoint": "model.ckpt",
        "predictor": "predictor.ckpt",
    },
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None):
    """Defaults merged with the YAML file at ``path`` (if given)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
        cfg = _merge(cfg, user)
    return cfg


def save_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def model_config(cfg, vocab_size):
    m = cfg["model"]
    return ModelConfig(vocab_size=vocab_size, d_model=m["d_model"], n_layers=m["n_layers"],
                       n_heads=m["n_heads"], d_ff=m["d_ff"], max_seq_len=m["max_seq_len"],
                       seed=m["seed"])


def ttt_config(cfg):
    s = cfg["sampling"]
    t = cfg["ttt"]
    return TTTConfig(lora_rank=t["lora_rank"], lora_dropout=t["lora_dropout"], lr=t["lr"],
                     temperature=s["temperature"], top_p=s["top_p"], max_new=s["max_new"],
                     reflection=t["reflection"])


def predictor_config(cfg):
    p = cfg["predictor"]
    return PredictorConfig(rank=p["rank"], dropout=p["dropout"], scale=p["scale"],
                           seed=p["seed"])


def meta_train_config(cfg):
    m = cfg["meta"]
    s = cfg["sampling"]
    return MetaTrainConfig(epochs=m["epochs"], batch_size=m["batch_size"], lr=m["lr"],
                           attempts_per_example=m["attempts_per_example"],
                           temperature=s["temperature"], top_p=s["top_p"],
                           max_new=s["max_new"])

"""Capture per-layer, per-head K/Q/V streams from a decoder model.

Keys and queries are captured *after* rotary position encoding (the
geometry analyses downstream operate on keys as attended); values are
taken exactly as the model's KV cache stores them. The capture works by
running one forward pass over the prompt with the cache enabled and
temporarily wrapping the model's rotary-embedding helper to record the
rotated query states per layer.
"""

import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch

from .kvtr import write_kvtr


class ConfigError(ValueError):
    """Extraction request inconsistent with the model's geometry."""


@dataclass
class ExtractionSpec:
    """What to extract and where to put it.

    `layers` / `kv_heads` optionally restrict the dump to a subset of
    layer indices and kv-head indices (query heads follow their kv-head
    group). `max_tokens` truncates the prompt.
    """

    model: str
    prompt: str
    out_path: str
    max_tokens: int | None = None
    layers: tuple[int, ...] | None = None
    kv_heads: tuple[int, ...] | None = None
    model_name: str | None = None

    def __post_init__(self):
        if self.max_tokens is not None and self.max_tokens < 2:
            raise ConfigError("max_tokens must be >= 2")


@contextmanager
def _capture_rotated_queries(model):
    """Record post-rotary query states, one entry per layer per forward."""
    module = sys.modules[model.__class__.__module__]
    if not hasattr(module, "apply_rotary_pos_emb"):
        raise ConfigError(
            f"unsupported architecture {model.__class__.__name__}: "
            "no rotary embedding helper to instrument"
        )
    original = module.apply_rotary_pos_emb
    captured = []

    def recording(q, k, cos, sin, *args, **kwargs):
        q_rot, k_rot = original(q, k, cos, sin, *args, **kwargs)
        captured.append(q_rot.detach().to(torch.float32).clone())
        return q_rot, k_rot

    module.apply_rotary_pos_emb = recording
    try:
        yield captured
    finally:
        module.apply_rotary_pos_emb = original


def _cache_layer_tensors(cache, index):
    if hasattr(cache, "layers"):  # transformers >= 4.54 cache objects
        layer = cache.layers[index]
        return layer.keys, layer.values
    key, value = cache[index]
    return key, value


def capture_streams(model, token_ids):
    """One forward pass; returns (keys, values, queries) as numpy arrays.

    keys/values: (layers, kv_heads, T, d) from the model's cache (keys
    post-rotary); queries: (layers, q_heads, T, d) from the instrumented
    rotary helper.
    """
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] < 2:
        raise ConfigError("prompt must tokenize to at least 2 tokens")
    model.eval()
    with _capture_rotated_queries(model) as rotated:
        with torch.no_grad():
            output = model(ids, use_cache=True)
    cache = output.past_key_values
    n_layers = model.config.num_hidden_layers
    if len(rotated) != n_layers:
        raise ConfigError(
            f"captured {len(rotated)} rotary calls for {n_layers} layers; "
            "architecture applies rotary embeddings in an unexpected pattern"
        )
    keys, values, queries = [], [], []
    for layer in range(n_layers):
        k, v = _cache_layer_tensors(cache, layer)
        keys.append(k[0].to(torch.float32).numpy())
        values.append(v[0].to(torch.float32).numpy())
        queries.append(rotated[layer][0].numpy())
    return np.stack(keys), np.stack(values), np.stack(queries)


def _resolve_filter(requested, available, what):
    if requested is None:
        return list(range(available))
    picked = sorted(set(int(i) for i in requested))
    bad = [i for i in picked if i < 0 or i >= available]
    if bad:
        raise ConfigError(f"{what} {bad} out of range (model has {available})")
    return picked


def extract(spec: ExtractionSpec, model=None, token_ids=None) -> str:
    """Run an extraction and write the KVTR file. Returns the output path.

    `model` and `token_ids` may be supplied directly (tests, offline
    use); otherwise the model id is loaded via transformers and the
    prompt is tokenized with the model's tokenizer. A partially written
    file is removed if anything fails mid-dump.
    """
    if model is None:
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(spec.model)
        model = AutoModelForCausalLM.from_pretrained(spec.model)
        if token_ids is None:
            token_ids = tokenizer(spec.prompt, return_tensors="pt").input_ids
    elif token_ids is None:
        raise ConfigError("token_ids must be given when a model object is supplied")

    ids = torch.as_tensor(token_ids, dtype=torch.long).reshape(-1)
    if spec.max_tokens is not None:
        ids = ids[: spec.max_tokens]
    if ids.numel() < 2:
        raise ConfigError("prompt must tokenize to at least 2 tokens")

    keys, values, queries = capture_streams(model, ids)
    n_layers, n_kv, seq_len, head_dim = keys.shape
    n_q = queries.shape[1]
    group = n_q // n_kv

    layer_idx = _resolve_filter(spec.layers, n_layers, "layer indices")
    kv_idx = _resolve_filter(spec.kv_heads, n_kv, "kv head indices")
    q_idx = [h * group + g for h in kv_idx for g in range(group)]

    keys = keys[np.ix_(layer_idx, kv_idx)]
    values = values[np.ix_(layer_idx, kv_idx)]
    queries = queries[np.ix_(layer_idx, q_idx)]

    meta = {
        "source": "model_dump",
        "model_name": spec.model_name or spec.model,
        "prompt_tokens": int(seq_len),
    }
    try:
        write_kvtr(spec.out_path, keys, values, queries, meta)
    except BaseException:
        if os.path.exists(spec.out_path):
            os.remove(spec.out_path)
        raise
    return spec.out_path

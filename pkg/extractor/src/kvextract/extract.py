"""Pull KV caches and attention-score importance weights out of a
transformer.

The model runs one prefill pass in eager attention mode so the full
post-softmax score matrices are visible. Importance weights are the
column sums of the last t score rows, summed over the query heads that
share each KV head (grouped-query attention), which matches how the
quantizer consumes them. Keys are captured from the cache after rotary
embedding, i.e. exactly what attention dot-products against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dumpfile import write_dump


@dataclass
class ExtractSpec:
    model: str
    prompt: str | None = None
    prompt_file: str | None = None
    token_ids: list | None = None
    max_tokens: int = 512
    t: int = 32
    layers: list | None = None    # None = all layers
    out: str = "dump.aqkv"


def _resolve_inputs(spec: ExtractSpec, tokenizer):
    if spec.token_ids is not None:
        ids = list(spec.token_ids)
    else:
        text = spec.prompt
        if text is None and spec.prompt_file is not None:
            with open(spec.prompt_file) as fh:
                text = fh.read()
        if not text:
            raise ValueError("empty prompt")
        if tokenizer is None:
            raise ValueError("a tokenizer is required for text prompts")
        ids = tokenizer(text)["input_ids"]
    ids = ids[: spec.max_tokens]
    if len(ids) == 0:
        raise ValueError("prompt produced no tokens")
    if spec.t > len(ids):
        raise ValueError(f"t={spec.t} exceeds prompt length {len(ids)}")
    return torch.tensor(ids, dtype=torch.long)[None, :]


def _cache_layer(past, layer: int):
    layers = getattr(past, "layers", None)
    if layers is not None:
        return layers[layer].keys, layers[layer].values
    return past[layer][0], past[layer][1]


@torch.no_grad()
def extract_from_model(model, input_ids: torch.Tensor, t: int,
                       layers=None):
    """Run one prefill pass; returns (keys, values, weights) arrays in the
    dump layout for the selected layers."""
    model.eval()
    out = model(input_ids, output_attentions=True, use_cache=True)
    n_model_layers = len(out.attentions)
    picked = list(range(n_model_layers)) if layers is None else sorted(layers)
    for layer in picked:
        if not 0 <= layer < n_model_layers:
            raise ValueError(f"layer {layer} out of range")

    keys_out, values_out, weights_out = [], [], []
    for layer in picked:
        k, v = _cache_layer(out.past_key_values, layer)
        keys_out.append(k[0].to(torch.float32).numpy())
        values_out.append(v[0].to(torch.float32).numpy())
        scores = out.attentions[layer][0].to(torch.float32)  # (n_q, N, N)
        n_q = scores.shape[0]
        n_kv = k.shape[1]
        group = n_q // n_kv
        w_q = scores[:, -t:, :].sum(dim=1)  # per query head, Eq-style sums
        w_kv = w_q.reshape(n_kv, group, -1).sum(dim=1)
        weights_out.append(w_kv.numpy())
    keys = np.stack(keys_out).astype(np.float32)
    values = np.stack(values_out).astype(np.float32)
    weights = np.stack(weights_out).astype(np.float32)
    return keys, values, weights


def load_model(name: str):
    from transformers import AutoModelForCausalLM, AutoTokenizer

    model = AutoModelForCausalLM.from_pretrained(
        name, attn_implementation="eager", torch_dtype=torch.float32
    )
    try:
        tokenizer = AutoTokenizer.from_pretrained(name)
    except Exception:
        tokenizer = None
    return model, tokenizer


def extract(spec: ExtractSpec, model=None, tokenizer=None) -> str:
    """Produce a dump file; loads the model by id unless one is passed."""
    if spec.token_ids is None and not spec.prompt and spec.prompt_file is None:
        raise ValueError("empty prompt")  # fail before any model load
    if model is None:
        model, tokenizer = load_model(spec.model)
    input_ids = _resolve_inputs(spec, tokenizer)
    keys, values, weights = extract_from_model(
        model, input_ids, spec.t, spec.layers
    )
    write_dump(spec.out, keys, values, weights)
    return spec.out

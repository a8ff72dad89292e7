"""
Re-injection of compacted caches for generation.

A compacted container becomes a pre-seeded cache plus per-layer additive
attention biases. Per-key biases vary by layer and KV head, so a single
model-level 4D mask cannot carry them; instead a forward pre-hook on every
attention module replaces its attention mask with a layer-specific one:
beta on the compacted columns (expanded to the query heads of each group,
mask-minus on padding), causal visibility among appended tokens.

Appended tokens take position ids starting at the container's logical
length, so they receive the same rotary phases as under the uncompacted
prefix. Keys in the cache are stored post-RoPE, matching the model's own
cache convention.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from transformers.cache_utils import DynamicCache

from kvcompact.attention import CompactHead
from kvcompact.container import load_compact

HeadKey = Tuple[int, int]

SUPPORTED_ATTN = ("eager", "sdpa")


class BiasUnsupportedError(RuntimeError):
    """The runtime's attention path cannot take additive per-key biases."""


def _check_bias_support(model) -> None:
    impl = getattr(model.config, "_attn_implementation", "eager")
    if impl not in SUPPORTED_ATTN:
        raise BiasUnsupportedError(
            f"attention implementation {impl!r} does not accept additive "
            "float masks; materializing beta by key duplication is not a "
            "valid fallback")


class LayerBias:
    """Per-layer compact-block bias, expanded to query heads."""

    def __init__(self, beta_per_kv: torch.Tensor, group: int):
        # beta_per_kv: (num_kv_heads, t) with mask-minus on padded slots
        self.beta = beta_per_kv.repeat_interleave(group, dim=0)  # (Hq, t)

    @property
    def t(self) -> int:
        return self.beta.shape[1]

    def mask(self, q_len: int, kv_before: int, dtype) -> torch.Tensor:
        """Additive mask (1, Hq, q_len, kv_before + q_len)."""
        t = self.t
        heads = self.beta.shape[0]
        neg = torch.finfo(dtype).min
        cols = kv_before + q_len
        mask = torch.zeros(1, heads, q_len, cols, dtype=dtype)
        mask[:, :, :, :t] = self.beta.to(dtype)[None, :, None, :]
        n_appended = cols - t
        if n_appended > 0:
            col_idx = torch.arange(n_appended)
            row_pos = (kv_before - t) + torch.arange(q_len)
            visible = col_idx[None, :] <= row_pos[:, None]
            mask[:, :, :, t:] = torch.where(
                visible, torch.zeros((), dtype=dtype),
                torch.full((), neg, dtype=dtype))
        return mask


def attach_bias_hooks(model, layer_bias: List[LayerBias]):
    """Replace each attention module's mask with its layer-specific bias."""
    _check_bias_support(model)
    handles = []

    def make(bias, layer_idx, module):
        def fn(_module, args, kwargs):
            hidden = kwargs.get("hidden_states",
                                args[0] if args else None)
            past = kwargs.get("past_key_values")
            kv_before = 0
            if past is not None and len(past.layers) > layer_idx \
                    and past.layers[layer_idx].keys is not None:
                kv_before = past.layers[layer_idx].keys.shape[2]
            kwargs["attention_mask"] = bias.mask(
                hidden.shape[1], kv_before, hidden.dtype)
            return args, kwargs
        return fn

    for idx, layer in enumerate(model.model.layers):
        handles.append(layer.self_attn.register_forward_pre_hook(
            make(layer_bias[idx], idx, layer.self_attn), with_kwargs=True))
    return handles


def _stack_layer(heads: Dict[HeadKey, CompactHead], layer: int,
                 num_kv: int) -> Tuple[torch.Tensor, torch.Tensor,
                                       torch.Tensor]:
    """Pad a layer's heads to a common t; padded slots get mask-minus."""
    parts = [heads[(layer, kv)] for kv in range(num_kv)]
    t_max = max(p.t for p in parts)
    d = parts[0].C_k.shape[1]
    K = torch.zeros(1, num_kv, t_max, d)
    V = torch.zeros(1, num_kv, t_max, d)
    beta = torch.full((num_kv, t_max), torch.finfo(torch.float32).min)
    for kv, p in enumerate(parts):
        K[0, kv, :p.t] = torch.from_numpy(np.ascontiguousarray(p.C_k))
        V[0, kv, :p.t] = torch.from_numpy(np.ascontiguousarray(p.C_v))
        beta[kv, :p.t] = torch.from_numpy(np.ascontiguousarray(p.beta))
    return K, V, beta


def build_compact_cache(model, heads: Dict[HeadKey, CompactHead]
                        ) -> Tuple[DynamicCache, List[LayerBias]]:
    cfg = model.config
    num_layers, num_kv = cfg.num_hidden_layers, cfg.num_key_value_heads
    group = cfg.num_attention_heads // num_kv
    cache = DynamicCache(config=cfg)
    biases = []
    for layer in range(num_layers):
        K, V, beta = _stack_layer(heads, layer, num_kv)
        cache.update(K, V, layer)
        biases.append(LayerBias(beta, group))
    return cache, biases


def build_hybrid_cache(model, compact_heads: Dict[HeadKey, CompactHead],
                       orig_past, boundary_layer: int, ctx_len: int
                       ) -> Tuple[DynamicCache, List[LayerBias]]:
    """
    Layers below `boundary_layer` take the compacted cache; layers at or
    above keep the original rows with zero bias (used for layer-sequential
    on-policy extraction).
    """
    cfg = model.config
    num_layers, num_kv = cfg.num_hidden_layers, cfg.num_key_value_heads
    group = cfg.num_attention_heads // num_kv
    cache = DynamicCache(config=cfg)
    biases = []
    for layer in range(num_layers):
        if layer < boundary_layer:
            K, V, beta = _stack_layer(compact_heads, layer, num_kv)
        else:
            K = orig_past.layers[layer].keys[:, :, :ctx_len].clone()
            V = orig_past.layers[layer].values[:, :, :ctx_len].clone()
            beta = torch.zeros(num_kv, ctx_len)
        cache.update(K.float(), V.float(), layer)
        biases.append(LayerBias(beta, group))
    return cache, biases


def inject_and_generate(model, tokenizer, compact_path,
                        prompt: Optional[str] = None,
                        prompt_ids: Optional[torch.Tensor] = None,
                        max_new_tokens: int = 50
                        ) -> Tuple[str, List[torch.Tensor]]:
    """
    Greedy decode on top of a compacted cache.

    Returns the generated text and the per-step logits. With
    compact_path=None this is plain no-context generation. The first
    appended token's position id equals the container's logical length.
    """
    _check_bias_support(model)
    if prompt_ids is None:
        if prompt is None:
            raise ValueError("need prompt or prompt_ids")
        prompt_ids = torch.tensor([tokenizer.encode(prompt)],
                                  dtype=torch.long)

    hooks = []
    if compact_path is not None:
        manifest, heads = load_compact(compact_path)
        cache, biases = build_compact_cache(model, heads)
        hooks = attach_bias_hooks(model, biases)
        logical = manifest.logical_length
        physical = cache.layers[0].keys.shape[2]
    else:
        cache = DynamicCache(config=model.config)
        logical = physical = 0

    try:
        n_prompt = prompt_ids.shape[1]
        pos = torch.arange(logical, logical + n_prompt)
        cpos = torch.arange(physical, physical + n_prompt)
        with torch.no_grad():
            out = model(prompt_ids, past_key_values=cache, use_cache=True,
                        position_ids=pos.unsqueeze(0), cache_position=cpos)
        cache = out.past_key_values
        step_logits = [out.logits[:, -1].detach().clone()]
        cur = out.logits[:, -1].argmax(-1, keepdim=True)
        tokens = [int(cur)]
        for i in range(max_new_tokens - 1):
            lpos = logical + n_prompt + i
            ppos = physical + n_prompt + i
            with torch.no_grad():
                out = model(cur, past_key_values=cache, use_cache=True,
                            position_ids=torch.tensor([[lpos]]),
                            cache_position=torch.tensor([ppos]))
            cache = out.past_key_values
            step_logits.append(out.logits[:, -1].detach().clone())
            cur = out.logits[:, -1].argmax(-1, keepdim=True)
            tokens.append(int(cur))
    finally:
        for h in hooks:
            h.remove()
    text = tokenizer.decode(tokens)
    return text, step_logits

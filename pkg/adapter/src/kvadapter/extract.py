"""
KV-cache and reference-query extraction from a local HF causal LM.

The full prompt sequence is prefilled once; per-layer per-KV-head keys and
values (RoPE already applied, exactly as the model caches them) land in a
KVC1 container together with pooled reference queries. Under GQA, the query
vectors of every query head that attends to a KV head are pooled into that
head's query set. Query extraction replays each attention module's q_proj
and rotary embedding from a forward pre-hook, since fused attention kernels
never expose post-RoPE queries.

Modes:
  context_prefill  queries from prefilling the context alone
  repeat_prefill   prefill "{C} <instruction> {C}", queries from the
                   instruction through the second copy; cache is the first
  self_study       four fixed prompts, greedy responses, queries from the
                   prompt/response region
  on_policy        layer-sequential re-extraction with lower layers already
                   compacted (export_on_policy)
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer
from transformers.models.llama.modeling_llama import apply_rotary_pos_emb

from kvcompact.attention import HeadCache, QuerySet, RopeParams
from kvcompact.container import load_compact, save_cache, save_queries
from kvcompact.queries import QueryBudget, reservoir_subsample

REPEAT_INSTRUCTION = "Repeat the previous context."

SELF_STUDY_PROMPTS = [
    "Write 3 questions that test understanding of different parts of the "
    "context. Answer with just the 3 questions and options (do not say the "
    "correct answer), each one separated with 2 newlines.",
    "Summarize the main points of the context.",
    "Structure the information in JSON form and include all important "
    "details like dates, times, names, and numerical values.",
    "Aggregate all the key facts mentioned in the context.",
]

MODES = ("context_prefill", "repeat_prefill", "self_study", "on_policy")

HeadKey = Tuple[int, int]


@dataclass
class ExtractionSpec:
    model_path: str
    context: str
    mode: str = "repeat_prefill"
    max_queries_per_head: int = 50_000
    seed: int = 0
    max_new_tokens: int = 32        # self-study response budget
    heldout_fraction: float = 0.0   # split off per-head held-out queries

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode: {self.mode!r}")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ValueError("heldout_fraction must lie in [0, 1)")
        if self.max_queries_per_head < 1:
            raise ValueError("max_queries_per_head must be >= 1")


def load_model(model_path):
    model = AutoModelForCausalLM.from_pretrained(
        model_path, dtype=torch.float32, attn_implementation="eager").eval()
    tokenizer = AutoTokenizer.from_pretrained(model_path)
    return model, tokenizer


def model_geometry(model) -> Tuple[int, int, int, int]:
    cfg = model.config
    head_dim = getattr(cfg, "head_dim", None) \
        or cfg.hidden_size // cfg.num_attention_heads
    return (cfg.num_hidden_layers, cfg.num_key_value_heads, head_dim,
            cfg.num_attention_heads // cfg.num_key_value_heads)


def rope_params(model) -> RopeParams:
    cfg = model.config
    theta = getattr(cfg, "rope_theta", None)
    if theta is None:
        theta = (getattr(cfg, "rope_parameters", None)
                 or {}).get("rope_theta", 10000.0)
    return RopeParams(kind="half_split", base=float(theta),
                      applied_to_keys=True)


class QueryCollector:
    """Captures post-RoPE query states at every attention layer."""

    def __init__(self, model):
        self.per_layer: Dict[int, List[torch.Tensor]] = {}
        self.handles = []
        for idx, layer in enumerate(model.model.layers):
            self.handles.append(layer.self_attn.register_forward_pre_hook(
                self._hook(idx, layer.self_attn), with_kwargs=True))

    def _hook(self, layer_idx, module):
        def fn(_module, args, kwargs):
            hidden = kwargs.get("hidden_states",
                                args[0] if args else None)
            pos_emb = kwargs.get("position_embeddings")
            if pos_emb is None and len(args) > 1:
                pos_emb = args[1]
            shape = hidden.shape[:-1] + (-1, module.head_dim)
            q = module.q_proj(hidden).view(shape).transpose(1, 2)
            cos, sin = pos_emb
            q, _ = apply_rotary_pos_emb(q, q, cos, sin)
            self.per_layer.setdefault(layer_idx, []).append(
                q.detach().to(torch.float32))
        return fn

    def close(self):
        for h in self.handles:
            h.remove()
        self.handles = []

    def pooled(self, num_kv_heads: int, group: int,
               from_position: int = 0) -> Dict[HeadKey, np.ndarray]:
        """
        Per-KV-head query matrices, pooling all query heads in the group.
        Only query vectors at sequence positions >= from_position are kept.
        """
        out: Dict[HeadKey, np.ndarray] = {}
        for layer, chunks in sorted(self.per_layer.items()):
            q = torch.cat(chunks, dim=2)       # (1, Hq, total_len, d)
            q = q[:, :, from_position:, :]
            for kv in range(num_kv_heads):
                rows = q[0, kv * group:(kv + 1) * group]   # (G, n, d)
                out[(layer, kv)] = rows.reshape(-1, q.shape[-1]).numpy()
        return out


def _prefill(model, ids: torch.Tensor):
    with torch.no_grad():
        return model(ids, use_cache=True)


def _cache_to_heads(past, geometry, rope: RopeParams, upto: int,
                    logical_length: Optional[int] = None
                    ) -> Dict[HeadKey, HeadCache]:
    num_layers, num_kv, _, _ = geometry
    heads = {}
    for layer in range(num_layers):
        K = past.layers[layer].keys[0, :, :upto].to(torch.float32).numpy()
        V = past.layers[layer].values[0, :, :upto].to(torch.float32).numpy()
        for kv in range(num_kv):
            heads[(layer, kv)] = HeadCache(
                K=K[kv], V=V[kv],
                logical_length=logical_length if logical_length is not None
                else upto,
                positions=np.arange(upto), rope=rope)
    return heads


def _chat_ids(tokenizer, content: str, add_generation_prompt=False
              ) -> torch.Tensor:
    text = tokenizer.apply_chat_template(
        [{"role": "user", "content": content}], tokenize=False,
        add_generation_prompt=add_generation_prompt)
    return torch.tensor([tokenizer.encode(text)], dtype=torch.long)


def _greedy_extend(model, ids: torch.Tensor, max_new_tokens: int
                   ) -> torch.Tensor:
    """Greedy continuation; every forward runs under the active hooks."""
    out = _prefill(model, ids)
    past = out.past_key_values
    cur = out.logits[:, -1].argmax(-1, keepdim=True)
    pos = ids.shape[1]
    new = [cur]
    for _ in range(max_new_tokens - 1):
        with torch.no_grad():
            step = model(cur, past_key_values=past, use_cache=True,
                         position_ids=torch.tensor([[pos]]),
                         cache_position=torch.tensor([pos]))
        past = step.past_key_values
        cur = step.logits[:, -1].argmax(-1, keepdim=True)
        new.append(cur)
        pos += 1
    return torch.cat(new, dim=1)


def _split_heldout(queries: Dict[HeadKey, np.ndarray], fraction: float,
                   seed: int) -> Tuple[Dict[HeadKey, np.ndarray],
                                       Dict[HeadKey, np.ndarray]]:
    fit, held = {}, {}
    for key in sorted(queries):
        Q = queries[key]
        n_held = int(round(fraction * Q.shape[0]))
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(seed, spawn_key=(key[0], key[1], 77))))
        perm = rng.permutation(Q.shape[0])
        held[key] = Q[np.sort(perm[:n_held])]
        fit[key] = Q[np.sort(perm[n_held:])]
    return fit, held


def _cap(queries: Dict[HeadKey, np.ndarray], cap: int, seed: int,
         provenance: str) -> Dict[HeadKey, QuerySet]:
    out = {}
    for (layer, kv), Q in sorted(queries.items()):
        budget = QueryBudget(cap=cap, seed=seed + 7919 * layer + 31 * kv)
        out[(layer, kv)] = reservoir_subsample(Q, budget,
                                               provenance=provenance)
    return out


def export_cache(spec: ExtractionSpec, output_path,
                 heldout_path=None) -> Path:
    """
    Prefill per `spec.mode`, extract per-head K/V plus pooled reference
    queries, and write one KVC1 container (held-out queries optionally split
    into a second container).
    """
    model, tokenizer = load_model(spec.model_path)
    geometry = model_geometry(model)
    _, num_kv, head_dim, group = geometry
    rope = rope_params(model)

    ctx_ids = _chat_ids(tokenizer, spec.context)
    ctx_len = ctx_ids.shape[1]

    if spec.mode == "context_prefill":
        collector = QueryCollector(model)
        out = _prefill(model, ctx_ids)
        collector.close()
        heads = _cache_to_heads(out.past_key_values, geometry, rope, ctx_len)
        raw = collector.pooled(num_kv, group)
    elif spec.mode == "repeat_prefill":
        doubled = _chat_ids(
            tokenizer,
            f"{spec.context} {REPEAT_INSTRUCTION} {spec.context}")
        collector = QueryCollector(model)
        out = _prefill(model, doubled)
        collector.close()
        # cache is the first copy's region; queries run from the
        # instruction through the second copy
        heads = _cache_to_heads(out.past_key_values, geometry, rope, ctx_len)
        raw = collector.pooled(num_kv, group, from_position=ctx_len)
    elif spec.mode == "self_study":
        base = _prefill(model, ctx_ids)
        heads = _cache_to_heads(base.past_key_values, geometry, rope,
                                ctx_len)
        collector = QueryCollector(model)
        for prompt in SELF_STUDY_PROMPTS:
            ids = _chat_ids(tokenizer, f"{spec.context} {prompt}",
                            add_generation_prompt=True)
            _greedy_extend(model, ids, spec.max_new_tokens)
        collector.close()
        raw = collector.pooled(num_kv, group, from_position=ctx_len)
    else:
        raise ValueError("use export_on_policy for mode='on_policy'")

    fit, held = _split_heldout(raw, spec.heldout_fraction, spec.seed)
    queries = _cap(fit, spec.max_queries_per_head, spec.seed, spec.mode)
    save_cache(output_path, heads, queries,
               logit_scale=1.0 / float(np.sqrt(head_dim)))
    if heldout_path is not None:
        if spec.heldout_fraction <= 0:
            raise ValueError("heldout_path needs heldout_fraction > 0")
        held_sets = _cap(held, spec.max_queries_per_head, spec.seed + 1,
                         spec.mode)
        save_queries(heldout_path, held_sets, head_dim=head_dim, rope=rope)
    return Path(output_path)


def export_on_policy(spec: ExtractionSpec, compacted_path,
                     output_path) -> Path:
    """
    Layer-sequential query extraction: for each layer L, run the
    query-generation pass with layers < L consuming the compacted cache
    (layers >= L keep original rows), and keep only layer L's queries.
    Appended tokens keep positions continuing from the logical length.
    """
    from .inject import attach_bias_hooks, build_hybrid_cache

    model, tokenizer = load_model(spec.model_path)
    geometry = model_geometry(model)
    num_layers, num_kv, head_dim, group = geometry
    rope = rope_params(model)
    _, compact_heads = load_compact(compacted_path)

    ctx_ids = _chat_ids(tokenizer, spec.context)
    ctx_len = ctx_ids.shape[1]
    doubled = _chat_ids(
        tokenizer, f"{spec.context} {REPEAT_INSTRUCTION} {spec.context}")
    tail_ids = doubled[:, ctx_len:]

    with torch.no_grad():
        base = model(ctx_ids, use_cache=True)
    orig_past = base.past_key_values

    raw: Dict[HeadKey, np.ndarray] = {}
    for boundary in range(num_layers):
        cache, masks = build_hybrid_cache(
            model, compact_heads, orig_past, boundary_layer=boundary,
            ctx_len=ctx_len)
        hooks = attach_bias_hooks(model, masks)
        collector = QueryCollector(model)
        pos = torch.arange(ctx_len, ctx_len + tail_ids.shape[1])
        with torch.no_grad():
            model(tail_ids, past_key_values=cache, use_cache=True,
                  position_ids=pos.unsqueeze(0), cache_position=pos)
        collector.close()
        for h in hooks:
            h.remove()
        pooled = collector.pooled(num_kv, group)
        for kv in range(num_kv):
            raw[(boundary, kv)] = pooled[(boundary, kv)]

    queries = _cap(raw, spec.max_queries_per_head, spec.seed, "on_policy")
    save_queries(output_path, queries, head_dim=head_dim, rope=rope)
    return Path(output_path)

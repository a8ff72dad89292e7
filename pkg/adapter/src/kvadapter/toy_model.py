"""
Deterministic small GQA+RoPE chat model built offline.

The sandbox has no model-hub access, so tests construct a Llama-architecture
model with seeded random weights and a word-level tokenizer whose vocabulary
covers a synthetic word list plus every word used by the extraction prompts.
All adapter contracts (extraction shapes, GQA pooling, injection, greedy
identity) are exercised against this model; the adapter itself works with
any local HF causal LM directory.
"""
from __future__ import annotations

from pathlib import Path

import torch
from tokenizers import Tokenizer, models, pre_tokenizers
from transformers import (LlamaConfig, LlamaForCausalLM,
                          PreTrainedTokenizerFast)

CHAT_TEMPLATE = (
    "{{ bos_token }}{% for m in messages %}<|{{ m.role }}|> "
    "{{ m.content }} {% endfor %}"
    "{% if add_generation_prompt %}<|assistant|>{% endif %}"
)

SPECIALS = ["<unk>", "<pad>", "<bos>", "<eos>",
            "<|user|>", "<|assistant|>", "<|system|>"]


def _prompt_words() -> list:
    from .extract import REPEAT_INSTRUCTION, SELF_STUDY_PROMPTS
    words = []
    for text in [REPEAT_INSTRUCTION, *SELF_STUDY_PROMPTS]:
        words.extend(text.split())
    return sorted(set(words))


def build_toy_model(path, seed: int = 0, vocab_size: int = 512,
                    num_layers: int = 2, num_attention_heads: int = 8,
                    num_kv_heads: int = 2, head_dim: int = 8,
                    hidden_size: int = 64) -> None:
    """Write a seeded random-weight chat model + tokenizer to `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    words = _prompt_words()
    vocab = {}
    for tok in SPECIALS + words:
        vocab[tok] = len(vocab)
    i = 0
    while len(vocab) < vocab_size:
        vocab[f"w{i}"] = len(vocab)
        i += 1

    tok = Tokenizer(models.WordLevel(vocab=vocab, unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.WhitespaceSplit()
    fast = PreTrainedTokenizerFast(
        tokenizer_object=tok, unk_token="<unk>", pad_token="<pad>",
        bos_token="<bos>", eos_token="<eos>")
    fast.chat_template = CHAT_TEMPLATE
    fast.save_pretrained(path)

    config = LlamaConfig(
        vocab_size=vocab_size, hidden_size=hidden_size,
        intermediate_size=2 * hidden_size, num_hidden_layers=num_layers,
        num_attention_heads=num_attention_heads,
        num_key_value_heads=num_kv_heads, head_dim=head_dim,
        max_position_embeddings=4096, rope_theta=10000.0,
        tie_word_embeddings=True, attn_implementation="eager",
        torch_dtype=torch.float32,
        bos_token_id=vocab["<bos>"], eos_token_id=vocab["<eos>"],
        pad_token_id=vocab["<pad>"])
    torch.manual_seed(seed)
    model = LlamaForCausalLM(config).eval().float()
    model.save_pretrained(path)


def random_context(seed: int, n_words: int, vocab_size: int = 512) -> str:
    """Seeded word-salad context over the toy vocabulary."""
    import numpy as np
    rng = np.random.Generator(np.random.Philox(seed))
    lo = len(SPECIALS) + len(_prompt_words())
    ids = rng.integers(lo, vocab_size, size=n_words)
    return " ".join(f"w{int(i) - lo}" for i in ids)

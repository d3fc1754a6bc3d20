"""Transformer feature extraction for the scmm engine.

Reads a dataset JSONL (only id and tokens matter here), runs a pretrained
encoder, pools subword states back to one vector per original token, and
writes the engine's embedding binary: the sentence vector (the encoder's
classification-position output) followed by the token vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .binary import write_embedding_file

POOLING_MODES = ("first", "mean")


class ExtractError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExtractConfig:
    model: str
    data: str
    out: str
    max_len: int = 512
    pool: str = "first"
    layer: int = -1          # hidden-state index; -1 = last layer
    device: str = "cpu"
    batch_size: int = 16
    allow_truncate: bool = False

    def __post_init__(self):
        if self.pool not in POOLING_MODES:
            raise ValueError(f"pool must be one of {POOLING_MODES}")
        if self.max_len < 4:
            raise ValueError("max_len too small")


def read_sentences(path) -> list[tuple[str, list[str]]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "id" not in obj or "tokens" not in obj or not obj["tokens"]:
                raise ExtractError(f"{path}: line {lineno}: need id and non-empty tokens")
            out.append((str(obj["id"]), [str(t) for t in obj["tokens"]]))
    if not out:
        raise ExtractError(f"{path}: no sentences")
    return out


def _pool_words(hidden: torch.Tensor, word_ids: list, n_words: int,
                mode: str) -> tuple[np.ndarray, int]:
    """One vector per original token; returns (vectors, words_covered)."""
    dim = hidden.shape[-1]
    vecs = np.zeros((n_words, dim), dtype=np.float32)
    counts = np.zeros(n_words, dtype=np.int64)
    for pos, wid in enumerate(word_ids):
        if wid is None or wid >= n_words:
            continue
        if mode == "first":
            if counts[wid] == 0:
                vecs[wid] = hidden[pos].numpy()
                counts[wid] = 1
        else:
            vecs[wid] += hidden[pos].numpy()
            counts[wid] += 1
    if mode == "mean":
        nz = counts > 0
        vecs[nz] /= counts[nz, None]
    return vecs, int((counts > 0).sum())


def extract(cfg: ExtractConfig) -> Path:
    """Run the encoder over the dataset and write the embedding binary."""
    from transformers import AutoModel, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(cfg.model, use_fast=True)
    model = AutoModel.from_pretrained(cfg.model)
    device = torch.device(cfg.device)
    model.to(device)
    model.eval()

    sentences = read_sentences(cfg.data)
    blocks: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(sentences), cfg.batch_size):
            chunk = sentences[start:start + cfg.batch_size]
            enc = tokenizer([toks for _, toks in chunk],
                            is_split_into_words=True,
                            padding=True, truncation=True,
                            max_length=cfg.max_len,
                            return_tensors="pt")
            out = model(**{k: v.to(device) for k, v in enc.items()},
                        output_hidden_states=True)
            hidden = out.hidden_states[cfg.layer].cpu()
            for i, (sid, toks) in enumerate(chunk):
                word_ids = enc.word_ids(i)
                vecs, covered = _pool_words(hidden[i], word_ids, len(toks), cfg.pool)
                if covered < len(toks):
                    if not cfg.allow_truncate:
                        raise ExtractError(
                            f"sentence {sid!r}: {len(toks) - covered} token(s) "
                            f"lost to truncation at max_len={cfg.max_len}; "
                            "pass --allow-truncate to zero-fill them")
                elif covered > len(toks):
                    raise ExtractError(
                        f"sentence {sid!r}: pooled {covered} tokens, "
                        f"expected {len(toks)}")
                sent_vec = hidden[i, 0].numpy().astype(np.float32)
                blocks.append(np.vstack([sent_vec[None, :], vecs]))
    out_path = Path(cfg.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_embedding_file(out_path, blocks)
    return out_path

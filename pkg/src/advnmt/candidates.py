"""Replacement candidates from victim embedding neighbourhoods."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy.spatial.distance import cdist

from .textdata import N_RESERVED, UNK, Vocab

DEFAULT_K = 12


@dataclass
class CandidateTable:
    candidates: Dict[int, List[int]]
    distances: Dict[int, List[float]]
    epsilon: float
    k: int

    def __contains__(self, token_id: int) -> bool:
        return token_id in self.candidates

    def get(self, token_id: int) -> List[int]:
        """Candidates for ``token_id``; empty for reserved ids (never replaced)."""
        return self.candidates.get(int(token_id), [])

    def dump_tsv(self, path, vocab: Vocab) -> None:
        lines = [f"{vocab.itos[key]}\t{','.join(vocab.itos[c] for c in cands)}"
                 for key, cands in sorted(self.candidates.items())]
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def build_table(embeddings: np.ndarray, k: int = DEFAULT_K, radius: str = "mean") -> CandidateTable:
    """Up to ``k`` nearest in-radius neighbours per non-reserved token.

    ``radius="mean"`` sets epsilon to the mean over tokens of the mean distance
    to their k nearest neighbours; ``radius="kth"`` uses the mean distance to
    the k-th neighbour instead. Tokens without an in-radius neighbour get [UNK].
    Ties in distance are broken by lower token id.
    """
    emb = np.asarray(embeddings, dtype=np.float64)[N_RESERVED:]
    n = emb.shape[0]
    if k < 1:
        raise ValueError("build_table: K must be >= 1")
    if k >= n:
        raise ValueError(f"build_table: K={k} must be smaller than the {n} eligible tokens")
    dist = cdist(emb, emb)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    knn = np.take_along_axis(dist, order, axis=1)
    if radius == "mean":
        eps = float(knn.mean(axis=1).mean())
    elif radius == "kth":
        eps = float(knn[:, -1].mean())
    else:
        raise ValueError(f"unknown radius rule {radius!r}")
    cands: Dict[int, List[int]] = {}
    dists: Dict[int, List[float]] = {}
    for i in range(n):
        keep = knn[i] <= eps
        key = i + N_RESERVED
        if keep.any():
            cands[key] = [int(j) + N_RESERVED for j in order[i][keep]]
            dists[key] = [float(d) for d in knn[i][keep]]
        else:
            cands[key] = [UNK]
            dists[key] = [float("inf")]
    return CandidateTable(cands, dists, eps, k)


def nearest_candidate(table: CandidateTable, token_id: int) -> int:
    token_id = int(token_id)
    if token_id < N_RESERVED:
        raise ValueError(f"nearest_candidate: reserved token id {token_id} has no candidates")
    if token_id not in table.candidates:
        raise KeyError(f"nearest_candidate: token id {token_id} is not in the table")
    return table.candidates[token_id][0]


def _rare_char(vocab: Optional[Vocab]) -> str:
    """Least frequent lowercase letter over vocabulary surfaces (ties alphabetical)."""
    counts = Counter({c: 0 for c in "abcdefghijklmnopqrstuvwxyz"})
    if vocab is not None:
        for tok in vocab.content_tokens():
            for c in tok.lower():
                if c in counts:
                    counts[c] += 1
    return min(counts, key=lambda c: (counts[c], c))


def surface_for_unk(original: str, mode: str = "repeat-last-char", vocab: Optional[Vocab] = None) -> str:
    """A surface form different from ``original`` that ``vocab`` encodes as UNK.

    ``repeat-last-char`` doubles the final character; ``middle-swap`` swaps the
    two characters around the middle. If that leaves the token unchanged or
    still known, a rare character is appended until it is unknown.
    """
    if mode == "repeat-last-char":
        out = original + original[-1:] if original else ""
    elif mode == "middle-swap":
        if len(original) >= 2:
            i = max(len(original) // 2 - 1, 0)
            out = original[:i] + original[i + 1] + original[i] + original[i + 2:]
        else:
            out = original
    else:
        raise ValueError(f"unknown UNK surface mode {mode!r}")
    pad = _rare_char(vocab)
    while out == original or (vocab is not None and out in vocab):
        out += pad
    return out

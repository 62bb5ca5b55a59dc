"""Question- and concept-level interaction encodings.

A correct response puts the embeddings on the left of a ``2d`` zero block,
an incorrect one on the right:

    e_t = [q ; k̄ ; 0 ; 0]   or   [0 ; 0 ; q ; k̄]      (4d)
    c_t = [k̄ ; 0 ; 0]        or   [0 ; 0 ; k̄]          (3d)

where ``k̄`` is the unweighted mean of the question's KC embeddings.
"""
from __future__ import annotations

import torch
from torch import nn

from . import diffcore as dc


class InteractionEncoder(nn.Module):
    """Owns the question table ``Q``, concept table ``K`` and the snapshot ``Q_c``."""

    def __init__(self, n: int, M: int, d: int, kc_map, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.n, self.M, self.d = n, M, d
        if len(kc_map) != n:
            raise ValueError(f"kc_map has {len(kc_map)} entries, expected {n}")
        self.kc_map = [tuple(k) for k in kc_map]
        self.Q = nn.Parameter(dc.normal_(torch.empty(n, d, dtype=dtype), gen))
        self.K = nn.Parameter(dc.normal_(torch.empty(M, d, dtype=dtype), gen))
        A = torch.zeros(n, M, dtype=dtype)
        for q, kcs in enumerate(self.kc_map):
            if not kcs:
                raise ValueError(f"question {q} has no KCs")
            A[q, list(kcs)] = 1.0 / len(kcs)
        self.register_buffer("kc_weights", A)
        self.register_buffer("Q_c", self.Q.detach().clone())

    def _check_kcs(self, kc_ids):
        kc_ids = list(kc_ids)
        if not kc_ids:
            raise ValueError("kc_ids must be non-empty")
        bad = [k for k in kc_ids if not 0 <= k < self.M]
        if bad:
            raise IndexError(f"kc ids {bad} out of range [0, {self.M})")
        return kc_ids

    def avg_kc_embedding(self, kc_ids) -> torch.Tensor:
        kc_ids = self._check_kcs(kc_ids)
        return self.K[kc_ids].sum(0) / len(kc_ids)

    def encode_question_interaction(self, question_id: int, kc_ids, response: int) -> torch.Tensor:
        if not 0 <= question_id < self.n:
            raise IndexError(f"question id {question_id} out of range [0, {self.n})")
        if response not in (0, 1):
            raise ValueError(f"response must be 0 or 1, got {response}")
        body = torch.cat([self.Q[question_id], self.avg_kc_embedding(kc_ids)])
        zero = torch.zeros_like(body)
        return torch.cat([body, zero] if response == 1 else [zero, body])

    def encode_concept_interaction(self, kc_ids, response: int) -> torch.Tensor:
        if response not in (0, 1):
            raise ValueError(f"response must be 0 or 1, got {response}")
        kbar = self.avg_kc_embedding(kc_ids)
        zero = torch.zeros(2 * self.d, dtype=kbar.dtype)
        return torch.cat([kbar, zero] if response == 1 else [zero, kbar])

    def kc_mean_table(self) -> torch.Tensor:
        """``k̄`` for every question at once, shape (n, d)."""
        return self.kc_weights @ self.K

    def forward(self, questions: torch.Tensor, responses: torch.Tensor):
        """Batched encodings for (B, T) question ids and 0/1 responses."""
        eq = self.Q[questions]
        ek = self.kc_mean_table()[questions]
        r = responses.to(eq.dtype).unsqueeze(-1)
        w = 1.0 - r
        body = torch.cat([eq, ek], dim=-1)
        e = torch.cat([body * r, body * w], dim=-1)
        c = torch.cat([ek * r, torch.zeros_like(ek), ek * w], dim=-1)
        return e, c

    @torch.no_grad()
    def snapshot_question_matrix(self):
        self.Q_c.copy_(self.Q)

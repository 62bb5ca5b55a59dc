"""Q-MCKT network: encoder, question/concept acquisition modules, IRT read-out.

Step ``t`` is predicted from the state after interactions ``0..t-1`` of the
same window, so the first step of every window is never a target.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from .acquisition import AcquisitionModule
from .encoder import InteractionEncoder
from .predictor import irt_predict


@dataclass
class ModelConfig:
    n: int
    M: int
    d: int = 64
    E: int = 2
    candidate_activation: str = "sigmoid"
    no_mqka: bool = False
    no_mcka: bool = False
    no_moe: bool = False
    no_irt: bool = False
    precision: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.no_mqka and self.no_mcka:
            raise ValueError("cannot drop both acquisition modules")
        if min(self.n, self.M, self.d, self.E) < 1:
            raise ValueError("n, M, d and E must be positive")

    @property
    def experts(self) -> int:
        return 1 if self.no_moe else self.E

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Batch:
    questions: torch.Tensor  # (B, T) long
    responses: torch.Tensor  # (B, T) float
    valid: torch.Tensor  # (B, T) bool
    students: list
    offsets: list

    @property
    def targets(self):
        return self.responses[:, 1:]

    @property
    def target_mask(self):
        return self.valid[:, 1:]


def make_batch(windows, dtype=torch.float32) -> Batch:
    T = max(len(w) for w in windows)
    B = len(windows)
    q = np.zeros((B, T), dtype=np.int64)
    r = np.zeros((B, T), dtype=np.float64)
    valid = np.zeros((B, T), dtype=bool)
    for i, w in enumerate(windows):
        L = len(w)
        q[i, :L] = w.questions
        r[i, :L] = w.responses
        valid[i, :L] = True
    return Batch(
        torch.from_numpy(q),
        torch.from_numpy(r).to(dtype),
        torch.from_numpy(valid),
        [w.student_id for w in windows],
        [w.origin[1] for w in windows],
    )


class QMCKT(nn.Module):
    def __init__(self, config: ModelConfig, kc_map):
        super().__init__()
        self.config = config
        dtype = dc.dtype_for(config.precision)
        gen = torch.Generator().manual_seed(config.seed)
        d, E = config.d, config.experts
        gated = not config.no_moe
        cand = config.candidate_activation
        self.encoder = InteractionEncoder(config.n, config.M, d, kc_map, gen, dtype)
        self.mqka = None if config.no_mqka else AcquisitionModule(4 * d, d, config.n, E, gen, dtype, cand, gated)
        self.mcka = None if config.no_mcka else AcquisitionModule(3 * d, d, config.M, E, gen, dtype, cand, gated)
        if config.no_irt:
            hidden = d * ((self.mqka is not None) + (self.mcka is not None))
            self.readout = nn.ParameterDict(
                {
                    "W": nn.Parameter(dc.glorot_(torch.empty(config.n, hidden, dtype=dtype), gen)),
                    "b": nn.Parameter(torch.zeros(config.n, dtype=dtype)),
                }
            )
        else:
            self.readout = None

    @property
    def dtype(self):
        return self.encoder.Q.dtype

    def param_dict(self) -> dict[str, nn.Parameter]:
        return dict(self.named_parameters())

    def hidden_states(self, batch: Batch):
        e, c = self.encoder(batch.questions, batch.responses)
        A = self.mqka(e) if self.mqka is not None else None
        V = self.mcka(c) if self.mcka is not None else None
        return A, V

    def forward(self, batch: Batch, need_aux: bool = True) -> dict:
        """Scores for every target step: ``alpha``, ``beta_bar`` (when present) and ``r_hat``."""
        A, V = self.hidden_states(batch)
        q_next = batch.questions[:, 1:]
        out = {}
        want_scores = self.readout is None or need_aux
        if A is not None:
            A = A[:, :-1]
            if want_scores:
                out["alpha"] = self.mqka.gathered(A, q_next)
        if V is not None:
            V = V[:, :-1]
            if want_scores:
                gamma_c = self.mcka.state(V)
                out["beta_bar"] = (gamma_c * self.encoder.kc_weights[q_next]).sum(-1)
        if self.readout is not None:
            H = torch.cat([h for h in (A, V) if h is not None], -1)
            logit = (H * self.readout["W"][q_next]).sum(-1) + self.readout["b"][q_next]
            out["r_hat"] = dc.sigmoid(logit)
        else:
            out["r_hat"] = irt_predict(out.get("alpha", 0.0), out.get("beta_bar", 0.0))
        return out

    @torch.no_grad()
    def knowledge_states(self, batch: Batch) -> dict:
        """Full acquisition states after every step (not shifted): gamma_q (B,T,n), gamma_c (B,T,M), gates."""
        A, V = self.hidden_states(batch)
        res = {}
        if A is not None:
            res["gamma_q"] = self.mqka.state(A)
            res["gates_q"] = self.mqka.gates(A)
        if V is not None:
            res["gamma_c"] = self.mcka.state(V)
            res["gates_c"] = self.mcka.gates(V)
        return res

    def snapshot(self):
        self.encoder.snapshot_question_matrix()

    def config_dict(self) -> dict:
        return asdict(self.config)

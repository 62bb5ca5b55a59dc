"""Multi-expert knowledge acquisition: LSTM cell, expert heads, softmax gate.

The same building blocks serve both the question-level module (input 4d,
output over the n questions) and the concept-level module (input 3d, output
over the M concepts).
"""
from __future__ import annotations

import torch
from torch import nn

from . import diffcore as dc

GATES = ("i", "f", "o", "c")


class LSTMCell(nn.Module):
    """One LSTM cell with separately stored W, U, b per gate.

    ``candidate`` selects the activation of the candidate cell state.  The
    default ``"sigmoid"`` follows the update as published; ``"tanh"`` gives the
    textbook cell.
    """

    def __init__(self, input_dim: int, d: int, gen: torch.Generator, dtype=torch.float32, candidate: str = "sigmoid"):
        super().__init__()
        if candidate not in ("sigmoid", "tanh"):
            raise ValueError(f"candidate activation must be sigmoid or tanh, got {candidate!r}")
        self.input_dim, self.d, self.candidate = input_dim, d, candidate
        for g in GATES:
            setattr(self, f"W_{g}", nn.Parameter(dc.glorot_(torch.empty(d, input_dim, dtype=dtype), gen)))
            setattr(self, f"U_{g}", nn.Parameter(dc.glorot_(torch.empty(d, d, dtype=dtype), gen)))
            setattr(self, f"b_{g}", nn.Parameter(torch.zeros(d, dtype=dtype)))

    def _stacked(self):
        W = torch.cat([getattr(self, f"W_{g}") for g in GATES], 0)
        U = torch.cat([getattr(self, f"U_{g}") for g in GATES], 0)
        b = torch.cat([getattr(self, f"b_{g}") for g in GATES], 0)
        return W, U, b

    def _update(self, pre, c_prev):
        d = self.d
        i = dc.sigmoid(pre[..., :d])
        f = dc.sigmoid(pre[..., d : 2 * d])
        o = dc.sigmoid(pre[..., 2 * d : 3 * d])
        act = dc.sigmoid if self.candidate == "sigmoid" else dc.tanh
        cand = act(pre[..., 3 * d :])
        c = f * c_prev + i * cand
        h = o * dc.tanh(c)
        return h, c

    def step(self, x, h_prev, c_prev):
        if x.shape[-1] != self.input_dim:
            raise dc.ShapeError(f"lstm_step: input has {x.shape[-1]} features, cell expects {self.input_dim}")
        if h_prev.shape[-1] != self.d or c_prev.shape[-1] != self.d:
            raise dc.ShapeError(f"lstm_step: state size must be {self.d}")
        W, U, b = self._stacked()
        return self._update(x @ W.T + h_prev @ U.T + b, c_prev)

    def forward(self, xs: torch.Tensor) -> torch.Tensor:
        """Run over (B, T, input_dim) from a zero state; returns hidden states (B, T, d)."""
        if xs.shape[-1] != self.input_dim:
            raise dc.ShapeError(f"lstm: input has {xs.shape[-1]} features, cell expects {self.input_dim}")
        W, U, b = self._stacked()
        B = xs.shape[0]
        h = xs.new_zeros(B, self.d)
        c = xs.new_zeros(B, self.d)
        hs = []
        # unbind keeps the backward pass linear in T (per-step slicing does not)
        for px in (xs @ W.T + b).unbind(1):
            h, c = self._update(px + h @ U.T, c)
            hs.append(h)
        return torch.stack(hs, 1)


def lstm_step(cell: LSTMCell, x_t, h_prev, c_prev):
    return cell.step(x_t, h_prev, c_prev)


# magnitude range of the per-row output scale at initialisation
W_SCALE_INIT = (0.5, 1.0)
# initial output bias: z = relu(...) is non-negative, so a row whose W2 row points away
# from every z would otherwise start (and stay) at zero with no gradient
HEAD_BIAS_INIT = 0.5


class ExpertHead(nn.Module):
    """``w * relu(W2 relu(W1 h + b1) + b2)``; one row of W2/b2/w per output unit."""

    def __init__(self, d: int, out: int, gen: torch.Generator, dtype=torch.float32, index: int = 0):
        super().__init__()
        self.W1 = nn.Parameter(dc.glorot_(torch.empty(d, d, dtype=dtype), gen))
        self.b1 = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.W2 = nn.Parameter(dc.glorot_(torch.empty(out, d, dtype=dtype), gen))
        self.b2 = nn.Parameter(torch.full((out,), HEAD_BIAS_INIT, dtype=dtype))
        # a row's score keeps the sign of its scale, so odd-numbered experts start negative:
        # with two or more experts every row can reach both sides of zero
        sign = -1.0 if index % 2 else 1.0
        self.w = nn.Parameter(sign * torch.empty(out, dtype=dtype).uniform_(W_SCALE_INIT[0], W_SCALE_INIT[1], generator=gen))

    def hidden(self, h):
        return dc.relu(h @ self.W1.T + self.b1)

    def forward(self, h):
        return self.w * dc.relu(self.hidden(h) @ self.W2.T + self.b2)

    def gathered(self, h, idx):
        """Output unit ``idx[...]`` only; equal to ``forward(h).gather(-1, idx)``."""
        z = self.hidden(h)
        row = self.W2[idx]
        return self.w[idx] * dc.relu((z * row).sum(-1) + self.b2[idx])


def expert_head(head: ExpertHead, h):
    return head(h)


class GatingNetwork(nn.Module):
    def __init__(self, d: int, E: int, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.W = nn.Parameter(dc.glorot_(torch.empty(E, d, dtype=dtype), gen))
        self.b = nn.Parameter(torch.zeros(E, dtype=dtype))

    def forward(self, h):
        return dc.softmax(h @ self.W.T + self.b)


def gate_weights(gate: GatingNetwork, h):
    return gate(h)


class AcquisitionModule(nn.Module):
    """LSTM cell + ``E`` expert heads + gate.

    With ``gated=False`` there is a single head and no gating network at all;
    this is the mixture-free ablation and produces the same values as a gated
    module with ``E == 1``.
    """

    def __init__(self, input_dim, d, out, E, gen, dtype=torch.float32, candidate="sigmoid", gated=True):
        super().__init__()
        if E < 1:
            raise ValueError(f"need at least one expert, got {E}")
        if not gated and E != 1:
            raise ValueError("an ungated module has exactly one expert")
        self.E, self.out, self.gated = E, out, gated
        self.cell = LSTMCell(input_dim, d, gen, dtype, candidate)
        self.experts = nn.ModuleList(ExpertHead(d, out, gen, dtype, e) for e in range(E))
        self.gate = GatingNetwork(d, E, gen, dtype) if gated else None

    def forward(self, xs):
        return self.cell(xs)

    def gates(self, H):
        if self.gate is None:
            return H.new_ones(*H.shape[:-1], 1)
        return self.gate(H)

    def expert_states(self, H):
        """(…, E, out) stacked per-expert states."""
        return torch.stack([e(H) for e in self.experts], -2)

    def state(self, H):
        """Mixed acquisition state (…, out)."""
        if self.gate is None:
            return self.experts[0](H)
        g = self.gates(H)
        out = g[..., 0:1] * self.experts[0](H)
        for e in range(1, self.E):
            out = out + g[..., e : e + 1] * self.experts[e](H)
        return out

    def gathered(self, H, idx):
        """Mixed state at output unit ``idx`` for every position, shape ``idx.shape``."""
        if self.gate is None:
            return self.experts[0].gathered(H, idx)
        g = self.gates(H)
        out = g[..., 0] * self.experts[0].gathered(H, idx)
        for e in range(1, self.E):
            out = out + g[..., e] * self.experts[e].gathered(H, idx)
        return out

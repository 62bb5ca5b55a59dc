"""Finite-difference check of every parameter gradient on a micro model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffcore as dc
from .contrastive import PairEntry, PairSet, PairTensors
from .dataio import Window
from .model import QMCKT, make_batch


@dataclass
class GradCheckConfig:
    d: int = 8
    E: int = 2
    n: int = 12
    M: int = 5
    T: int = 6
    batch: int = 2
    lambda1: float = 0.5
    lambda2: float = 0.5
    h: float = 1e-4
    seed: int = 0
    no_moe: bool = False
    candidate_activation: str = "sigmoid"

    def __post_init__(self):
        if self.d > 16 or self.T > 8:
            raise ValueError("gradient checks are meant for micro models (d <= 16, T <= 8)")
        if self.n < 6:
            raise ValueError("need at least 6 questions to form contrastive pairs")


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    seconds: float = 0.0
    failed: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def lines(self) -> list[str]:
        out = [f"{name}\t{err:.3e}\t{'FAIL' if name in self.failed else 'ok'}" for name, err in self.errors.items()]
        name, err = self.worst
        out.append(f"{'PASS' if self.passed else 'FAIL'}: worst {name} {err:.3e} (tolerance {self.tolerance:g})")
        return out


def micro_problem(cfg: GradCheckConfig):
    """Random KC map, response windows and a hand-made pair set for the micro model."""
    rng = np.random.default_rng(cfg.seed)
    kc_map = [tuple(sorted(rng.choice(cfg.M, size=int(rng.integers(1, 3)), replace=False).tolist())) for _ in range(cfg.n)]
    windows = [
        Window(
            f"s{i}",
            rng.integers(0, cfg.n, size=cfg.T),
            rng.integers(0, 2, size=cfg.T).astype(np.int8),
            np.arange(cfg.T, dtype=np.int64),
            (f"s{i}", 0),
        )
        for i in range(cfg.batch)
    ]
    # pairs only need valid indices here; the banding rules are tested elsewhere
    entries = [PairEntry(0, (1, 2), (3,), 0, 5), PairEntry(4, (5,), (1, 3), 1, 7)]
    pairs = PairSet(entries, 20.0, {})
    return kc_map, windows, pairs


def _loss_fn(model, batch, pairs, cfg: GradCheckConfig):
    from .trainer import TrainConfig, compute_losses

    # sigma_p sits below every anchor-positive distance so no hinge is at its kink
    tc = TrainConfig(
        d=cfg.d,
        E=cfg.E,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        sigma_p=1e-3,
        sigma_n=2.0,
        precision=64,
        no_moe=cfg.no_moe,
        candidate_activation=cfg.candidate_activation,
    )

    def fn():
        return compute_losses(model, batch, tc, pairs)["loss"]

    return fn


def build_micro_model(cfg: GradCheckConfig):
    from .model import ModelConfig

    kc_map, windows, pairs = micro_problem(cfg)
    mc = ModelConfig(
        n=cfg.n,
        M=cfg.M,
        d=cfg.d,
        E=cfg.E,
        no_moe=cfg.no_moe,
        candidate_activation=cfg.candidate_activation,
        precision=64,
        seed=cfg.seed,
    )
    model = QMCKT(mc, kc_map)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    with torch.no_grad():
        # spread the embeddings so contrastive distances are well away from zero
        model.encoder.Q.normal_(0.0, 0.5, generator=gen)
        model.encoder.K.normal_(0.0, 0.5, generator=gen)
        model.encoder.Q_c.copy_(model.encoder.Q + 0.3 * torch.randn(model.encoder.Q.shape, generator=gen, dtype=torch.float64))
    batch = make_batch(windows, torch.float64)
    return model, batch, PairTensors(pairs)


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = torch.linalg.vector_norm(a - b)
    den = max(float(torch.linalg.vector_norm(a)), float(torch.linalg.vector_norm(b)), 1e-8)
    return float(num) / den


def grad_check(config: GradCheckConfig | None = None, tolerance: float = 1e-4, corrupt: str | None = None) -> GradCheckReport:
    """Compare autograd against central differences for every trainable parameter.

    ``corrupt`` names an activation (``sigmoid``, ``tanh``, ``relu``,
    ``softmax``) whose backward pass is deliberately scaled, to show that the
    check catches a faulty primitive.
    """
    cfg = config or GradCheckConfig()
    start = time.perf_counter()
    model, batch, pairs = build_micro_model(cfg)
    loss_fn = _loss_fn(model, batch, pairs, cfg)
    params = model.param_dict()
    if corrupt is not None:
        with dc.corrupt_gradient(corrupt):
            analytic = dc.backward(loss_fn(), params)
    else:
        analytic = dc.backward(loss_fn(), params)

    errors = {}
    h = cfg.h
    with torch.no_grad():
        for name, p in params.items():
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                nflat[i] = (up - down) / (2 * h)
            errors[name] = relative_error(analytic[name], numeric)
    failed = [k for k, v in errors.items() if not v <= tolerance]
    return GradCheckReport(errors, tolerance, time.perf_counter() - start, failed)

"""Joint optimisation loop, early stopping, grid search and checkpoints."""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import diffcore as dc
from .contrastive import (
    DEFAULT_EDGES,
    DifficultyBanding,
    PairSet,
    PairTensors,
    build_pairs,
    compute_question_stats,
    contrastive_loss,
    sample_anchor_batch,
)
from .evalsuite import evaluate
from .model import QMCKT, ModelConfig, make_batch
from .predictor import aux_loss, kt_loss, total_loss

log = logging.getLogger(__name__)

STANDARD_GRID = {
    "lambda1": [0.0, 0.5, 1.0, 1.5, 2.0],
    "lambda2": [0.0, 0.5, 1.0, 1.5, 2.0],
    "lr": [1e-3, 1e-4, 1e-5],
    "d": [64, 256],
}
HISTORY_COLUMNS = ["epoch", "loss", "l_kt", "l_alpha", "l_beta", "l_cl", "val_auc", "val_acc"]


@dataclass
class TrainConfig:
    d: int = 64
    E: int = 2
    lambda1: float = 0.5
    lambda2: float = 0.5
    lr: float = 1e-3
    epochs: int = 200
    patience: int = 10
    batch_size: int = 64
    epsilon: float = 20.0
    band_edges: tuple = DEFAULT_EDGES
    min_band_gap: int = 2
    sigma_p: float = 0.5
    sigma_n: float = 2.0
    tau: float = 1.0
    k_max: int = 10
    l_max: int = 10
    cl_anchor_batch: int = 256
    kc_match: str = "exact"
    candidate_activation: str = "sigmoid"
    negative_hinge: str = "push-apart"
    loss_reduction: str = "sum"
    no_mcka: bool = False
    no_mqka: bool = False
    no_moe: bool = False
    no_cl: bool = False
    no_irt: bool = False
    precision: int = 32
    seed: int = 0

    def __post_init__(self):
        self.band_edges = tuple(float(x) for x in self.band_edges)
        if not 1 <= self.E <= 5:
            raise ValueError(f"E must be in 1..5, got {self.E}")
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.patience < self.epochs:
            raise ValueError("need 0 < patience < epochs")
        if not 0 < self.sigma_p < self.sigma_n or self.tau <= 0:
            raise ValueError("need 0 < sigma_p < sigma_n and tau > 0")
        if self.negative_hinge not in ("push-apart", "literal"):
            raise ValueError(f"unknown negative_hinge {self.negative_hinge!r}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown loss_reduction {self.loss_reduction!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["band_edges"] = list(self.band_edges)
        return out

    def model_config(self, n: int, M: int) -> ModelConfig:
        return ModelConfig(
            n=n,
            M=M,
            d=self.d,
            E=self.E,
            candidate_activation=self.candidate_activation,
            no_mqka=self.no_mqka,
            no_mcka=self.no_mcka,
            no_moe=self.no_moe,
            no_irt=self.no_irt,
            precision=self.precision,
            seed=self.seed,
        )

    @property
    def uses_cl(self) -> bool:
        return not self.no_cl and self.lambda2 > 0 and not self.no_mqka

    def banding(self) -> DifficultyBanding:
        return DifficultyBanding(self.band_edges, self.min_band_gap)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    base = json.loads(Path(path).read_text()) if path else {}
    base.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(base)


@dataclass
class RunState:
    epoch: int = 0
    best_auc: float = -math.inf
    best_epoch: int = 0
    since_improvement: int = 0
    checkpoint: str | None = None


def early_stop_check(state: RunState, new_auc: float, patience: int) -> str:
    """Record one epoch's validation AUC; returns ``"stop"`` or ``"continue"``."""
    state.epoch += 1
    if new_auc > state.best_auc:
        state.best_auc = new_auc
        state.best_epoch = state.epoch
        state.since_improvement = 0
    else:
        state.since_improvement += 1
    return "stop" if state.since_improvement >= patience else "continue"


def compute_losses(model: QMCKT, batch, cfg: TrainConfig, pairs: PairTensors | None = None) -> dict:
    """All loss terms for one batch; the total follows the joint objective.

    Sums run over the valid target steps of each window and are averaged
    over the windows in the batch.
    """
    out = model(batch, need_aux=cfg.lambda1 > 0)
    mask = batch.target_mask
    r = batch.targets
    B = batch.questions.shape[0]
    red = cfg.loss_reduction
    zero = model.encoder.Q.sum() * 0.0
    l_kt = kt_loss(out["r_hat"], r, mask, red)
    l_a = aux_loss(out["alpha"], r, mask, red) if "alpha" in out and cfg.lambda1 > 0 else zero
    l_b = aux_loss(out["beta_bar"], r, mask, red) if "beta_bar" in out and cfg.lambda1 > 0 else zero
    if red == "sum":
        l_kt, l_a, l_b = l_kt / B, l_a / B, l_b / B
    if pairs is not None and len(pairs) and cfg.uses_cl:
        l_cl = contrastive_loss(
            pairs, model.encoder.Q, model.encoder.Q_c, cfg.sigma_p, cfg.sigma_n, cfg.tau, cfg.negative_hinge
        )
    else:
        l_cl = zero
    lam2 = cfg.lambda2 if cfg.uses_cl else 0.0
    total = total_loss(l_kt, l_a, l_b, l_cl, cfg.lambda1, lam2)
    return {"loss": total, "l_kt": l_kt, "l_alpha": l_a, "l_beta": l_b, "l_cl": l_cl}


def train_epoch(model: QMCKT, opt, windows, pairs: PairTensors | None, cfg: TrainConfig, epoch: int) -> dict:
    """One seeded pass over shuffled batches; returns mean loss terms."""
    model.snapshot()
    model.train()
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(windows))
    params = model.param_dict()
    sums = {k: 0.0 for k in ("loss", "l_kt", "l_alpha", "l_beta", "l_cl")}
    n_batches = 0
    for b, s in enumerate(range(0, len(order), cfg.batch_size)):
        batch = make_batch([windows[i] for i in order[s : s + cfg.batch_size]], model.dtype)
        sub = None
        if pairs is not None and len(pairs) and cfg.uses_cl:
            idx = sample_anchor_batch(len(pairs), cfg.cl_anchor_batch, rng)
            sub = pairs if idx is None else pairs.subset(torch.from_numpy(idx))
        losses = compute_losses(model, batch, cfg, sub)
        if not torch.isfinite(losses["loss"]):
            parts = {k: float(v) for k, v in losses.items()}
            raise dc.NonFiniteError(f"non-finite loss at epoch {epoch} batch {b}: {parts}")
        grads = dc.backward(losses["loss"], params)
        dc.adam_step(params, grads, opt)
        for k in sums:
            sums[k] += float(losses[k].detach())
        n_batches += 1
    return {k: v / max(n_batches, 1) for k, v in sums.items()}


def evaluate_validation(model: QMCKT, windows) -> tuple[float, float]:
    rep = evaluate(model, windows)
    return rep.auc, rep.accuracy


@dataclass
class FitResult:
    model: QMCKT
    config: TrainConfig
    history: list[dict]
    state: RunState
    pairs: PairSet | None
    stats: object
    optimizer: torch.optim.Adam | None = None
    extra: dict = field(default_factory=dict)


def prepare_pairs(prepared, cfg: TrainConfig, fold: int):
    train_w = prepared.split_windows("train", fold)
    stats = compute_question_stats(train_w, prepared.bank.n)
    pairs = build_pairs(
        prepared.bank.kc_map,
        stats,
        cfg.banding(),
        cfg.epsilon,
        cfg.k_max,
        cfg.l_max,
        seed=cfg.seed,
        kc_match=cfg.kc_match,
    )
    return stats, pairs


def fit(prepared, cfg: TrainConfig, fold: int = 0, out_dir=None, pairs: PairSet | None = None, train_split="train") -> FitResult:
    """Train with early stopping on validation AUC; the returned model holds the best epoch's weights."""
    dc.seed_everything(cfg.seed)
    train_w = prepared.split_windows(train_split, fold)
    valid_w = prepared.split_windows("valid", fold)
    stats, built = prepare_pairs(prepared, cfg, fold)
    pairs = pairs if pairs is not None else built
    pt = PairTensors(pairs) if cfg.uses_cl and len(pairs) else None

    model = QMCKT(cfg.model_config(prepared.bank.n, prepared.bank.M), prepared.bank.kc_map)
    params = model.param_dict()
    opt = dc.make_adam(params, cfg.lr)
    state = RunState()
    history = []
    best = None
    for epoch in range(1, cfg.epochs + 1):
        losses = train_epoch(model, opt, train_w, pt, cfg, epoch)
        auc, acc = evaluate_validation(model, valid_w)
        verdict = early_stop_check(state, auc, cfg.patience)
        history.append(dict(epoch=epoch, **losses, val_auc=auc, val_acc=acc))
        log.info("epoch %d loss %.4f val_auc %.4f", epoch, losses["loss"], auc)
        if state.best_epoch == epoch:
            best = (copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict()))
        if verdict == "stop":
            break
    model.load_state_dict(best[0])
    opt.load_state_dict(best[1])
    result = FitResult(model, cfg, history, state, pairs, stats, opt)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{row[k]:.8g}" if isinstance(row[k], float) else row[k]) for k in HISTORY_COLUMNS})


def write_run(result: FitResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n")
    write_history(result.history, out / "history.csv")
    save_checkpoint(result.model, out / "best.ckpt", result.optimizer)
    result.state.checkpoint = str(out / "best.ckpt")


def save_checkpoint(model: QMCKT, path, opt=None):
    """Directory checkpoint: model.json, manifest.json + params.bin, optimizer.json + optimizer.bin."""
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    (p / "model.json").write_text(
        json.dumps({"config": model.config_dict(), "kc_map": [list(k) for k in model.encoder.kc_map]}, indent=2, sort_keys=True)
        + "\n"
    )
    tensors = dict(model.named_parameters())
    tensors["encoder.Q_c"] = model.encoder.Q_c
    trainable = {k: k in dict(model.named_parameters()) for k in tensors}
    dc.write_tensors(p, tensors, trainable=trainable)
    if opt is not None:
        params = model.param_dict()
        step, moments = dc.adam_state(opt, params)
        dc.write_tensors(
            p, moments, "optimizer.json", "optimizer.bin", extra={"step": step, "lr": opt.param_groups[0]["lr"]}
        )


def load_checkpoint(path, model: QMCKT | None = None, with_optimizer: bool = False):
    p = Path(path)
    try:
        meta = json.loads((p / "model.json").read_text())
    except FileNotFoundError:
        raise ValueError(f"{p} is not a checkpoint (model.json missing)") from None
    if model is None:
        model = QMCKT(ModelConfig.from_dict(meta["config"]), meta["kc_map"])
    tensors, _ = dc.read_tensors(p)
    expected = dict(model.named_parameters())
    expected["encoder.Q_c"] = model.encoder.Q_c
    for name in sorted(set(expected) | set(tensors)):
        if name not in tensors:
            raise dc.ShapeError(f"checkpoint has no tensor {name!r}")
        if name not in expected:
            raise dc.ShapeError(f"checkpoint tensor {name!r} does not exist in the model")
        if tuple(tensors[name].shape) != tuple(expected[name].shape):
            raise dc.ShapeError(
                f"shape mismatch for {name!r}: checkpoint {tuple(tensors[name].shape)}, model {tuple(expected[name].shape)}"
            )
    with torch.no_grad():
        for name, t in expected.items():
            t.copy_(tensors[name].to(t.dtype))
    if not with_optimizer:
        return model
    opt = None
    if (p / "optimizer.json").exists():
        moments, manifest = dc.read_tensors(p, "optimizer.json", "optimizer.bin")
        params = model.param_dict()
        opt = dc.make_adam(params, manifest["lr"])
        dc.load_adam_state(opt, params, manifest["step"], moments)
    return model, opt


def _grid_cells(grids: dict, sample: int | None, seed: int) -> list[dict]:
    keys = sorted(grids)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grids[k] for k in keys))]
    if sample is not None and sample < len(cells):
        pick = np.random.default_rng(seed).choice(len(cells), size=sample, replace=False)
        cells = [cells[i] for i in sorted(pick)]
    return cells


def _run_cell(args):
    prepared, cfg, fold = args
    res = fit(prepared, cfg, fold)
    return {"val_auc": res.state.best_auc, "best_epoch": res.state.best_epoch, "epochs_run": res.state.epoch}


def grid_search(prepared, base: TrainConfig, grids: dict, fold: int = 0, out_dir=None, jobs: int = 1, sample: int | None = None):
    """Exhaustive (or seeded random subset) sweep; picks the highest validation AUC, first on ties."""
    cells = _grid_cells(grids, sample, base.seed)
    cfgs = [replace(base, **cell) for cell in cells]
    tasks = [(prepared, c, fold) for c in cfgs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    rows = [dict(cell=i, **cells[i], **results[i]) for i in range(len(cells))]
    best_i = max(range(len(rows)), key=lambda i: (rows[i]["val_auc"], -i))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["cell", *sorted(grids), "val_auc", "best_epoch", "epochs_run"]
        with open(out / "grid_report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: r[k] for k in cols})
        (out / "best_config.json").write_text(json.dumps(cfgs[best_i].to_dict(), indent=2, sort_keys=True) + "\n")
    return cfgs[best_i], rows

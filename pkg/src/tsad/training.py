"""Two-phase minimax training of the reconstruction model.

Every batch takes one minimize-phase update and one maximize-phase
update. Both phases share the mean squared reconstruction error; they
differ in the sign of the weighted association-discrepancy term and in
which association branch is frozen:

  minimize: loss = MSE - lambda * mean(AssDis(prior, stop(series)))
  maximize: loss = MSE + lambda * mean(AssDis(stop(prior), series))

The stop-gradient is literal (the frozen branch receives exactly zero
gradient from the discrepancy term), and with lambda = 0 both phases
collapse to the identical pure-reconstruction step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import model as mdl
from . import scoring
from .errors import ContractError, DivergenceError


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 3.0  # discrepancy weight, config key "lambda"
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    lr_decay: float = 0.0  # per-epoch exponential factor, 0 disables
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be >= 1")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class LossRecord:
    epoch: int
    batch: int
    phase: str  # minimize | maximize
    recon_loss: float
    assdis_term: float


@dataclass
class MapCheckSummary:
    """Row-stochasticity evidence collected across a training run."""

    max_row_deviation: float = 0.0
    min_entry: float = np.inf
    checks: int = 0

    def update(self, arr: np.ndarray):
        self.max_row_deviation = max(
            self.max_row_deviation, float(np.max(np.abs(arr.sum(axis=-1) - 1.0)))
        )
        self.min_entry = min(self.min_entry, float(arr.min()))
        self.checks += 1


@dataclass
class FitResult:
    params: mdl.ModelParams
    records: list
    map_checks: MapCheckSummary = field(default_factory=MapCheckSummary)


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8, weight_decay: float = 0.0):
    """One bias-corrected adaptive step; returns (new param, new state).

    Weight decay, when enabled, is decoupled from the moment estimates.
    """
    if param.shape != grad.shape:
        raise ContractError("parameter/gradient shapes differ")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        new = new - lr * weight_decay * param
    return new, AdamState(m=m, v=v, step=t)


class Adam:
    """Keeps one moment pair per named parameter."""

    def __init__(self, params: mdl.ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.state = {
            name: AdamState(m=np.zeros_like(t.data), v=np.zeros_like(t.data))
            for name, t in params.named()
        }

    def step(self, params: mdl.ModelParams, lr: float):
        for name, t in params.named():
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            t.data, self.state[name] = adam_update(
                t.data, grad, self.state[name], lr,
                self.cfg.beta1, self.cfg.beta2, self.cfg.eps,
                self.cfg.weight_decay,
            )


def _mse(x: ad.Tensor, recon: ad.Tensor) -> ad.Tensor:
    diff = ad.sub(recon, x)
    return ad.tmean(ad.mul(diff, diff))


def run_phase(batch, cfg, params, opt, lr, lam, phase, checks=None, rng=None):
    """One forward/backward/update pass for a single phase."""
    x = ad.Tensor(batch)
    try:
        with ad.Tape() as tape:
            out = mdl.forward(x, cfg, params, training=True, rng=rng)
            rec = _mse(x, out.recon)
            if lam > 0.0:
                if phase == "minimize":
                    disc = scoring.association_discrepancy(
                        out.prior_list, [s.detach() for s in out.series_list]
                    )
                    loss = ad.sub(rec, ad.mul(lam, ad.tmean(disc)))
                else:
                    disc = scoring.association_discrepancy(
                        [p.detach() for p in out.prior_list], out.series_list
                    )
                    loss = ad.add(rec, ad.mul(lam, ad.tmean(disc)))
                assdis_value = float(disc.data.mean())
            else:
                loss = rec
                assdis_value = float(
                    scoring.association_discrepancy(
                        [p.detach() for p in out.prior_list],
                        [s.detach() for s in out.series_list],
                    ).data.mean()
                )
    except FloatingPointError as e:
        raise DivergenceError(f"{phase} phase: {e}") from None
    if not np.isfinite(loss.data):
        raise DivergenceError(f"non-finite loss in {phase} phase")
    if checks is not None:
        for maps in (out.prior_list, out.series_list):
            for m in maps:
                checks.update(m.data)
    tape.backward(loss)
    opt.step(params, lr)
    params.zero_grads()
    return float(rec.data), assdis_value


def minimax_step(batch: np.ndarray, params: mdl.ModelParams, opt: Adam,
                 model_cfg: mdl.ModelConfig, train_cfg: TrainConfig,
                 lr: float | None = None, epoch: int = 0, batch_index: int = 0,
                 checks: MapCheckSummary | None = None,
                 rng: np.random.Generator | None = None):
    """One minimize-phase update followed by one maximize-phase update."""
    if batch.ndim != 3 or batch.shape[1:] != (model_cfg.window, model_cfg.input_dim):
        raise ContractError("batch shape does not match the model configuration")
    lr = train_cfg.lr if lr is None else lr
    rec_min, dis_min = _phase(
        batch, model_cfg, params, opt, lr, train_cfg.lam, "minimize", checks, rng
    )
    rec_max, dis_max = _phase(
        batch, model_cfg, params, opt, lr, train_cfg.lam, "maximize", checks, rng
    )
    return [
        LossRecord(epoch, batch_index, "minimize", rec_min, dis_min),
        LossRecord(epoch, batch_index, "maximize", rec_max, dis_max),
    ]


def fit(train_ds: dat.SeriesDataset, train_cfg: TrainConfig,
        model_cfg: mdl.ModelConfig) -> FitResult:
    """Train over non-overlapping windows; deterministic under the seed.

    On divergence the exception carries the parameters from the last
    completed step together with the records accumulated so far.
    """
    batch = dat.windows(train_ds, model_cfg.window)
    if batch.count < 1:
        raise ContractError("training series is shorter than one window")
    wins = batch.windows
    params = mdl.init_model_params(model_cfg)
    opt = Adam(params, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    records = []
    checks = MapCheckSummary()
    stable = params.clone()
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr
        if train_cfg.lr_decay:
            lr = train_cfg.lr * (train_cfg.lr_decay**epoch)
        order = rng.permutation(batch.count)
        for bi, start in enumerate(range(0, batch.count, train_cfg.batch_size)):
            chunk = wins[order[start: start + train_cfg.batch_size]]
            try:
                records.extend(
                    minimax_step(
                        chunk, params, opt, model_cfg, train_cfg,
                        lr=lr, epoch=epoch, batch_index=bi, checks=checks, rng=rng,
                    )
                )
            except DivergenceError as e:
                raise DivergenceError(
                    str(e), stable_params=stable, records=records
                ) from None
            stable = params.clone()
    return FitResult(params=params, records=records, map_checks=checks)


# ---------------------------------------------------------------------------
# loss history CSV


def write_loss_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "batch", "phase", "recon_loss", "assdis_term"])
        for r in records:
            writer.writerow(
                [r.epoch, r.batch, r.phase, repr(r.recon_loss), repr(r.assdis_term)]
            )


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["epoch", "batch", "phase"]:
        raise ContractError(f"{path}: not a loss history file")
    return [
        LossRecord(int(r[0]), int(r[1]), r[2], float(r[3]), float(r[4]))
        for r in rows[1:]
    ]

"""Two-stage training of the inverse problem."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..geometry import DomainSpec, sample_boundary, sample_collocation
from ..measure import MeasurementSet
from ..neural.mlp import NonFiniteLoss, ParamVector, load_checkpoint, loss_gradient, save_checkpoint
from ..neural.optim import AdamState, adam_init, adam_step
from .losses import (
    TERMS,
    LossWeights,
    OutletFlow,
    loss_bc,
    loss_gradp,
    loss_ns,
    loss_pdata,
    loss_udata,
    loss_wk,
    pbar_prediction,
    update_weights_auto,
)
from .model import PinnModel
from .scales import EstimatedParams, Scales, estimate_compliance, init_windkessel_guess

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "transient"
    epochs_stage1: int = 120
    epochs_stage2: int = 1250
    steps_per_epoch: int = 1
    batch: int | None = None  # None: max(256, n_collocation // 100)
    lr_net: float = 1e-3
    lr_params: float = 1e-2
    decay_factor: float = 0.5
    n_collocation: int = 20000
    n_wall: int = 4000
    n_outlet_nodes: int = 16
    n_ode_random: int = 22
    hidden_layers: int = 4
    width: int = 64
    pi_hidden: int = 6
    pi_width: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    t_close: float = 0.3
    t_end: float | None = None
    seed: int = 0
    realizations: int = 1

    def __post_init__(self):
        if self.mode not in ("steady", "transient"):
            raise ValueError(f"mode must be 'steady' or 'transient', got {self.mode!r}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.n_collocation < 1 or self.n_wall < 1 or self.n_outlet_nodes < 2:
            raise ValueError("point counts must be positive (n_outlet_nodes >= 2)")
        if self.batch_size > self.n_collocation:
            raise ValueError("batch must not exceed the collocation count")
        if not (self.lr_net > 0 and self.lr_params > 0 and 0 < self.decay_factor <= 1):
            raise ValueError("learning rates must be positive and 0 < decay_factor <= 1")
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")

    @property
    def batch_size(self) -> int:
        return self.batch if self.batch is not None else max(256, self.n_collocation // 100)

    @property
    def epochs(self) -> int:
        return self.epochs_stage1 + self.epochs_stage2

    def as_dict(self) -> dict:
        d = asdict(self)
        d["batch"] = self.batch_size
        return d


@dataclass
class TrainResult:
    params: ParamVector
    estimates: EstimatedParams
    history: list[dict]
    model: PinnModel
    failed: bool = False
    error: str = ""
    realization: int = 0
    seed: int = 0


def realization_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(r)]).generate_state(1)[0])


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, 0x5eed])))


class Problem:
    """Nondimensional training data and the loss assembly for one realization."""

    def __init__(self, domain: DomainSpec, meas: MeasurementSet, cfg: TrainConfig, scales: Scales, seed: int):
        self.domain = domain
        self.cfg = cfg
        self.scales = scales
        self.seed = seed
        self.steady = cfg.mode == "steady"
        sc = scales
        self.K = domain.n_outlets
        # measurements
        self.d_pts = meas.points / sc.L
        self.d_t = sc.nd("time", meas.t)
        self.d_u = sc.nd("velocity", meas.u)
        self.d_v = sc.nd("velocity", meas.v)
        self.times = np.unique(sc.nd("time", np.asarray(meas.times if len(meas.times) else meas.t, dtype=float)))
        self.pbar_t = sc.nd("time", meas.pbar_t)
        self.pbar = sc.nd("pressure", meas.pbar)
        if self.steady:
            self.times = self.times[:1]
            self.pbar = self.pbar[:1]
        else:
            self.pbar = np.interp(self.times, self.pbar_t, self.pbar) if len(self.pbar_t) > 1 else self.pbar
        t_lo, t_hi = (0.0, 1.0) if self.steady else (0.0, float(self.times[-1] + (self.times[1] - self.times[0])))
        self.t_range = (t_lo, t_hi)
        # collocation and wall clouds
        ss = np.random.SeedSequence([seed, 1]).generate_state(3)
        coll = sample_collocation(domain, cfg.n_collocation, None if self.steady else sc.phys("time", self.t_range), int(ss[0]))
        self.c_pts = coll.points / sc.L
        self.c_t = None if self.steady else sc.nd("time", coll.t)
        wall = sample_boundary(domain, "wall", cfg.n_wall, int(ss[1]))
        self.w_pts = wall.points / sc.L
        rng = np.random.Generator(np.random.Philox(int(ss[2])))
        self.w_t = None if self.steady else rng.uniform(*self.t_range, cfg.n_wall)
        # network output maps come from the data
        vel_scale = float(max(np.max(np.abs(self.d_u)), np.max(np.abs(self.d_v)), 1e-6))
        p_shift = float(np.mean(self.pbar) / self.K)
        p_scale = float(max(np.std(self.pbar) / self.K, vel_scale**2))
        self.model = PinnModel(
            domain, scales, cfg.mode, cfg.hidden_layers, cfg.width, vel_scale, p_shift, p_scale,
            self.t_range, cfg.pi_hidden, cfg.pi_width, p_shift, p_scale,
        )
        self.tau = None
        if not self.steady:
            t_end = self.pbar_t[-1] if cfg.t_end is None else sc.nd("time", cfg.t_end)
            self.tau, _ = estimate_compliance(self.pbar_t, sc.nd("pressure", meas.pbar), sc.nd("time", cfg.t_close), t_end, 1.0)

    # -- batches -------------------------------------------------------------------
    def batches(self, epoch: int):
        """Index chunks for collocation and wall points, one per step; data is used whole."""
        rng = _epoch_rng(self.seed, epoch)
        B = self.cfg.batch_size
        perms = [rng.permutation(n) for n in (len(self.c_pts), len(self.w_pts))]
        data = np.arange(len(self.d_pts))
        ode_t = rng.uniform(*self.t_range, (self.cfg.steps_per_epoch, self.cfg.n_ode_random))
        out = []
        for s in range(self.cfg.steps_per_epoch):
            idx = []
            for p in perms:
                n = len(p)
                b = min(B, n)
                start = (s * b) % n
                idx.append(np.take(p, np.arange(start, start + b), mode="wrap"))
            out.append((idx[0], idx[1], data, ode_t[s]))
        return out

    # -- loss ------------------------------------------------------------------------
    def terms(self, pv: ParamVector, theta: torch.Tensor, batch, flow: OutletFlow, weights: LossWeights,
              stage: int) -> dict[str, torch.Tensor]:
        """Weighted loss terms; ``total`` is their sum."""
        ic, iw, idt, ode_t = batch
        M = self.model
        th = pv.view(theta, "net")
        t_or_none = (lambda a, i: None if a is None else a[i])
        u, v, p = M.fields(th, self.c_pts[ic], t_or_none(self.c_t, ic), 2)
        out = {"ns": loss_ns(u, v, p, M.Re, weights.ns)}
        u, v, _ = M.fields(th, self.w_pts[iw], t_or_none(self.w_t, iw), 0)
        out["bc"] = loss_bc(u.value, v.value, weights.bc)
        u, v, _ = M.fields(th, self.d_pts[idt], None if self.steady else self.d_t[idt], 0)
        out["udata"] = loss_udata(u.value, v.value, self.d_u[idt], self.d_v[idt], weights.data)
        m = self.cfg.n_outlet_nodes
        pjets, nt = M.outlet_pressure(th, self.times, m, 1)
        p_out = [j.value.reshape(nt, m) for j in pjets]
        _, qw, _, lengths = M.outlet_nodes(m)
        out["pdata"] = loss_pdata(pbar_prediction(p_out, qw, lengths), self.pbar, weights.data)
        out["gradp"] = loss_gradp([(j.d(1), j.d(0, 1)) for j in pjets], weights.gradp)
        wk = M.wk_tensors(pv, theta, self.tau)
        Q_p = torch.as_tensor(flow(self.times), dtype=torch.float64)
        if self.steady:
            out["wk"] = loss_wk(p_out, Q_p, wk, weight=weights.wk)
        else:
            th_pi = pv.view(theta, "pinet")
            pi_p, _ = M.pinet(th_pi, self.times)
            ts = self.times if stage == 1 else np.concatenate([self.times, ode_t])
            pi, dpi = M.pinet(th_pi, ts)
            Q_ode = torch.as_tensor(flow(ts), dtype=torch.float64)
            out["wk"] = loss_wk(p_out, Q_p, wk, pi_p, pi, dpi, Q_ode, weights.wk)
        out = {k: out[k] for k in TERMS}
        out["total"] = sum(out[k] for k in TERMS)
        return out


def _physical_row(est: EstimatedParams, scales: Scales) -> dict[str, float]:
    row = {}
    for k, p in enumerate(est.physical(scales), start=1):
        if est.mode == "steady":
            row[f"Rt_{k}"] = p.Rt
        else:
            row[f"Rp_{k}"] = p.Rp
            row[f"Rd_{k}"] = p.Rd
            row[f"C_{k}"] = p.C
    return row


def history_columns(mode: str, K: int) -> list[str]:
    cols = ["epoch", "stage"] + list(TERMS) + ["total"] + [f"lambda_{w}" for w in ("ns", "wk", "bc", "data", "gradp")]
    for k in range(1, K + 1):
        cols += [f"Rt_{k}"] if mode == "steady" else [f"Rp_{k}", f"Rd_{k}", f"C_{k}"]
    return cols


def _auto_update(problem: Problem, pv: ParamVector, batch, flow, weights: LossWeights, stage: int) -> LossWeights:
    theta = pv.data.detach().clone().requires_grad_(True)
    unit = replace(weights, ns=1.0, wk=1.0, bc=1.0, data=1.0, gradp=1.0)
    terms = problem.terms(pv, theta, batch, flow, unit, stage)
    a, b = pv.slices["net"]
    grads = {}
    groups = {"ns": ["ns"], "wk": ["wk"], "bc": ["bc"], "data": ["udata", "pdata"], "gradp": ["gradp"]}
    for name, parts in groups.items():
        loss = sum(terms[p] for p in parts)
        (g,) = torch.autograd.grad(loss, theta, retain_graph=True, allow_unused=True)
        grads[name] = torch.zeros(b - a, dtype=torch.float64) if g is None else g[a:b]
    return update_weights_auto(grads, weights)


def train(
    domain: DomainSpec,
    meas: MeasurementSet,
    cfg: TrainConfig,
    scales: Scales,
    reference: Sequence,
    realization: int = 0,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
) -> TrainResult:
    """Train one realization.

    ``reference`` holds the outlet models the initial guesses are drawn
    around.  With ``checkpoint_dir`` the final state is saved there; with
    ``resume`` training continues from it.  ``stop_after`` ends the run after
    that many epochs (used to split a run for resumption).
    """
    torch.set_num_threads(1)
    seed = realization_seed(cfg.seed, realization)
    problem = Problem(domain, meas, cfg, scales, seed)
    model = problem.model
    guess = init_windkessel_guess(reference, seed, scales, problem.tau)
    pv = model.init_vector(seed, guess)
    total_steps = cfg.epochs * cfg.steps_per_epoch
    lr = {"net": cfg.lr_net, "pinet": cfg.lr_net, "wk": cfg.lr_params}
    adam = adam_init(pv, lr, decay_every=max(1, math.ceil(total_steps / 3)), decay_factor=cfg.decay_factor)
    weights = cfg.weights
    history: list[dict] = []
    start = 0
    if resume and checkpoint_dir is not None and (Path(checkpoint_dir) / "header.json").exists():
        pv, head = load_checkpoint(checkpoint_dir)
        d = Path(checkpoint_dir)
        adam = replace(adam, m=torch.from_numpy(np.load(d / "adam_m.npy")), v=torch.from_numpy(np.load(d / "adam_v.npy")),
                       step=int(head["step"]))
        weights = LossWeights(**head["weights"])
        history = head["history"]
        start = int(head["epoch"])
    wk_mask = pv.mask("wk")
    result = TrainResult(pv, guess.with_vector(pv["wk"].numpy()), history, model, realization=realization, seed=seed)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, start + stop_after)
    try:
        for epoch in range(start, end):
            stage = 1 if epoch < cfg.epochs_stage1 else 2
            flow = model.outlet_flow_interpolant(pv["net"], problem.times, cfg.n_outlet_nodes)
            batches = problem.batches(epoch)
            if weights.mode == "automatic" and epoch % weights.period == 0:
                weights = _auto_update(problem, pv, batches[0], flow, weights, stage)
            last: dict[str, float] = {}
            for batch in batches:
                def closure(theta, b):
                    terms = problem.terms(pv, theta, b, flow, weights, stage)
                    last.update({k: float(t.detach()) for k, t in terms.items()})
                    return terms["total"]

                _, grad = loss_gradient(pv, batch, closure)
                if stage == 1:
                    grad = torch.where(wk_mask, torch.zeros_like(grad), grad)
                adam, new = adam_step(adam, pv.data, grad)
                pv = pv.replace(new)
            est = guess.with_vector(pv["wk"].numpy())
            row = {"epoch": epoch + 1, "stage": stage, **last}
            row.update({f"lambda_{k}": getattr(weights, k) for k in ("ns", "wk", "bc", "data", "gradp")})
            row.update(_physical_row(est, scales))
            history.append(row)
            if (epoch + 1) % 50 == 0:
                log.info("realization %d epoch %d total %.4g", realization, epoch + 1, last["total"])
    except NonFiniteLoss as exc:
        result.failed = True
        result.error = str(exc)
    result.params = pv
    result.estimates = guess.with_vector(pv["wk"].numpy())
    result.history = history
    if checkpoint_dir is not None:
        save_checkpoint(
            checkpoint_dir, pv,
            {"epoch": len(history), "step": adam.step, "weights": weights.as_dict(), "history": history,
             "seed": seed, "realization": realization, "tau": problem.tau, "config": cfg.as_dict()},
            {"adam_m": adam.m.numpy(), "adam_v": adam.v.numpy()},
        )
    return result

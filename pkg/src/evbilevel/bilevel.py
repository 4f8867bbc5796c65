"""Task-aware bilevel training of the denoiser (upper, ``w``) and enhancer (lower, ``theta``).

The lower problem psi(w, theta) is the enhancement loss with the
denoiser's soft class probabilities fed into the reflectance branch. The
upper problem phi(w, theta) adds the denoiser's cross-entropy against
gradient-guided pseudo-labels.

The hypergradient uses one unrolled lower step
``theta' = theta - eta_theta * grad_theta psi(w, theta)`` and approximates
the mixed second derivative by central differences of ``grad_w psi``
along ``v = grad_theta' phi(w, theta')``::

    g = grad_w phi(w, theta') - eta_theta * [grad_w psi(w, theta + eps v)
                                             - grad_w psi(w, theta - eps v)] / (2 eps)

with ``eps = m_scale / ||v||``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .autodiff import AdamState, ParamSet, Tape, adam_step, cosine_lr, sgd_step, zeros_like
from .autodiff import tensor as T
from .autodiff.params import load_params, save_params
from .batch import Batch
from .losses import ALPHA, BETA, den_loss, enh_loss
from .networks import denoiser_forward, enhance_decomposed

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50


class TrainingDiverged(RuntimeError):
    pass


# Generic bilevel problem ------------------------------------------------------


class BilevelProblem:
    """Upper/lower objectives written against watched parameter tensors.

    ``psi_fn(w, theta)`` and ``phi_fn(w, theta)`` receive dicts of tensors
    and return scalar tensors.
    """

    def __init__(self, psi_fn: Callable, phi_fn: Callable):
        self.psi_fn = psi_fn
        self.phi_fn = phi_fn

    def _grads(self, fn, w: ParamSet, theta: ParamSet, want_w: bool = True, want_theta: bool = True):
        with Tape() as tape:
            wt = tape.watch(w) if want_w else dict(w)
            tt = tape.watch(theta) if want_theta else dict(theta)
            loss = fn(wt, tt)
            value = loss.item()
            grads = tape.backward(loss) if loss.tape is not None else {}
        gw = ParamSet((k, grads.get(k, np.zeros_like(v))) for k, v in w.items()) if want_w else None
        gt = ParamSet((k, grads.get(k, np.zeros_like(v))) for k, v in theta.items()) if want_theta else None
        return value, gw, gt

    def psi(self, w, theta, want_w=True, want_theta=True):
        return self._grads(self.psi_fn, w, theta, want_w, want_theta)

    def phi(self, w, theta, want_w=True, want_theta=True):
        return self._grads(self.phi_fn, w, theta, want_w, want_theta)


def fd_hvp(
    grad_w: Callable[[ParamSet, ParamSet], ParamSet],
    w: ParamSet,
    theta: ParamSet,
    v: Mapping,
    m_scale: float = 0.01,
) -> tuple[ParamSet, float]:
    """Central-difference estimate of the mixed second derivative times ``v``.

    Returns the product (shaped like ``w``) and the step ``eps`` used. A zero
    direction yields a zero product and ``eps = 0``.
    """
    v = ParamSet(v)
    vnorm = v.norm()
    if vnorm == 0.0:
        logger.info("zero HVP direction; skipping finite-difference correction")
        return zeros_like(w), 0.0
    eps = m_scale / vnorm
    g_plus = grad_w(w, theta.axpy(eps, v))
    g_minus = grad_w(w, theta.axpy(-eps, v))
    return ParamSet((k, (g_plus[k] - g_minus[k]) / (2.0 * eps)) for k in w), eps


@dataclass
class HypergradReport:
    hypergrad: ParamSet
    direct: ParamSet  # grad_w phi(w, theta')
    correction: ParamSet  # -eta_theta * HVP
    fd_scale: float
    grad_theta_psi: ParamSet  # shared by the unrolled step and the committed lower step
    theta_prime: ParamSet
    psi: float
    phi: float
    grad_theta_phi: ParamSet

    @property
    def direct_norm(self) -> float:
        return self.direct.norm()

    @property
    def correction_norm(self) -> float:
        return self.correction.norm()


def hypergradient(
    problem: BilevelProblem, w: ParamSet, theta: ParamSet, eta_theta: float, m_scale: float = 0.01
) -> HypergradReport:
    psi_val, _, g_theta = problem.psi(w, theta, want_w=False)
    theta_prime = theta.axpy(-eta_theta, g_theta)
    phi_val, direct, v = problem.phi(w, theta_prime)
    if eta_theta == 0.0:
        hvp, eps = zeros_like(w), 0.0
    else:
        hvp, eps = fd_hvp(lambda ww, tt: problem.psi(ww, tt, want_theta=False)[1], w, theta, v, m_scale)
    correction = ParamSet((k, -eta_theta * hvp[k]) for k in w)
    total = ParamSet((k, direct[k] + correction[k]) for k in w)
    return HypergradReport(total, direct, correction, eps, g_theta, theta_prime, psi_val, phi_val, v)


# Network objectives -----------------------------------------------------------


def _split(p: Mapping, prefix: str) -> bool:
    return any(k.startswith(prefix) for k in p)


def enhancer_outputs(w: Mapping, theta: Mapping, batch: Batch, use_events: bool = True):
    if use_events:
        events = T.softmax(denoiser_forward(w, batch.counts), axis=1)
    else:
        events = np.zeros((len(batch), 3) + batch.counts.shape[2:])
    return enhance_decomposed(theta, batch.x_l, batch.x_r, events)


def lower_loss(w: Mapping, theta: Mapping, batch: Batch, alpha=ALPHA, beta=BETA, use_events=True):
    l_hat, r_hat, h_hat = enhancer_outputs(w, theta, batch, use_events)
    return enh_loss(h_hat, l_hat, r_hat, batch.high, batch.l_target, batch.r_target, alpha, beta)


def upper_loss(w: Mapping, theta: Mapping, batch: Batch, alpha=ALPHA, beta=BETA, enh_weight: float = 1.0):
    logits = denoiser_forward(w, batch.counts)
    loss = den_loss(logits, batch.labels)
    if enh_weight == 0.0:
        return loss
    events = T.softmax(logits, axis=1)
    l_hat, r_hat, h_hat = enhance_decomposed(theta, batch.x_l, batch.x_r, events)
    return loss + enh_weight * enh_loss(h_hat, l_hat, r_hat, batch.high, batch.l_target, batch.r_target, alpha, beta)


def network_problem(batch: Batch, alpha=ALPHA, beta=BETA) -> BilevelProblem:
    return BilevelProblem(
        lambda w, th: lower_loss(w, th, batch, alpha, beta),
        lambda w, th: upper_loss(w, th, batch, alpha, beta),
    )


# Training ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    eta_theta: float = 0.05  # unrolled lower step; also the plain-step rate
    eta_w: float = 0.05
    m_scale: float = 0.01
    alpha: float = ALPHA
    beta: float = BETA
    optimizer: str = "adam"  # "sgd" follows the plain gradient steps exactly
    lr: float = 2e-3
    lr_min: float = 1e-6
    restart_period: int = 0  # 0 -> one cosine cycle over all iterations
    batch_size: int = 0  # 0 -> full batch
    alternating_split: float = 0.5
    enh_weight: float = 1.0  # joint strategy only
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.eta_theta < 0 or self.eta_w <= 0 or self.m_scale <= 0:
            raise ValueError("step sizes and m_scale must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    w: ParamSet
    theta: ParamSet
    config: TrainConfig
    k: int = 0
    opt_w: AdamState | None = None
    opt_theta: AdamState | None = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.opt_w is None:
            self.opt_w = AdamState.init(self.w)
        if self.opt_theta is None:
            self.opt_theta = AdamState.init(self.theta)


def learning_rate(cfg: TrainConfig, k: int) -> float:
    period = cfg.restart_period or max(cfg.iterations, 1)
    return cosine_lr(k, period, cfg.lr, cfg.lr_min)


def minibatch(batch: Batch, cfg: TrainConfig, k: int) -> Batch:
    if cfg.batch_size <= 0 or cfg.batch_size >= len(batch):
        return batch
    rng = np.random.default_rng([cfg.seed, k])
    index = np.sort(rng.choice(len(batch), size=cfg.batch_size, replace=False))
    return batch.take(index)


def _update(state: TrainState, family: str, grads: ParamSet, plain_lr: float) -> None:
    cfg = state.config
    params = getattr(state, family)
    if cfg.optimizer == "sgd":
        setattr(state, family, sgd_step(params, grads, plain_lr))
    else:
        opt = getattr(state, f"opt_{family}")
        new, opt = adam_step(params, grads, opt, learning_rate(cfg, state.k))
        setattr(state, family, new)
        setattr(state, f"opt_{family}", opt)


class _Guard:
    def __init__(self):
        self.initial = None
        self.streak = 0

    def check(self, psi: float, k: int) -> None:
        if not np.isfinite(psi):
            raise TrainingDiverged(f"non-finite lower loss at iteration {k}")
        if self.initial is None:
            self.initial = psi
            return
        self.streak = self.streak + 1 if psi > DIVERGENCE_FACTOR * self.initial else 0
        if self.streak >= DIVERGENCE_PATIENCE:
            raise TrainingDiverged(
                f"lower loss {psi:.4g} exceeded {DIVERGENCE_FACTOR}x its initial value "
                f"{self.initial:.4g} for {self.streak} consecutive iterations (at iteration {k})"
            )


def _run(state: TrainState, batch: Batch, step: Callable, iterations: int | None, checkpoint: Callable | None):
    cfg = state.config
    end = cfg.iterations if iterations is None else min(cfg.iterations, state.k + iterations)
    guard = _Guard()
    while state.k < end:
        row = step(state, minibatch(batch, cfg, state.k))
        row = {"iter": state.k, **row}
        if row.get("psi") is not None:
            guard.check(row["psi"], state.k)
        state.log.append(row)
        state.k += 1
        if checkpoint is not None and cfg.checkpoint_every and state.k % cfg.checkpoint_every == 0:
            checkpoint(state)
    return state


def bilevel_step(state: TrainState, batch: Batch, observer: Callable | None = None) -> dict:
    cfg = state.config
    problem = network_problem(batch, cfg.alpha, cfg.beta)
    rep = hypergradient(problem, state.w, state.theta, cfg.eta_theta, cfg.m_scale)
    committed = rep.grad_theta_psi
    if observer is not None:
        observer(state.k, rep, committed)
    _update(state, "theta", committed, cfg.eta_theta)
    _update(state, "w", rep.hypergrad, cfg.eta_w)
    return {
        "psi": rep.psi,
        "phi": rep.phi,
        "grad_w_norm": rep.hypergrad.norm(),
        "grad_theta_norm": committed.norm(),
        "fd_scale": rep.fd_scale,
    }


def bilevel_train(state, batch, iterations=None, checkpoint=None, observer=None) -> TrainState:
    """Alternate a committed lower step and a hypergradient upper step."""
    return _run(state, batch, lambda s, b: bilevel_step(s, b, observer), iterations, checkpoint)


def joint_step(state: TrainState, batch: Batch) -> dict:
    cfg = state.config
    with Tape() as tape:
        wt = tape.watch(state.w)
        tt = tape.watch(state.theta)
        logits = denoiser_forward(wt, batch.counts)
        l_den = den_loss(logits, batch.labels)
        l_hat, r_hat, h_hat = enhance_decomposed(tt, batch.x_l, batch.x_r, T.softmax(logits, axis=1))
        l_enh = enh_loss(h_hat, l_hat, r_hat, batch.high, batch.l_target, batch.r_target, cfg.alpha, cfg.beta)
        total = l_den + cfg.enh_weight * l_enh
        psi, phi = l_enh.item(), l_den.item() + l_enh.item()
        grads = tape.backward(total)
    gw = ParamSet((k, grads[k]) for k in state.w)
    gt = ParamSet((k, grads[k]) for k in state.theta)
    _update(state, "theta", gt, cfg.eta_theta)
    _update(state, "w", gw, cfg.eta_w)
    return {"psi": psi, "phi": phi, "grad_w_norm": gw.norm(), "grad_theta_norm": gt.norm()}


def joint_train(state, batch, iterations=None, checkpoint=None) -> TrainState:
    """Simultaneous updates of both networks on L_den + L_enh."""
    return _run(state, batch, joint_step, iterations, checkpoint)


def alternating_step(state: TrainState, batch: Batch) -> dict:
    cfg = state.config
    phase1 = int(round(cfg.iterations * cfg.alternating_split))
    if state.k < phase1:
        with Tape() as tape:
            wt = tape.watch(state.w)
            loss = den_loss(denoiser_forward(wt, batch.counts), batch.labels)
            value = loss.item()
            grads = ParamSet(tape.backward(loss))
        _update(state, "w", grads, cfg.eta_w)
        return {"psi": None, "phi": value, "grad_w_norm": grads.norm(), "grad_theta_norm": 0.0}
    events = T.softmax(denoiser_forward(state.w, batch.counts), axis=1).data
    with Tape() as tape:
        tt = tape.watch(state.theta)
        l_hat, r_hat, h_hat = enhance_decomposed(tt, batch.x_l, batch.x_r, events)
        loss = enh_loss(h_hat, l_hat, r_hat, batch.high, batch.l_target, batch.r_target, cfg.alpha, cfg.beta)
        value = loss.item()
        grads = ParamSet(tape.backward(loss))
    _update(state, "theta", grads, cfg.eta_theta)
    return {"psi": value, "phi": None, "grad_w_norm": 0.0, "grad_theta_norm": grads.norm()}


def alternating_train(state, batch, iterations=None, checkpoint=None) -> TrainState:
    """Denoiser alone on L_den first, then the enhancer with the denoiser frozen."""
    return _run(state, batch, alternating_step, iterations, checkpoint)


STRATEGIES = {"bilevel": bilevel_train, "joint": joint_train, "alternating": alternating_train}


def train(strategy: str, state: TrainState, batch: Batch, **kwargs) -> TrainState:
    try:
        fn = STRATEGIES[strategy]
    except KeyError:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}") from None
    return fn(state, batch, **kwargs)


def predict(w: Mapping, theta: Mapping, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Enhanced images (N, H, W, 3) and event class probabilities (N, 3, H, W)."""
    probs = T.softmax(denoiser_forward(w, batch.counts), axis=1)
    _, _, h_hat = enhance_decomposed(theta, batch.x_l, batch.x_r, probs)
    return np.moveaxis(h_hat.data, 1, -1), probs.data


# Checkpoints ------------------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    items = [(f"w/{k}", v) for k, v in state.w.items()]
    items += [(f"theta/{k}", v) for k, v in state.theta.items()]
    for fam in ("w", "theta"):
        opt = getattr(state, f"opt_{fam}")
        items += [(f"opt_{fam}/m/{k}", v) for k, v in opt.m.items()]
        items += [(f"opt_{fam}/v/{k}", v) for k, v in opt.v.items()]
        items.append((f"opt_{fam}/step", np.array(float(opt.step))))
    items.append(("meta/iter", np.array(float(state.k))))
    save_params(ParamSet(items), path)


def load_checkpoint(path, config: TrainConfig) -> TrainState:
    blob = load_params(path)

    def strip(prefix):
        return ParamSet((k[len(prefix) :], v) for k, v in blob.items() if k.startswith(prefix))

    opts = {}
    for fam in ("w", "theta"):
        opts[fam] = AdamState(
            strip(f"opt_{fam}/m/"), strip(f"opt_{fam}/v/"), int(blob[f"opt_{fam}/step"])
        )
    return TrainState(
        strip("w/"), strip("theta/"), config, int(blob["meta/iter"]), opts["w"], opts["theta"]
    )


def with_config(state: TrainState, **changes) -> TrainState:
    return replace(state, config=replace(state.config, **changes))

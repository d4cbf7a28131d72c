"""Unsupervised training of the learned smoothers.

The loss is the relative residual after one outer iteration from ``u = 0``,
averaged over a minibatch that mixes operators and right-hand sides.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ArrayOps, Tape
from .discretization import PdeSpec
from .grid import correlate
from .mgnet import MetaMgNetDirect, MetaMgNetSC, PdeMgNet, model_cycle
from .multigrid import Hierarchy

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = {"pde_mgnet": 50, "meta_sc": 20, "meta_direct": 20}


class TrainingError(FloatingPointError):
    pass


def loss_residual(f, u, A) -> float:
    """``||f - A u||^2 / ||f||^2`` for a single field."""
    f = np.asarray(f, dtype=np.float64)
    fsq = float(np.sum(f * f))
    if fsq == 0:
        raise ValueError("loss is undefined for a zero right-hand side")
    coef = A.stencil.coef if hasattr(A, "stencil") else getattr(A, "coef", A)
    r = f - correlate(coef, u)
    return float(np.sum(r * r)) / fsq


def batch_loss(ops, model, params, hier: Hierarchy, f, nu):
    """Mean relative squared residual after one cycle from zero, as an ops scalar."""
    u = model_cycle(ops, model, params, hier, f, nu)
    r = ops.sub(f, ops.conv(hier.coefs[0], u, per_sample=True))
    fsq = np.sum(f.reshape(f.shape[0], -1) ** 2, axis=1)
    if np.any(fsq == 0):
        raise ValueError("loss is undefined for a zero right-hand side")
    return ops.mean(ops.mul(ops.sumsq(r), 1.0 / fsq))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected ADAM update; returns new parameter arrays and the state."""
    state.t += 1
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1 ** state.t)
        v_hat = v / (1 - beta2 ** state.t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, state


@dataclass
class TrainConfig:
    """Training run description.

    ``lg_inv_eps`` and ``theta`` are uniform ranges (equal ends fix the value);
    for the 3-D family both ``eps1`` and ``eps2`` follow ``lg_inv_eps``.
    ``epochs=None`` picks 50 for PDE-MgNet and 20 for the meta models.
    """

    model: str = "meta_sc"
    family: str = "aniso2d"
    n: int = 64
    levels: int = 4
    nu: tuple = (2, 1, 1, 1)
    lr: float = 0.02
    batch_size: int = 64
    epochs: int | None = None
    tasks: int = 20
    rhs_per_task: int = 100
    lg_inv_eps: tuple = (0.0, 5.0)
    theta: tuple = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        self.nu = tuple(int(v) for v in self.nu)
        self.lg_inv_eps = tuple(float(v) for v in self.lg_inv_eps)
        self.theta = tuple(float(v) for v in self.theta)
        if self.model not in DEFAULT_EPOCHS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.model]
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for name in ("batch_size", "tasks", "rhs_per_task", "levels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        lo, hi = self.lg_inv_eps
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid lg(1/eps) range {self.lg_inv_eps}")
        tlo, thi = self.theta
        if not 0 <= tlo <= thi <= math.pi + 1e-12:
            raise ValueError(f"invalid theta range {self.theta}")


@dataclass(eq=False)
class TaskSample:
    spec: PdeSpec
    rhs: np.ndarray  # (count, 1, *extent)

    @property
    def params(self):
        return self.spec.params

    @property
    def stencil(self):
        return self.spec.stencil()


def rhs_stream(seed, param_index, rhs_index):
    """Generator for right-hand side ``rhs_index`` of parameter draw ``param_index``."""
    return np.random.default_rng([int(seed), int(param_index), int(rhs_index)])


def _uniform(rng, lo, hi):
    return lo if lo == hi else float(rng.uniform(lo, hi))


def sample_tasks(config: TrainConfig, rng=None):
    """Draw ``config.tasks`` operators and ``config.rhs_per_task`` N(0, 1) fields each."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    tasks = []
    for t in range(config.tasks):
        if config.family == "aniso2d":
            eps = 10.0 ** -_uniform(rng, *config.lg_inv_eps)
            theta = _uniform(rng, *config.theta)
            spec = PdeSpec("aniso2d", (eps, theta), config.n)
        elif config.family == "aniso3d":
            e1 = 10.0 ** -_uniform(rng, *config.lg_inv_eps)
            e2 = 10.0 ** -_uniform(rng, *config.lg_inv_eps)
            spec = PdeSpec("aniso3d", (1.0, e1, e2), config.n)
        else:
            raise ValueError(f"cannot sample tasks for family {config.family!r}")
        rhs = np.stack([rhs_stream(config.seed, t, k).standard_normal((1,) + spec.extent)
                        for k in range(config.rhs_per_task)])
        tasks.append(TaskSample(spec, rhs))
    return tasks


def build_model(config: TrainConfig, tasks, hierarchies):
    """Fresh model with deterministic initial parameters."""
    rng = np.random.default_rng([config.seed, 7])
    if config.model == "pde_mgnet":
        centers = [float(np.mean([h.operators[0][lvl].stencil.center() for h in hierarchies]))
                   for lvl in range(config.levels)]
        ndim = tasks[0].spec.ndim
        return PdeMgNet(levels=config.levels, nu=config.nu, ndim=ndim).init_params(centers)
    if config.model == "meta_sc":
        model = MetaMgNetSC() if tasks[0].spec.ndim == 2 else MetaMgNetSC.default_3d()
        return model.init_params(rng)
    center = float(np.mean([h.operators[0][0].stencil.center() for h in hierarchies]))
    return MetaMgNetDirect().init_params(rng, center)


class _Trainer:
    def __init__(self, model, config: TrainConfig, tasks, hier=None):
        self.model = model
        self.config = config
        self.tasks = tasks
        self.hier = hier or [Hierarchy.from_pde(t.spec, config.levels) for t in tasks]
        self.state = AdamState()
        nu = config.nu
        self.nu = model.nu if isinstance(model, PdeMgNet) else (nu + (1,) if len(nu) == config.levels - 1 else nu)

    def batches(self, rng):
        pairs = [(t, k) for t, task in enumerate(self.tasks) for k in range(task.rhs.shape[0])]
        order = rng.permutation(len(pairs))
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            yield [pairs[i] for i in order[start:start + bs]]

    def step(self, batch):
        hier = Hierarchy.stack([self.hier[t] for t, _ in batch])
        f = np.stack([self.tasks[t].rhs[k] for t, k in batch])
        tape = Tape()
        params = {name: tape.param(value, name) for name, value in self.model.params.items()}
        loss = batch_loss(tape, self.model, params, hier, f, self.nu)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite training loss at ADAM step {self.state.t + 1}")
        grads = tape.backward(loss)
        self.model.params, _ = adam_step(self.model.params, grads, self.state, self.config.lr)
        return value

    def evaluate(self, batch):
        hier = Hierarchy.stack([self.hier[t] for t, _ in batch])
        f = np.stack([self.tasks[t].rhs[k] for t, k in batch])
        return float(batch_loss(ArrayOps(), self.model, self.model.params, hier, f, self.nu))


def train(model, config: TrainConfig, tasks=None, history_path=None):
    """Minibatch ADAM on the mixed-task dataset.

    ``model`` is a model instance (trained further from its current
    parameters) or ``None`` to build one from ``config.model``. Returns the
    model and the per-epoch history ``[(epoch, mean_loss), ...]``; epoch 0 is
    the loss of the initial parameters.
    """
    tasks = sample_tasks(config) if tasks is None else tasks
    hier = [Hierarchy.from_pde(t.spec, config.levels) for t in tasks]
    if model is None:
        model = build_model(config, tasks, hier)
    elif not model.params:
        model.params = build_model(config, tasks, hier).params
    trainer = _Trainer(model, config, tasks, hier)
    shuffle = np.random.default_rng([config.seed, 11])
    history = []
    eval_order = list(trainer.batches(np.random.default_rng([config.seed, 13])))
    initial = float(np.average([trainer.evaluate(b) for b in eval_order], weights=[len(b) for b in eval_order]))
    history.append((0, initial))
    log.info("epoch 0 loss %.6e", initial)
    for epoch in range(1, config.epochs + 1):
        losses, sizes = [], []
        for batch in trainer.batches(shuffle):
            losses.append(trainer.step(batch))
            sizes.append(len(batch))
        mean = float(np.average(losses, weights=sizes))
        history.append((epoch, mean))
        log.info("epoch %d loss %.6e", epoch, mean)
    if history_path is not None:
        write_history(history_path, history)
    return model, history


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in history:
            writer.writerow([epoch, repr(float(loss))])


def fine_tune(model, task: TaskSample, steps: int, config: TrainConfig):
    """Continue ADAM for ``steps`` minibatches on a single task's data (in place)."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        return model
    trainer = _Trainer(model, config, [task])
    rng = np.random.default_rng([config.seed, 17])
    done = 0
    while done < steps:
        for batch in trainer.batches(rng):
            trainer.step(batch)
            done += 1
            if done == steps:
                break
    return model


def task_loss(model, task: TaskSample, config: TrainConfig):
    """Mean one-cycle loss of ``model`` over all right-hand sides of ``task``."""
    trainer = _Trainer(model, config, [task])
    batches = list(trainer.batches(np.random.default_rng(0)))
    return float(np.average([trainer.evaluate(b) for b in batches], weights=[len(b) for b in batches]))

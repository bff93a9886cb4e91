"""Continual-learning strategies behind one lifecycle seam.

The trainer drives every strategy through the same hooks: before_task hands
back what to train (model view, parameter vector, labeling), augment_data may
mix in replayed samples, penalty_* add a quadratic regularizer, post_batch may
rewrite the gradient, post_step observes the applied update, after_task
consolidates state, and eval_handle routes evaluation for any learned task.
Hooks a strategy does not need keep their identity defaults.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterVector, Segment, Tensor
from .config import RunConfig, scaling_config
from .errors import ConfigError, EmptyDataError, UnknownTaskError
from .models import SubNet, TcResNet8, count_parameters, instantiate_subnet
from .seeding import derive_seed, rng_for
from .taskstream import ClipRef, TaskSpec, TaskStream


@dataclass
class TrainContext:
    """Trainer-owned services a strategy may use."""

    cfg: RunConfig
    stream: TaskStream
    features: Callable[[ClipRef], np.ndarray]  # [n_mfcc, n_frames] float64
    feature_shape: tuple[int, int]

    def batch(self, refs: list[ClipRef], label_of: Callable[[ClipRef], int]):
        if not refs:
            raise EmptyDataError("empty batch")
        x = np.stack([self.features(r) for r in refs])
        y = np.array([label_of(r) for r in refs], dtype=np.int64)
        return x, y

    @property
    def bytes_per_sample(self) -> int:
        n_mfcc, n_frames = self.feature_shape
        return n_mfcc * n_frames * 8


@dataclass
class TrainHandle:
    """What the trainer optimizes for one task."""

    forward: Callable[[np.ndarray], Tensor]  # train-mode logits
    params: ParameterVector
    label_of: Callable[[ClipRef], int]
    lr_scale: np.ndarray | None = None


@dataclass
class EvalHandle:
    """Eval-mode logits restricted to one task's label space."""

    forward: Callable[[np.ndarray], np.ndarray]
    label_of: Callable[[ClipRef], int]


def _local_labels(task: TaskSpec) -> Callable[[ClipRef], int]:
    return lambda ref: task.local_label(ref.keyword)


class Strategy:
    name = "base"

    def __init__(self, ctx: TrainContext):
        self.ctx = ctx

    # -- lifecycle ----------------------------------------------------------

    def before_task(self, task: TaskSpec) -> TrainHandle:
        raise NotImplementedError

    def augment_data(self, task: TaskSpec) -> list[ClipRef]:
        return list(task.train)

    def penalty_value(self) -> float:
        return 0.0

    def penalty_grad(self) -> np.ndarray | None:
        return None

    def post_batch(self, g: np.ndarray) -> np.ndarray:
        return g

    def post_step(self, g_kws: np.ndarray, delta: np.ndarray) -> None:
        pass

    def after_task(self, task: TaskSpec) -> None:
        pass

    def eval_handle(self, task_id: int) -> EvalHandle:
        raise NotImplementedError

    # -- accounting ---------------------------------------------------------

    def extra_params(self) -> int:
        return 0

    def buffer_bytes(self) -> int:
        return 0

    def checkpoint_items(self) -> list[tuple[str, ParameterVector]]:
        return []

    def report_extras(self) -> dict:
        return {}


class GlobalHeadStrategy(Strategy):
    """Shared base for strategies training one model with a head over every
    stream keyword; tasks are windows into that global label space."""

    def __init__(self, ctx: TrainContext):
        super().__init__(ctx)
        stream = ctx.stream
        n_mfcc = ctx.feature_shape[0]
        self.model = TcResNet8(
            n_mfcc=n_mfcc,
            n_classes=stream.n_keywords,
            seed=derive_seed(ctx.cfg.seed, "model"),
        )
        self._global_label = stream.global_label

    def before_task(self, task: TaskSpec) -> TrainHandle:
        def forward(x: np.ndarray) -> Tensor:
            self.model.train()
            return self.model(Tensor(x))

        return TrainHandle(
            forward=forward,
            params=self.model.params,
            label_of=lambda ref: self._global_label(ref.keyword),
        )

    def eval_handle(self, task_id: int) -> EvalHandle:
        task = self.ctx.stream.task(task_id)
        allowed = np.array([self._global_label(kw) for kw in task.keywords])

        def forward(x: np.ndarray) -> np.ndarray:
            self.model.eval()
            return self.model(Tensor(x)).data[:, allowed]

        return EvalHandle(forward=forward, label_of=_local_labels(task))

    def checkpoint_items(self):
        return [("model", self.model.params)]

    def _grad_on(self, refs: list[ClipRef], per_sample: bool = False):
        """Gradient(s) of the task loss at the current parameters.

        Probes run with batch statistics but never touch the running stats,
        so they are deterministic and side-effect-free at any training stage.
        """
        label_of = lambda ref: self._global_label(ref.keyword)
        self.model.train()
        params = self.model.params
        if per_sample:
            grads = []
            for ref in refs:
                x, y = self.ctx.batch([ref], label_of)
                params.zero_grad()
                loss = ad.softmax_cross_entropy(self.model.forward(Tensor(x), update_running=False), y)
                ad.backward(loss)
                grads.append(params.grad_vector())
            params.zero_grad()
            return grads
        x, y = self.ctx.batch(refs, label_of)
        params.zero_grad()
        loss = ad.softmax_cross_entropy(self.model.forward(Tensor(x), update_running=False), y)
        ad.backward(loss)
        g = params.grad_vector()
        params.zero_grad()
        return g


class FineTune(GlobalHeadStrategy):
    """Lower bound: sequential training with no protection at all."""

    name = "finetune"


def quadratic_penalty(theta: np.ndarray, anchor: np.ndarray, omega: np.ndarray,
                      lam: float) -> tuple[float, np.ndarray]:
    """(lam/2)·Σ omega·(theta-anchor)² and its gradient lam·omega·(theta-anchor)."""
    d = theta - anchor
    value = 0.5 * lam * float(np.sum(omega * d * d))
    return value, lam * omega * d


class Ewc(GlobalHeadStrategy):
    """Quadratic anchor penalty weighted by accumulated squared gradients."""

    name = "ewc"

    def __init__(self, ctx: TrainContext):
        super().__init__(ctx)
        n = self.model.params.trainable_count
        self.lam = ctx.cfg.ewc.lam
        self.omega = np.zeros(n)
        self.anchor: np.ndarray | None = None

    def fisher(self, refs: list[ClipRef]) -> np.ndarray:
        """Diagonal importance: mean over samples of squared per-sample grads."""
        if not refs:
            raise EmptyDataError("importance estimation needs at least one sample")
        total = np.zeros(self.model.params.trainable_count)
        for g in self._grad_on(refs, per_sample=True):
            total += g * g
        return total / len(refs)

    def penalty_value(self) -> float:
        if self.anchor is None:
            return 0.0
        value, _ = quadratic_penalty(self.model.params.flatten(), self.anchor, self.omega, self.lam)
        return value

    def penalty_grad(self) -> np.ndarray | None:
        if self.anchor is None:
            return None
        _, grad = quadratic_penalty(self.model.params.flatten(), self.anchor, self.omega, self.lam)
        return grad

    def after_task(self, task: TaskSpec) -> None:
        refs = list(task.train)
        cap = self.ctx.cfg.ewc.fisher_samples
        if cap and len(refs) > cap:
            order = rng_for(self.ctx.cfg.seed, f"ewc|fisher|{task.task_id}").permutation(len(refs))
            refs = [refs[i] for i in order[:cap]]
        self.omega += self.fisher(refs)
        self.anchor = self.model.params.flatten()

    def extra_params(self) -> int:
        # anchor copy + importance map
        return 2 * self.model.params.trainable_count

    def checkpoint_items(self):
        items = super().checkpoint_items()
        if self.anchor is not None:
            items.append((
                "ewc_state",
                ParameterVector([
                    Segment("anchor", Tensor(self.anchor), trainable=False),
                    Segment("omega", Tensor(self.omega), trainable=False),
                ]),
            ))
        return items


class Si(GlobalHeadStrategy):
    """Path-integral importance accumulated every step, consolidated per task."""

    name = "si"

    def __init__(self, ctx: TrainContext):
        super().__init__(ctx)
        n = self.model.params.trainable_count
        self.lam = ctx.cfg.si.lam
        self.eps = ctx.cfg.si.eps
        self.omega = np.zeros(n)
        self.path = np.zeros(n)
        self.anchor: np.ndarray | None = None
        self.task_start = self.model.params.flatten()
        self._steps = 0

    def post_step(self, g_kws: np.ndarray, delta: np.ndarray) -> None:
        si_accumulate(self.path, g_kws, delta)
        self._steps += 1

    def penalty_value(self) -> float:
        if self.anchor is None:
            return 0.0
        value, _ = quadratic_penalty(self.model.params.flatten(), self.anchor, self.omega, self.lam)
        return value

    def penalty_grad(self) -> np.ndarray | None:
        if self.anchor is None:
            return None
        _, grad = quadratic_penalty(self.model.params.flatten(), self.anchor, self.omega, self.lam)
        return grad

    def after_task(self, task: TaskSpec) -> None:
        theta = self.model.params.flatten()
        if self._steps == 0:
            warnings.warn(
                f"consolidating task {task.task_id} with no accumulated steps; "
                "importance left unchanged",
                RuntimeWarning,
            )
        else:
            si_consolidate(self.omega, self.path, theta - self.task_start, self.eps)
        self.path[:] = 0.0
        self.task_start = theta.copy()
        self.anchor = theta
        self._steps = 0

    def extra_params(self) -> int:
        return 2 * self.model.params.trainable_count

    def checkpoint_items(self):
        items = super().checkpoint_items()
        if self.anchor is not None:
            items.append((
                "si_state",
                ParameterVector([
                    Segment("anchor", Tensor(self.anchor), trainable=False),
                    Segment("omega", Tensor(self.omega), trainable=False),
                ]),
            ))
        return items


def si_accumulate(path: np.ndarray, g: np.ndarray, delta: np.ndarray) -> None:
    """Per-step path contribution: path += -g * delta (elementwise)."""
    path -= g * delta


def si_consolidate(omega: np.ndarray, path: np.ndarray, displacement: np.ndarray,
                   eps: float) -> None:
    """omega += path / (displacement² + eps)."""
    if not eps > 0:
        raise ConfigError("si.eps", f"must be > 0, got {eps}")
    omega += path / (displacement * displacement + eps)


def nr_counts(history_sizes: list[int], xi: float) -> list[int]:
    """Replay counts: ceil(xi·|D_k|) per past task, with a float-noise guard."""
    if not 0.0 < xi <= 1.0:
        raise ConfigError("nr.xi", f"must be in (0, 1], got {xi}")
    return [min(n, int(math.ceil(xi * n - 1e-9))) for n in history_sizes]


def nr_mix(history: list[list[ClipRef]], d_t: list[ClipRef], xi: float, seed: int,
           task_id: int) -> list[ClipRef]:
    """Mix a seeded, per-task-stable replay subset of history into D_t."""
    counts = nr_counts([len(d) for d in history], xi)
    mixed: list[ClipRef] = []
    for k, (d_k, n_take) in enumerate(zip(history, counts)):
        # keyed by source task only, so the stored subset never changes later
        rng = rng_for(seed, f"nr|select|{k}")
        idx = rng.choice(len(d_k), size=n_take, replace=False)
        mixed.extend(d_k[i] for i in sorted(idx))
    mixed.extend(d_t)
    order = rng_for(seed, f"nr|shuffle|{task_id}").permutation(len(mixed))
    return [mixed[i] for i in order]


class NaiveRehearsal(GlobalHeadStrategy):
    name = "nr"

    def __init__(self, ctx: TrainContext):
        super().__init__(ctx)
        self.xi = ctx.cfg.nr.xi
        self.history: list[list[ClipRef]] = []

    def augment_data(self, task: TaskSpec) -> list[ClipRef]:
        return nr_mix(self.history, list(task.train), self.xi, self.ctx.cfg.seed, task.task_id)

    def after_task(self, task: TaskSpec) -> None:
        self.history.append(list(task.train))

    def buffer_bytes(self) -> int:
        stored = sum(nr_counts([len(d) for d in self.history], self.xi))
        return stored * self.ctx.bytes_per_sample

    def report_extras(self) -> dict:
        return {"nr_stored_samples": sum(nr_counts([len(d) for d in self.history], self.xi))}


def gem_project(g_t: np.ndarray, G: np.ndarray, max_iters: int = 10000,
                kkt_tol: float = 1e-8) -> tuple[np.ndarray, dict]:
    """Project g_t to the closest gradient with nonnegative inner products
    against every row of G.

    Feasible inputs pass through untouched (same array). Otherwise solves the
    dual  min ½ vᵀGGᵀv + (G g_t)ᵀv  s.t. v ≥ 0  by cyclic coordinate descent
    and returns Gᵀv* + g_t.
    """
    info = {"projected": False, "converged": True, "iters": 0}
    if G.size == 0:
        return g_t, info
    if not (np.all(np.isfinite(g_t)) and np.all(np.isfinite(G))):
        raise ValueError("gem_project requires finite gradients")

    dots = G @ g_t
    if np.all(dots >= 0.0):
        return g_t, info

    # zero rows constrain nothing but would stall coordinate descent
    live = np.einsum("ij,ij->i", G, G) > 0.0
    Gl = G[live]
    h = Gl @ Gl.T
    b = Gl @ g_t
    diag = np.diag(h).copy()
    v = np.zeros(len(b))

    info["projected"] = True
    info["converged"] = False
    grad = b.copy()  # gradient of the dual objective: h @ v + b
    for it in range(1, max_iters + 1):
        info["iters"] = it
        for i in range(len(v)):
            step = max(0.0, v[i] - grad[i] / diag[i])
            change = step - v[i]
            if change != 0.0:
                grad += h[:, i] * change
                v[i] = step
        if np.max(np.abs(np.minimum(v, grad))) <= kkt_tol:
            break

    # Solve the identified active set exactly. This drives the residual to
    # machine precision and rescues sweeps stalled by a singular Gram matrix
    # (more constraints than gradient dimensions).
    if max_iters > 0:
        v = _polish_dual(h, b, v)
        grad = h @ v + b
    if np.max(np.abs(np.minimum(v, grad))) <= kkt_tol:
        info["converged"] = True
        return Gl.T @ v + g_t, info
    return g_t, info


def _polish_dual(h: np.ndarray, b: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Refine a converged dual iterate by solving its active set exactly.

    Coordinate descent stops at the KKT tolerance, which can leave primal
    constraint slack of the same magnitude. The active-set solve pushes the
    residual to machine precision; the input is kept whenever it wins.
    """
    m = len(v)

    def residual(cand):
        return float(np.max(np.abs(np.minimum(cand, h @ cand + b))))

    best_v, best_r = v, residual(v)
    active = (v > 0.0) | (h @ v + b < 0.0)
    for _ in range(2 * m + 2):
        idx = np.flatnonzero(active)
        cand = np.zeros(m)
        if idx.size:
            sol, *_ = np.linalg.lstsq(h[np.ix_(idx, idx)], -b[idx], rcond=None)
            if np.any(sol < 0.0):
                active[idx[np.argmin(sol)]] = False
                continue
            cand[idx] = sol
        r = residual(cand)
        if r < best_r:
            best_v, best_r = cand, r
        violated = (h @ cand + b < 0.0) & ~active
        if not violated.any():
            break
        active |= violated
    return best_v


class Gem(GlobalHeadStrategy):
    """Constrain each step's gradient against per-past-task buffer gradients."""

    name = "gem"

    def __init__(self, ctx: TrainContext):
        super().__init__(ctx)
        gcfg = ctx.cfg.gem
        n_slots = len(ctx.stream.tasks)
        self.budget = gcfg.buffer
        self.quota = max(1, gcfg.buffer // n_slots)
        self.max_iters = gcfg.max_iters
        self.kkt_tol = gcfg.kkt_tol
        self.buffers: list[list[ClipRef]] = []
        self.fallbacks = 0
        self.projections = 0

    def post_batch(self, g: np.ndarray) -> np.ndarray:
        live = [buf for buf in self.buffers if buf]
        if not live:
            return g
        G = np.stack([self._grad_on(buf) for buf in live])
        g_new, info = gem_project(g, G, max_iters=self.max_iters, kkt_tol=self.kkt_tol)
        if info["projected"]:
            self.projections += 1
            if not info["converged"]:
                self.fallbacks += 1
                warnings.warn(
                    "gradient projection did not converge; using raw gradient",
                    RuntimeWarning,
                )
        return g_new

    def after_task(self, task: TaskSpec) -> None:
        refs = list(task.train)
        stored = sum(len(b) for b in self.buffers)
        take = min(self.quota, max(0, self.budget - stored), len(refs))
        order = rng_for(self.ctx.cfg.seed, f"gem|{task.task_id}").permutation(len(refs))
        self.buffers.append([refs[i] for i in order[:take]])

    def buffer_bytes(self) -> int:
        return sum(len(b) for b in self.buffers) * self.ctx.bytes_per_sample

    def report_extras(self) -> dict:
        return {
            "gem_projections": self.projections,
            "gem_fallbacks": self.fallbacks,
            "gem_quota_per_task": self.quota,
        }


class Pcl(Strategy):
    """Progressive growth: a shared trainable encoder feeds per-task columns
    that are frozen the moment their task ends."""

    name = "pcl"

    def __init__(self, ctx: TrainContext):
        super().__init__(ctx)
        cfg = ctx.cfg
        self.model = TcResNet8(
            n_mfcc=ctx.feature_shape[0],
            n_classes=ctx.stream.task(0).n_keywords,
            seed=derive_seed(cfg.seed, "model"),
        )
        self.scaling = scaling_config(cfg)
        self.fixed = cfg.pcl.fixed
        self.freeze_shared = cfg.pcl.freeze_shared
        self.encoder_lr_scale = cfg.pcl.encoder_lr_scale
        self.subnets: dict[int, SubNet] = {}
        self.current: SubNet | None = None
        self._pretrain_done = False

    # -- training -----------------------------------------------------------

    def before_task(self, task: TaskSpec) -> TrainHandle:
        if task.is_pretrain:
            def forward(x: np.ndarray) -> Tensor:
                self.model.train()
                return self.model(Tensor(x))

            return TrainHandle(
                forward=forward, params=self.model.params, label_of=_local_labels(task)
            )

        subnet = instantiate_subnet(
            c_t=task.n_keywords,
            cfg=self.scaling,
            c_in=self.model.encoder_channels(),
            fixed=self.fixed,
            seed=derive_seed(self.ctx.cfg.seed, f"subnet|{task.task_id}"),
        )
        self.current = subnet
        self.subnets[task.task_id] = subnet

        encoder_trains = not self.freeze_shared
        segments = list(subnet.params.segments)
        if encoder_trains:
            segments = self.model.encoder_segments() + segments
        params = ParameterVector(segments)

        lr_scale = None
        if encoder_trains and self.encoder_lr_scale != 1.0:
            enc_names = {s.name for s in self.model.encoder_segments()}
            parts = [
                np.full(s.size, self.encoder_lr_scale if s.name in enc_names else 1.0)
                for s in params.segments
                if s.trainable
            ]
            lr_scale = np.concatenate(parts)

        def forward(x: np.ndarray) -> Tensor:
            if encoder_trains:
                self.model.train()
            else:
                self.model.eval()
            subnet.train()
            # pretrain normalization stats stay locked: frozen routes read the
            # encoder through them at eval time
            h = self.model.encoder_forward(Tensor(x), update_running=False)
            return subnet(h)

        return TrainHandle(
            forward=forward, params=params, label_of=_local_labels(task), lr_scale=lr_scale
        )

    def after_task(self, task: TaskSpec) -> None:
        if task.is_pretrain:
            # the pretrained tail becomes the frozen route for task 0
            for seg in self.model.tail_segments():
                seg.tensor.requires_grad = False
            self._pretrain_done = True
            return
        assert self.current is not None
        for seg in self.current.params.segments:
            seg.tensor.requires_grad = False
        self.current.eval()
        self.current = None

    # -- evaluation ---------------------------------------------------------

    def eval_handle(self, task_id: int) -> EvalHandle:
        task = self.ctx.stream.task(task_id)
        if task_id == 0:
            def forward(x: np.ndarray) -> np.ndarray:
                self.model.eval()
                return self.model(Tensor(x)).data

            return EvalHandle(forward=forward, label_of=_local_labels(task))

        if task_id not in self.subnets:
            raise UnknownTaskError(f"no sub-network learned for task {task_id}")
        subnet = self.subnets[task_id]

        def forward(x: np.ndarray) -> np.ndarray:
            self.model.eval()
            subnet.eval()
            h = self.model.encoder_forward(Tensor(x))
            return subnet(h).data

        return EvalHandle(forward=forward, label_of=_local_labels(task))

    # -- accounting ----------------------------------------------------------

    def extra_params(self) -> int:
        return sum(count_parameters(sn.params) for sn in self.subnets.values())

    def checkpoint_items(self):
        items = [("model", self.model.params)]
        for tid in sorted(self.subnets):
            items.append((f"subnet{tid}", self.subnets[tid].params))
        return items

    def report_extras(self) -> dict:
        return {
            "pcl_subnet_channels": {
                str(tid): list(sn.spec.scaled_channels) for tid, sn in sorted(self.subnets.items())
            },
            "pcl_subnet_params": {
                str(tid): count_parameters(sn.params) for tid, sn in sorted(self.subnets.items())
            },
        }


class StandAlone(Strategy):
    """Upper bound: an independent model per task, never revisited."""

    name = "standalone"

    def __init__(self, ctx: TrainContext):
        super().__init__(ctx)
        self.models: dict[int, TcResNet8] = {}
        self.current_id: int | None = None

    def before_task(self, task: TaskSpec) -> TrainHandle:
        model = TcResNet8(
            n_mfcc=self.ctx.feature_shape[0],
            n_classes=task.n_keywords,
            seed=derive_seed(self.ctx.cfg.seed, f"standalone|{task.task_id}"),
        )
        self.models[task.task_id] = model
        self.current_id = task.task_id

        def forward(x: np.ndarray) -> Tensor:
            model.train()
            return model(Tensor(x))

        return TrainHandle(forward=forward, params=model.params, label_of=_local_labels(task))

    def after_task(self, task: TaskSpec) -> None:
        self.models[task.task_id].eval()
        self.current_id = None

    def eval_handle(self, task_id: int) -> EvalHandle:
        if task_id not in self.models:
            raise UnknownTaskError(f"no model trained for task {task_id}")
        model = self.models[task_id]
        task = self.ctx.stream.task(task_id)

        def forward(x: np.ndarray) -> np.ndarray:
            model.eval()
            return model(Tensor(x)).data

        return EvalHandle(forward=forward, label_of=_local_labels(task))

    def extra_params(self) -> int:
        return sum(
            count_parameters(m.params) for tid, m in self.models.items() if tid != 0
        )

    def checkpoint_items(self):
        return [(f"model{tid}", self.models[tid].params) for tid in sorted(self.models)]


_REGISTRY = {
    "finetune": FineTune,
    "ewc": Ewc,
    "si": Si,
    "nr": NaiveRehearsal,
    "gem": Gem,
    "pcl": Pcl,
    "standalone": StandAlone,
}


def make_strategy(ctx: TrainContext) -> Strategy:
    name = ctx.cfg.strategy
    if name not in _REGISTRY:
        raise ConfigError("strategy", f"unknown strategy {name!r}")
    return _REGISTRY[name](ctx)

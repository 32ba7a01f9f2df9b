"""Surrogate-gradient BPTT on the fixed time grid.

The forward pass runs on the emulator (monolithic, partitioned or mixed);
the backward pass is evaluated on the recorded observables, so partitioned
and hardware-emulated runs are trained in the loop.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .emulator import EmulatorConfig, EventStream
from .graph import NetworkGraph, ReceptiveField
from .partition import Backend, ExecutionGraph
from .scheduler import orchestrate, simulate

log = logging.getLogger(__name__)

MODES = ("reference", "partitioned", "mixed")
DECODERS = ("max_over_time", "last_value")


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message: str, checkpoint: NetworkGraph | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 0.002
    epochs: int = 100
    lr_decay: float = 0.985
    lr_milestones: tuple[int, ...] = ()
    milestone_factor: float = 0.5
    dropout_p: float = 0.15
    superspike_alpha: float = 50.0
    readout_scale: float = 3.0
    decode: str = "max_over_time"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_max: float = 1.0
    patience: int | None = None
    mode: str = "reference"
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.lr_decay > 0 and self.batch_size > 0):
            raise ValueError("rates and batch size must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p in [0, 1) violated")
        if self.decode not in DECODERS:
            raise ValueError(f"decode must be one of {DECODERS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch: milestone halving when
        milestones are set, exponential decay otherwise."""
        if self.lr_milestones:
            hits = sum(1 for m in self.lr_milestones if epoch >= m)
            return self.learning_rate * self.milestone_factor**hits
        return self.learning_rate * self.lr_decay**epoch


@dataclass(frozen=True)
class RegularizerConstants:
    burst: float = 0.0025
    theta_h: float = 0.0033
    theta_o: float = 0.0033
    v_o: float = 0.00016
    gamma: float = 0.985

    def __post_init__(self):
        if min(self.burst, self.theta_h, self.theta_o, self.v_o) < 0:
            raise ValueError("regularizer constants must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma in (0, 1] violated")

    @classmethod
    def zero(cls) -> RegularizerConstants:
        return cls(0.0, 0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class TraceScale:
    """Affine map ``recorded = factor * model + offset``."""

    factor: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if not self.factor > 0:
            raise ValueError("factor > 0 violated")

    def to_model(self, recorded):
        return (np.asarray(recorded) - self.offset) / self.factor


def fit_trace_scale(hw_trace, reference_trace) -> TraceScale:
    """Least-squares affine fit of a recorded trace onto the reference
    dynamics in model units."""
    hw = np.asarray(hw_trace, dtype=np.float64).reshape(-1)
    ref = np.asarray(reference_trace, dtype=np.float64).reshape(-1)
    if hw.size != ref.size or hw.size < 2:
        raise ValueError("need at least 2 paired samples")
    if np.ptp(ref) == 0 or np.ptp(hw) == 0:
        raise ValueError("degenerate (constant) trace")
    A = np.column_stack([ref, np.ones_like(ref)])
    (factor, offset), *_ = np.linalg.lstsq(A, hw, rcond=None)
    return TraceScale(float(factor), float(offset))


@dataclass
class SpikingModel:
    network: NetworkGraph
    cfg: EmulatorConfig
    plan: ExecutionGraph | None = None
    hardware_cfg: EmulatorConfig | None = None
    trace_scale: TraceScale = TraceScale()

    def __post_init__(self):
        if self.network.recurrent_units():
            raise TrainingError("training supports feed-forward networks only")

    @property
    def order(self) -> list[str]:
        return [u[0] for u in self.network.topological_units()]

    @property
    def readout(self) -> str:
        sinks = {p.id for p in self.network.populations} - {
            q.pre for q in self.network.projections
        }
        li = [p for p in self.order if p in sinks and not self.network.population(p).params.spiking]
        if len(li) != 1:
            raise TrainingError(f"expected exactly one LI readout population, found {li}")
        return li[0]

    @property
    def hidden(self) -> list[str]:
        return [p for p in self.order if self.network.population(p).params.spiking]

    def with_weights(self, weights: Mapping[str, np.ndarray]) -> SpikingModel:
        network = self.network.with_weights(dict(weights))
        plan = self.plan.with_network(network) if self.plan is not None else None
        return dataclasses.replace(self, network=network, plan=plan)


@dataclass
class Observables:
    """Recorded spikes and membrane traces in model units, per population."""

    spikes: dict[str, np.ndarray]
    traces: dict[str, np.ndarray]
    inputs: dict[str, np.ndarray]
    dropped: int = 0


def forward(
    model: SpikingModel,
    inputs: Mapping[str, EventStream],
    mode: str = "reference",
    masks: Mapping[str, np.ndarray] | None = None,
    workers: int = 1,
) -> Observables:
    net, cfg = model.network, model.cfg
    if mode == "reference":
        res = simulate(net, inputs, cfg, masks)
        emulated: set[str] = set()
    elif mode in ("partitioned", "mixed"):
        plan = model.plan
        if plan is None:
            raise TrainingError(f"{mode} mode requires a plan")
        _check_plan(plan, net)
        plan = plan.with_network(net)
        if mode == "partitioned":
            plan = plan.with_backends({e.id: Backend.REFERENCE for e in plan.executions})
        emulated = {e.id for e in plan.executions if e.backend is Backend.EMULATED}
        res = orchestrate(plan, inputs, cfg, workers=workers, masks=masks, hardware_cfg=model.hardware_cfg)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    spikes = {p.id: res.population_spikes(p.id) for p in net.populations}
    traces = {}
    for p in net.populations:
        tr = res.population_traces(p.id)
        owners = res.plan.owners(p.id)
        if any(eid in emulated for eid, _, _ in owners):
            tr = tr.copy()
            for eid, s, _ in owners:
                if eid in emulated:
                    tr[:, :, s.start : s.stop] = model.trace_scale.to_model(tr[:, :, s.start : s.stop])
        traces[p.id] = tr
    grids = {i.id: inputs[i.id].to_grid(i.size, cfg.dt) for i in net.inputs}
    return Observables(spikes, traces, grids, sum(res.dropped.values()))


def _check_plan(plan: ExecutionGraph, network: NetworkGraph) -> None:
    a = [(p.id, p.size) for p in plan.network.populations]
    b = [(p.id, p.size) for p in network.populations]
    if a != b or [p.id for p in plan.network.projections] != [p.id for p in network.projections]:
        raise TrainingError("plan does not match the model")


def decode(traces, method: str = "max_over_time", readout_scale: float = 1.0) -> np.ndarray:
    """Class scores from (batch, steps, classes) readout traces."""
    traces = np.asarray(traces)
    if traces.shape[-2] == 0:
        raise ValueError("empty traces")
    if method == "max_over_time":
        return readout_scale * traces.max(axis=-2)
    if method == "last_value":
        return readout_scale * traces[..., -1, :]
    raise ValueError(f"unknown decoder {method!r}")


def predict(scores) -> np.ndarray:
    # argmax breaks ties towards the lowest class index
    return np.argmax(scores, axis=-1)


def surrogate_derivative(v, theta, alpha):
    return 1.0 / (alpha * np.abs(np.asarray(v) - theta) + 1.0) ** 2


def cross_entropy(scores, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(scores) and its gradient."""
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def decode_grad(traces, d_scores, method, readout_scale) -> np.ndarray:
    g = np.zeros_like(traces)
    B, _, n = traces.shape
    if method == "max_over_time":
        k = traces.argmax(axis=1)
        g[np.arange(B)[:, None], k, np.arange(n)[None, :]] = readout_scale * d_scores
    else:
        g[:, -1, :] = readout_scale * d_scores
    return g


@dataclass
class Regularization:
    loss: float
    d_spikes: dict[str, np.ndarray] = field(default_factory=dict)
    d_traces: dict[str, np.ndarray] = field(default_factory=dict)
    d_weights: dict[str, np.ndarray] = field(default_factory=dict)


def regularization_terms(
    hidden_spikes: Mapping[str, np.ndarray],
    readout_traces: np.ndarray | None,
    weights: Mapping[str, np.ndarray],
    c: RegularizerConstants,
    epoch: int = 0,
    weight_max: float = 1.0,
    readout: str | None = None,
) -> Regularization:
    """Rate, burst, readout-membrane and weight-range penalties with their
    gradients.

    rate:   gamma^epoch * theta_h * mean over (batch, neuron) of count^2
    burst:  burst * mean over (batch, step) of population count^2
    v_o:    v_o * mean readout membrane^2
    weight: theta_o * mean relu(|w| - weight_max)^2
    """
    out = Regularization(0.0)
    rate_w = c.gamma**epoch * c.theta_h
    for pid, s in hidden_spikes.items():
        B, T, n = s.shape
        counts = s.sum(axis=1)
        pop_t = s.sum(axis=2)
        out.loss += rate_w * float(np.mean(counts**2)) + c.burst * float(np.mean(pop_t**2))
        out.d_spikes[pid] = (
            rate_w * 2.0 * counts[:, None, :] / (B * n) + c.burst * 2.0 * pop_t[:, :, None] / (B * T)
        ) * np.ones_like(s)
    if readout_traces is not None and c.v_o:
        out.loss += c.v_o * float(np.mean(readout_traces**2))
        out.d_traces[readout or "readout"] = c.v_o * 2.0 * readout_traces / readout_traces.size
    if weights and c.theta_o:
        total = sum(w.size for w in weights.values())
        for pid, w in weights.items():
            excess = np.maximum(np.abs(w) - weight_max, 0.0)
            out.loss += c.theta_o * float(np.sum(excess**2)) / total
            out.d_weights[pid] = c.theta_o * 2.0 * excess * np.sign(w) / total
    return out


def regularization_loss(hidden_spikes, readout_traces, weights, c, epoch=0, weight_max=1.0) -> float:
    return regularization_terms(hidden_spikes, readout_traces, weights, c, epoch, weight_max).loss


def refractory_mask(spikes: np.ndarray, ref_steps: int) -> np.ndarray:
    """1 where a neuron is clamped after one of its recorded spikes."""
    mask = np.zeros_like(spikes)
    for d in range(1, ref_steps + 1):
        mask[:, d:] = np.maximum(mask[:, d:], spikes[:, :-d])
    return mask


def population_adjoint(params, traces, spikes, g_trace, g_spike, alpha, dt) -> np.ndarray:
    """dL/d(synaptic input) of one population by reverse accumulation
    through the unrolled exponential-Euler dynamics."""
    a = math.exp(-dt / params.tau_syn)
    b = math.exp(-dt / params.tau_mem)
    B, T, n = traces.shape
    gx = np.empty_like(traces)
    gu_next = np.zeros((B, n))
    gi_next = np.zeros((B, n))
    if params.spiking:
        nr_all = 1.0 - refractory_mask(spikes, int(round(params.refractory / dt)))
        sg_all = surrogate_derivative(traces, params.v_thresh, alpha)
    for k in range(T - 1, -1, -1):
        gv = b * gu_next
        if params.spiking:
            nr, u, s = nr_all[:, k], traces[:, k], spikes[:, k]
            gs = g_spike[:, k] + gv * nr * (params.v_reset - u)
            gu = nr * (gv * (1.0 - s) + gs * sg_all[:, k] + g_trace[:, k])
        else:
            gu = gv + g_trace[:, k]
        gi = dt * gu + a * gi_next
        gx[:, k] = gi
        gu_next, gi_next = gu, gi
    return gx


def backward(
    model: SpikingModel,
    obs: Observables,
    d_traces: Mapping[str, np.ndarray],
    d_spikes: Mapping[str, np.ndarray] | None = None,
    masks: Mapping[str, np.ndarray] | None = None,
    alpha: float | Mapping[str, float] = 50.0,
) -> dict[str, np.ndarray]:
    """Weight gradients given loss adjoints on traces and spikes."""
    net, dt = model.network, model.cfg.dt
    masks = masks or {}
    g_spk = {p.id: np.zeros_like(obs.spikes[p.id]) for p in net.populations}
    for pid, g in (d_spikes or {}).items():
        g_spk[pid] = g_spk[pid] + g
    grads: dict[str, np.ndarray] = {}
    for pid in reversed(model.order):
        pop = net.population(pid)
        g_tr = d_traces.get(pid)
        if g_tr is None:
            g_tr = np.zeros_like(obs.traces[pid])
        a = alpha[pid] if isinstance(alpha, Mapping) else alpha
        gx = population_adjoint(pop.params, obs.traces[pid], obs.spikes[pid], g_tr, g_spk[pid], a, dt)
        if not np.all(np.isfinite(gx)):
            # the reverse pass smears it backwards; report where it entered
            step = int(np.argwhere(~np.isfinite(gx))[:, 1].max())
            raise TrainingError(f"non-finite gradient in {pid!r} at step {step}")
        for proj in net.afferents(pid):
            is_pop = not net.is_input(proj.pre)
            pre = obs.spikes[proj.pre] if is_pop else obs.inputs[proj.pre]
            mask = masks.get(proj.pre)
            if mask is not None:
                pre = pre * mask[:, None, :]
            dW, dpre = _projection_grads(proj, pre, gx, need_pre=is_pop)
            grads[proj.id] = dW
            if is_pop:
                if mask is not None:
                    dpre = dpre * mask[:, None, :]
                g_spk[proj.pre] += dpre
    return grads


def _projection_grads(proj, pre, gx, need_pre=True):
    B, T, n_pre = pre.shape
    n_post = gx.shape[2]
    W = proj.weights
    if not isinstance(proj.connectivity, ReceptiveField):
        dW = pre.reshape(-1, n_pre).T @ gx.reshape(-1, n_post)
        dpre = (gx.reshape(-1, n_post) @ W.T).reshape(B, T, n_pre) if need_pre else None
        return dW, dpre
    idx = proj.connectivity.indices(n_pre)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    dW = np.zeros_like(W)
    dpre = np.zeros_like(pre) if need_pre else None
    for b in range(B):
        gathered = pre[b][:, safe] * valid  # (T, n_post, K)
        dW += np.einsum("tpk,tp->pk", gathered, gx[b])
        if need_pre:
            contrib = gx[b][:, :, None] * W[None] * valid
            np.add.at(dpre[b], (slice(None), idx[valid]), contrib[:, valid])
    return dW, dpre


@dataclass
class BatchResult:
    loss: float
    correct: int
    grads: dict[str, np.ndarray]
    scores: np.ndarray


def loss_and_grads(
    model: SpikingModel,
    inputs: Mapping[str, EventStream],
    labels: np.ndarray,
    cfg: TrainConfig,
    reg: RegularizerConstants,
    epoch: int = 0,
    masks: Mapping[str, np.ndarray] | None = None,
    mode: str | None = None,
    compute_grads: bool = True,
) -> BatchResult:
    obs = forward(model, inputs, mode or cfg.mode, masks, cfg.workers)
    ro = model.readout
    traces = obs.traces[ro]
    scores = decode(traces, cfg.decode, cfg.readout_scale)
    ce, d_scores = cross_entropy(scores, labels)
    hidden = {p: obs.spikes[p] for p in model.hidden}
    r = regularization_terms(hidden, traces, model.network.weights(), reg, epoch, cfg.weight_max, ro)
    loss = ce + r.loss
    correct = int(np.sum(predict(scores) == labels))
    if not compute_grads:
        return BatchResult(loss, correct, {}, scores)
    d_tr = {ro: decode_grad(traces, d_scores, cfg.decode, cfg.readout_scale)}
    if ro in r.d_traces:
        d_tr[ro] = d_tr[ro] + r.d_traces[ro]
    grads = backward(model, obs, d_tr, r.d_spikes, masks, cfg.superspike_alpha)
    for pid, g in r.d_weights.items():
        grads[pid] = grads[pid] + g
    return BatchResult(loss, correct, grads, scores)


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.betas
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def dropout_masks(model: SpikingModel, batch: int, p: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Bernoulli keep-masks (batch, neurons) for hidden populations; spikes
    are binary so survivors are not rescaled."""
    if p == 0:
        return {}
    return {
        h: (rng.random((batch, model.network.population(h).size)) >= p).astype(np.float64)
        for h in model.hidden
    }


Encoder = Callable[[np.ndarray, np.random.Generator], Mapping[str, EventStream]]
Augment = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray | None = None
    y_val: np.ndarray | None = None


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float

    def line(self) -> str:
        return (
            f"{self.epoch} {self.train_loss:.6f} {self.train_acc:.6f} "
            f"{self.val_loss:.6f} {self.val_acc:.6f} {self.lr:.8g}"
        )


@dataclass
class TrainResult:
    model: SpikingModel
    history: list[EpochMetrics]
    best_epoch: int


def evaluate(
    model: SpikingModel,
    images: np.ndarray,
    labels: np.ndarray,
    encode: Encoder,
    cfg: TrainConfig,
    reg: RegularizerConstants = RegularizerConstants.zero(),
    epoch: int = 0,
    rng: np.random.Generator | None = None,
    mode: str | None = None,
) -> tuple[float, float]:
    """Mean loss and accuracy without dropout."""
    rng = rng or np.random.default_rng(0)
    total_loss = correct = 0.0
    for start in range(0, len(images), cfg.batch_size):
        x, y = images[start : start + cfg.batch_size], labels[start : start + cfg.batch_size]
        r = loss_and_grads(model, encode(x, rng), y, cfg, reg, epoch, mode=mode, compute_grads=False)
        total_loss += r.loss * len(y)
        correct += r.correct
    return total_loss / len(images), correct / len(images)


def train_loop(
    model: SpikingModel,
    data: Dataset,
    encode: Encoder,
    cfg: TrainConfig,
    reg: RegularizerConstants = RegularizerConstants(),
    augment: Augment | None = None,
    on_epoch: Callable[[EpochMetrics, SpikingModel], None] | None = None,
) -> TrainResult:
    """Adam on cross-entropy plus regularization.

    Keeps the best model on the validation set when one is given and stops
    after ``cfg.patience`` epochs without validation improvement.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    shuffle_rng, drop_rng, enc_rng, aug_rng = (np.random.default_rng(s) for s in seeds)
    opt = Adam(cfg.learning_rate, cfg.betas, cfg.eps)
    history: list[EpochMetrics] = []
    best_acc, best_epoch, best_model = -1.0, -1, model
    stale = 0
    n = len(data.x_train)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        total_loss = correct = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = data.x_train[idx], data.y_train[idx]
            if augment is not None:
                x = augment(x, aug_rng)
            masks = dropout_masks(model, len(idx), cfg.dropout_p, drop_rng)
            r = loss_and_grads(model, encode(x, enc_rng), y, cfg, reg, epoch, masks)
            if not math.isfinite(r.loss):
                raise TrainingDiverged(f"loss is {r.loss} in epoch {epoch}", best_model.network)
            model = model.with_weights(opt.step(model.network.weights(), r.grads))
            total_loss += r.loss * len(idx)
            correct += r.correct
        val_loss = val_acc = float("nan")
        if data.x_val is not None and len(data.x_val):
            val_loss, val_acc = evaluate(model, data.x_val, data.y_val, encode, cfg, reg, epoch)
        m = EpochMetrics(epoch, total_loss / n, correct / n, val_loss, val_acc, opt.lr)
        history.append(m)
        log.info("epoch %s", m.line())
        if on_epoch is not None:
            on_epoch(m, model)
        score = val_acc if math.isfinite(val_acc) else m.train_acc
        if score > best_acc:
            best_acc, best_epoch, best_model, stale = score, epoch, model, 0
        else:
            stale += 1
            if cfg.patience is not None and stale > cfg.patience:
                break
    final = best_model if data.x_val is not None and len(data.x_val) else model
    return TrainResult(final, history, best_epoch)

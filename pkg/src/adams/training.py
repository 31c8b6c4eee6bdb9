"""Batch sampling, Adam, the training loop and the finite-difference harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adaptive_params import (AdaptiveParamTable, ConstraintConfig, TrajectoryLog,
                              record_trajectory)
from .data import GenerationConfig, SyntheticDataset, generate
from .encoder import EncoderConfig, TwoViewEncoder
from .geometry import normalize_rows
from .losses import (LOSS_KINDS, LossGradients, LossValue, SimilarityBatch, adams_gradients,
                     adams_loss, baseline_loss)

LOG_HEADER = ("step", "epoch", "loss", "loss_pos", "loss_neg")


class TrainingDiverged(RuntimeError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``omega`` lives in ``constraints``; 0.01 was tuned for batches of 256
    and is kept as the default for the smaller desk-scale batch.
    """

    classes_per_batch: int = 16
    samples_per_class: int = 4
    epochs: int = 50
    lr_encoder: float = 1e-4
    lr_adaptive: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "adams"
    adaptive_margin: bool = True
    adaptive_scale: bool = True
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    trajectory_every_step: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        if self.classes_per_batch < 2:
            raise ValueError("classes_per_batch must be >= 2 so every anchor has negatives")
        if self.samples_per_class < 2:
            raise ValueError("samples_per_class must be >= 2 so positives exist")
        if self.lr_encoder <= 0:
            raise ValueError("lr_encoder must be positive")
        if self.lr_adaptive < 0:
            raise ValueError("lr_adaptive must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.samples_per_class

    @property
    def adaptive(self) -> bool:
        return self.loss == "adams"


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    frames: list[np.ndarray]
    labels: np.ndarray
    text_features: np.ndarray   # one row per sample

    @property
    def size(self) -> int:
        return self.labels.size


def train_pool(dataset: SyntheticDataset) -> dict[int, list[int]]:
    """Train-split sample indices grouped by class."""
    pool: dict[int, list[int]] = {}
    for idx, s in enumerate(dataset.samples):
        if s.split == "train":
            pool.setdefault(s.class_id, []).append(idx)
    return pool


def sample_batch(dataset: SyntheticDataset, config: TrainConfig, rng: np.random.Generator,
                 pool: dict[int, list[int]] | None = None) -> Batch:
    """C distinct classes with M samples each, drawn without replacement."""
    pool = train_pool(dataset) if pool is None else pool
    C, M = config.classes_per_batch, config.samples_per_class
    eligible = sorted(c for c, idx in pool.items() if len(idx) >= M)
    if len(eligible) < C:
        raise InsufficientDataError(f"need {C} train classes with >= {M} samples, have {len(eligible)}")
    classes = rng.choice(eligible, size=C, replace=False)
    picked = [i for c in classes for i in rng.choice(pool[int(c)], size=M, replace=False)]
    text = dataset.text_matrix()
    labels = np.array([dataset.samples[i].class_id for i in picked], dtype=np.int64)
    return Batch([dataset.samples[i].frames for i in picked], labels, text[labels])


# ---------------------------------------------------------------------------
# Adam

class Adam:
    """Adam with bias correction over a dict of named arrays (updated in place)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def adam_step(params, grads, state: Adam, lr: float):
    state.step(params, grads, lr)
    return params


# ---------------------------------------------------------------------------
# one forward/backward pass

@dataclass
class StepResult:
    loss: LossValue
    loss_grads: LossGradients | None
    raw_grads: dict[str, np.ndarray]
    proxy_grads: np.ndarray
    proxy_classes: np.ndarray
    text_feature_grads: np.ndarray


def _similarity_loss(sim_batch: SimilarityBatch, table: AdaptiveParamTable, kind: str,
                     alpha_prefactor=None):
    if kind == "adams":
        lv = adams_loss(sim_batch, table, alpha_prefactor)
        g = adams_gradients(sim_batch, table, alpha_prefactor)
        return lv, g, g.d_s_pos, g.d_s_neg
    cfg = table.config
    lv, d_pos, d_neg = baseline_loss(kind, sim_batch, cfg.lambda0, cfg.alpha0, cfg.beta0)
    return lv, None, d_pos, d_neg


def forward_backward(encoder: TwoViewEncoder, table: AdaptiveParamTable, batch: Batch,
                     kind: str, alpha_prefactor=None) -> StepResult:
    """Loss of one batch and gradients for every trainable quantity.

    Encoder gradients are left in the encoder's buffers; adaptive gradients
    are returned w.r.t. the raw (unconstrained) values.
    """
    x = encoder.encode_acoustic_batch(batch.frames)
    classes, inv = np.unique(batch.labels, return_inverse=True)
    class_feats = _class_features(batch, classes)
    t_cls = encoder.encode_text_batch(class_feats)
    t = t_cls[inv]
    sim = x @ t.T
    sb = SimilarityBatch.from_matrix(sim, batch.labels)
    lv, lg, d_pos, d_neg = _similarity_loss(sb, table, kind, alpha_prefactor)

    d_sim = sb.scatter(d_pos, d_neg)
    d_x = d_sim @ t
    d_t = d_sim.T @ x
    d_t_cls = np.zeros_like(t_cls)
    np.add.at(d_t_cls, inv, d_t)
    encoder.zero_grad()
    _, d_feat = encoder.backward(d_x, d_t_cls)
    proxy_grads = d_t_cls - t_cls * np.sum(d_t_cls * t_cls, axis=1, keepdims=True)

    raw = {} if lg is None else raw_gradients(table, lg)
    return StepResult(lv, lg, raw, proxy_grads, classes, d_feat)


def raw_gradients(table: AdaptiveParamTable, lg: LossGradients) -> dict[str, np.ndarray]:
    """Constrained-value gradients times the per-class chain factors."""
    f_lp, f_ln, f_a, f_b = table.chain_factors()
    return {"lambda_p": lg.d_lambda_p * f_lp, "lambda_n": lg.d_lambda_n * f_ln,
            "alpha": lg.d_alpha * f_a, "beta": lg.d_beta * f_b}


def _class_features(batch: Batch, classes: np.ndarray) -> np.ndarray:
    first = {}
    for i, c in enumerate(batch.labels.tolist()):
        first.setdefault(c, i)
    return batch.text_features[[first[int(c)] for c in classes]]


def batch_loss_value(encoder: TwoViewEncoder, table: AdaptiveParamTable, batch: Batch, kind: str,
                     alpha_prefactor=None, proxies: np.ndarray | None = None) -> float:
    """Forward-only loss.  ``proxies`` (per batch class) replaces the text view
    and is compared by cosine similarity."""
    x = encoder.encode_acoustic_batch(batch.frames)
    classes, inv = np.unique(batch.labels, return_inverse=True)
    if proxies is None:
        t_cls = encoder.encode_text_batch(_class_features(batch, classes))
    else:
        t_cls, _ = normalize_rows(proxies)
    sim = x @ t_cls[inv].T
    sb = SimilarityBatch.from_matrix(sim, batch.labels)
    if kind == "adams":
        return adams_loss(sb, table, alpha_prefactor).total
    cfg = table.config
    return baseline_loss(kind, sb, cfg.lambda0, cfg.alpha0, cfg.beta0)[0].total


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    encoder: TwoViewEncoder
    table: AdaptiveParamTable
    log: list[tuple[int, int, float, float, float]]
    trajectory: TrajectoryLog


class TrainLogWriter:
    def __init__(self, path: str | Path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(LOG_HEADER)

    def write(self, row):
        step, epoch, *vals = row
        self._w.writerow([step, epoch] + [repr(float(v)) for v in vals])

    def flush(self):
        self._fh.flush()

    def close(self):
        self._fh.close()


def _adaptive_keys(config: TrainConfig) -> list[str]:
    keys = []
    if config.adaptive and config.adaptive_margin:
        keys += ["lambda_p", "lambda_n"]
    if config.adaptive and config.adaptive_scale:
        keys += ["alpha", "beta"]
    return keys


def apply_adaptive_update(table: AdaptiveParamTable, raw_grads: dict[str, np.ndarray], opt: Adam,
                          lr: float, keys) -> None:
    """One Adam step on the selected raw adaptive parameter groups."""
    keys = list(keys)
    if not keys:
        return
    raw = table.raw()
    opt.step({k: raw[k] for k in keys}, {k: raw_grads[k] for k in keys}, lr)


def adaptive_step(table: AdaptiveParamTable, batch: SimilarityBatch, lr: float,
                  opt: Adam | None = None, keys=("lambda_p", "lambda_n", "alpha", "beta")) -> LossGradients:
    """One Adam step of the adaptive table alone on a fixed similarity batch."""
    lg = adams_gradients(batch, table)
    apply_adaptive_update(table, raw_gradients(table, lg), opt or Adam(), lr, keys)
    return lg


def _check_finite(step: int, result: StepResult, encoder: TwoViewEncoder):
    bad = []
    if not math.isfinite(result.loss.total):
        bad.append(f"loss={result.loss.total}")
    for k, g in list(encoder.named_grads().items()) + list(result.raw_grads.items()):
        if not np.all(np.isfinite(g)):
            bad.append(k)
    if bad:
        raise TrainingDiverged(f"non-finite values at step {step}: {', '.join(bad)}")


def train(dataset: SyntheticDataset, config: TrainConfig, log_writer: TrainLogWriter | None = None,
          trajectory: TrajectoryLog | None = None) -> TrainResult:
    enc_cfg = replace(config.encoder, input_dim=dataset.input_dim, text_dim=dataset.text_dim)
    encoder = TwoViewEncoder(enc_cfg)
    table = AdaptiveParamTable.create(dataset.num_seen, config.constraints)
    trajectory = TrajectoryLog() if trajectory is None else trajectory
    rng = np.random.default_rng(config.seed)
    pool = train_pool(dataset)
    steps_per_epoch = math.ceil(sum(len(v) for v in pool.values()) / config.batch_size)
    enc_opt = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
    ada_opt = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
    keys = _adaptive_keys(config)
    log = []

    if config.adaptive:
        record_trajectory(table, 0, trajectory)
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            for b in range(steps_per_epoch):
                batch = sample_batch(dataset, config, rng, pool)
                step += 1
                res = forward_backward(encoder, table, batch, config.loss)
                _check_finite(step, res, encoder)
                enc_opt.step(encoder.named_params(), encoder.named_grads(), config.lr_encoder)
                if config.adaptive:
                    apply_adaptive_update(table, res.raw_grads, ada_opt, config.lr_adaptive, keys)
                row = (step, epoch, res.loss.total, res.loss.positive, res.loss.negative)
                log.append(row)
                if log_writer is not None:
                    log_writer.write(row)
                if config.adaptive:
                    last = b == steps_per_epoch - 1
                    if config.trajectory_every_step or last:
                        record_trajectory(table, step, trajectory)
                    else:
                        record_trajectory(table, step, trajectory, np.unique(batch.labels))
                if config.max_steps is not None and step >= config.max_steps:
                    return TrainResult(encoder, table, log, trajectory)
            if log_writer is not None:
                log_writer.flush()
            trajectory.flush()
    finally:
        if log_writer is not None:
            log_writer.flush()
        trajectory.flush()
    return TrainResult(encoder, table, log, trajectory)


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass(frozen=True)
class GradCheckConfig:
    seed: int = 0
    num_classes: int = 5
    samples_per_class: int = 6
    dim: int = 6
    hidden_dim: int = 8
    embed_dim: int = 5
    classes_per_batch: int = 3
    batch_samples_per_class: int = 2
    loss: str = "adams"
    constraints_enabled: bool = True
    omega: float = 0.01
    raw_scale: float = 0.5
    step: float = 1e-6
    # floors of the relative-error denominator: entries far below the group's
    # scale are compared at the FD round-off level (eps * |loss| / step)
    denom_floor: float = 1e-3
    group_floor: float = 1e-2


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def lines(self) -> list[str]:
        out = [f"{name:22s} max rel err {err:.3e}  {'ok' if err <= self.tolerance else 'FAIL'}"
               for name, err in self.errors.items()]
        out.append(f"{'PASS' if self.passed else 'FAIL'}: max rel err {self.max_error:.3e} "
                   f"(tolerance {self.tolerance:g})")
        return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0,
              group_floor: float = 0.0) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor, group_floor * max|a|)."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    floor = max(floor, group_floor * float(np.max(np.abs(a))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if floor == 0.0:
        denom = np.where(denom == 0.0, 1.0, denom)
    return float(np.max(np.abs(a - n) / denom))


def _central_diff(fn, arr: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return out


def grad_check_setup(config: GradCheckConfig):
    """Small random dataset, encoder, perturbed adaptive table and one batch."""
    gen = GenerationConfig(num_classes=config.num_classes, samples_per_class=config.samples_per_class,
                           unseen_fraction=0.0, input_dim=config.dim, text_dim=config.dim,
                           noise_scale_range=(0.3, 0.9), seq_len_range=(2, 4), seed=config.seed)
    data = generate(gen)
    enc = TwoViewEncoder(EncoderConfig(config.dim, config.dim, config.hidden_dim, config.embed_dim,
                                       seed=config.seed + 1))
    cc = ConstraintConfig(omega=config.omega, constraints_enabled=config.constraints_enabled)
    table = AdaptiveParamTable.create(data.num_seen, cc)
    rng = np.random.default_rng(config.seed + 2)
    for arr in table.raw().values():
        u = rng.uniform(-1, 1, size=arr.size)
        if cc.constraints_enabled:
            arr += config.raw_scale * u
        else:
            arr *= 1 + 0.1 * config.raw_scale * u
    tc = TrainConfig(classes_per_batch=config.classes_per_batch,
                     samples_per_class=config.batch_samples_per_class, loss=config.loss)
    batch = sample_batch(data, tc, rng)
    return data, enc, table, batch


def grad_check(config: GradCheckConfig | None = None, tolerance: float = 1e-6) -> GradCheckReport:
    """Analytic gradients of the full batch loss against central differences.

    The 1/alpha prefactor of the positive term is frozen at its current
    value for every probe, so the raw-alpha check follows the stop-gradient.
    """
    config = config or GradCheckConfig()
    _, enc, table, batch = grad_check_setup(config)
    h = config.step
    kind = config.loss
    prefactor = table.constrained()[2].copy()

    res = forward_backward(enc, table, batch, kind, prefactor)
    grads = {k: v.copy() for k, v in enc.named_grads().items()}

    def loss():
        return batch_loss_value(enc, table, batch, kind, prefactor)

    errors = {}
    for name, p in enc.named_params().items():
        errors[name] = rel_error(grads[name], _central_diff(loss, p, h), config.denom_floor, config.group_floor)

    # proxy input path: class text features fed to the text view
    classes = res.proxy_classes
    cls_feats = _class_features(batch, classes).copy()
    inv = np.searchsorted(classes, batch.labels)

    def loss_cls_feats():
        return batch_loss_value(enc, table, replace(batch, text_features=cls_feats[inv]), kind, prefactor)

    errors["text_features"] = rel_error(res.text_feature_grads, _central_diff(loss_cls_feats, cls_feats, h),
                                        config.denom_floor, config.group_floor)

    # proxies themselves, compared by cosine similarity
    proxies = enc.encode_text_batch(cls_feats).copy()

    def loss_proxies():
        return batch_loss_value(enc, table, batch, kind, prefactor, proxies=proxies)

    errors["proxies"] = rel_error(res.proxy_grads, _central_diff(loss_proxies, proxies, h), config.denom_floor, config.group_floor)

    if kind == "adams":
        for name, arr in table.raw().items():
            errors[f"raw_{name}"] = rel_error(res.raw_grads[name], _central_diff(loss, arr, h),
                                              config.denom_floor, config.group_floor)
    return GradCheckReport(errors, tolerance)

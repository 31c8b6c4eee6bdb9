"""AdaMS / Asymmetric-Proxy loss terms and their closed-form gradients.

Proxies act as anchors in the positive term, S(t_i, x_j) for j in P_i, and
as negatives in the negative term, S(x_i, t_k) for k in N_i.  All functions
work on per-anchor similarity arrays so the same code serves hand-built
single-anchor cases and full batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .adaptive_params import AdaptiveParamTable

LOSS_KINDS = ("adams", "asyp", "proxy_ms", "proxy_bd")


class EmptyNegativesError(ValueError):
    """An anchor has no negatives, so the mean over N_i is undefined."""


def softplus(z):
    """log(1 + e^z) with the linear and exponential tails split off."""
    z = np.asarray(z, dtype=np.float64)
    out = np.log1p(np.exp(np.clip(z, -30.0, 30.0)))
    out = np.where(z > 30.0, z, out)
    return np.where(z < -30.0, np.exp(np.minimum(z, -30.0)), out)


def _log1p_sum_exp(z: np.ndarray) -> tuple[float, np.ndarray]:
    """Return log(1 + sum(e^z)) and the weights e^z_j / (1 + sum(e^z))."""
    if z.size == 0:
        return 0.0, z.copy()
    m = max(0.0, float(z.max()))
    e = np.exp(z - m)
    denom = np.exp(-m) + e.sum()
    return m + float(np.log(denom)), e / denom


@dataclass
class SimilarityBatch:
    """Per-anchor similarity lists.

    ``s_pos[i][m]`` is S(t_i, x_j) for the m-th j in P_i and ``s_neg[i][m]``
    is S(x_i, t_k) for the m-th k in N_i.  ``pos_index`` / ``neg_index``
    record those sample indices when the batch was built from embeddings.
    """

    s_pos: list[np.ndarray]
    s_neg: list[np.ndarray]
    class_of: np.ndarray
    pos_index: list[np.ndarray] | None = None
    neg_index: list[np.ndarray] | None = None

    def __post_init__(self):
        self.class_of = np.asarray(self.class_of, dtype=np.int64)
        self.s_pos = [np.asarray(s, dtype=np.float64).reshape(-1) for s in self.s_pos]
        self.s_neg = [np.asarray(s, dtype=np.float64).reshape(-1) for s in self.s_neg]
        if not (len(self.s_pos) == len(self.s_neg) == self.class_of.size):
            raise ValueError("s_pos, s_neg and class_of must have one entry per anchor")
        if self.size == 0:
            raise ValueError("empty batch")

    @property
    def size(self) -> int:
        return self.class_of.size

    @classmethod
    def from_matrix(cls, sim: np.ndarray, labels: Sequence[int]) -> "SimilarityBatch":
        """Build from ``sim[a, b] = S(x_a, t_b)`` where t_b is the proxy of sample b's class."""
        labels = np.asarray(labels, dtype=np.int64)
        n = labels.size
        if sim.shape != (n, n):
            raise ValueError(f"similarity matrix must be {n}x{n}, got {sim.shape}")
        s_pos, s_neg, pos_index, neg_index = [], [], [], []
        for i in range(n):
            same = labels == labels[i]
            p = np.flatnonzero(same)
            k = np.flatnonzero(~same)
            pos_index.append(p)
            neg_index.append(k)
            s_pos.append(sim[p, i])
            s_neg.append(sim[i, k])
        return cls(s_pos, s_neg, labels, pos_index, neg_index)

    def scatter(self, d_pos: list[np.ndarray], d_neg: list[np.ndarray]) -> np.ndarray:
        """Map per-anchor similarity gradients back onto the N x N matrix."""
        if self.pos_index is None or self.neg_index is None:
            raise ValueError("batch was not built from a similarity matrix")
        out = np.zeros((self.size, self.size))
        for i in range(self.size):
            out[self.pos_index[i], i] += d_pos[i]
            out[i, self.neg_index[i]] += d_neg[i]
        return out


@dataclass
class LossGradients:
    """Gradients of the batch loss.

    Adaptive-parameter gradients are taken w.r.t. the constrained values and
    summed over the anchors of each class; the raw-value chain factor is
    applied by the caller.
    """

    d_s_pos: list[np.ndarray]
    d_s_neg: list[np.ndarray]
    d_lambda_p: np.ndarray
    d_lambda_n: np.ndarray
    d_alpha: np.ndarray
    d_beta: np.ndarray


@dataclass
class LossValue:
    total: float
    positive: float
    negative: float


# ---------------------------------------------------------------------------
# per-anchor terms

def positive_term(s_pos, lam: float, alpha: float, omega: float = 0.0,
                  alpha_prefactor: float | None = None) -> float:
    """(1/sg[alpha]) log(1 + sum_j e^{alpha (lam - S_j)}) - omega lam.

    ``alpha_prefactor`` is the value held fixed in the 1/alpha factor; it
    defaults to ``alpha`` and only differs when probing the stop-gradient.
    """
    s = np.asarray(s_pos, dtype=np.float64).reshape(-1)
    pre = alpha if alpha_prefactor is None else alpha_prefactor
    lse, _ = _log1p_sum_exp(alpha * (lam - s))
    return lse / pre - omega * lam


def negative_term(s_neg, lam: float, beta: float, omega: float = 0.0) -> float:
    """mean_k log(1 + e^{beta (S_k - lam)}) + omega lam."""
    s = np.asarray(s_neg, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise EmptyNegativesError("anchor has no negatives")
    return float(np.mean(softplus(beta * (s - lam)))) + omega * lam


def positive_grads(s_pos, lam: float, alpha: float, omega: float = 0.0,
                   alpha_prefactor: float | None = None) -> tuple[np.ndarray, float, float]:
    """(dL/dS_j, dL/dlam, dL/dalpha) of the positive term, 1/alpha held fixed."""
    s = np.asarray(s_pos, dtype=np.float64).reshape(-1)
    pre = alpha if alpha_prefactor is None else alpha_prefactor
    _, w = _log1p_sum_exp(alpha * (lam - s))
    ratio = alpha / pre
    d_s = -ratio * w
    d_lam = ratio * float(w.sum()) - omega
    d_alpha = float(np.dot(lam - s, w)) / pre
    return d_s, d_lam, d_alpha


def negative_grads(s_neg, lam: float, beta: float, omega: float = 0.0) -> tuple[np.ndarray, float, float]:
    """(dL/dS_k, dL/dlam, dL/dbeta) of the negative term."""
    s = np.asarray(s_neg, dtype=np.float64).reshape(-1)
    n = s.size
    if n == 0:
        raise EmptyNegativesError("anchor has no negatives")
    sig = expit(beta * (s - lam))
    d_s = (beta / n) * sig
    d_lam = -(beta / n) * float(sig.sum()) + omega
    d_beta = float(np.dot(s - lam, sig)) / n
    return d_s, d_lam, d_beta


# ---------------------------------------------------------------------------
# batch level, AdaMS

def _anchor_params(batch: SimilarityBatch, table: AdaptiveParamTable, i: int):
    c = batch.class_of[i]
    lp, ln, a, b = table.constrained()
    return float(lp[c]), float(ln[c]), float(a[c]), float(b[c])


def adams_positive_term(i: int, batch: SimilarityBatch, lambda_p: float, alpha: float,
                        omega: float) -> float:
    return positive_term(batch.s_pos[i], lambda_p, alpha, omega)


def adams_negative_term(i: int, batch: SimilarityBatch, lambda_n: float, beta: float,
                        omega: float) -> float:
    return negative_term(batch.s_neg[i], lambda_n, beta, omega)


def adams_loss(batch: SimilarityBatch, table: AdaptiveParamTable,
               alpha_prefactor: np.ndarray | None = None) -> LossValue:
    """Mean over anchors of the class-specific positive and negative terms.

    ``alpha_prefactor`` (per class) freezes the 1/alpha factor of the
    positive term at given values; used by finite-difference probes.
    """
    lp, ln, a, b = table.constrained()
    omega = table.config.omega
    pos = neg = 0.0
    for i in range(batch.size):
        c = batch.class_of[i]
        pre = None if alpha_prefactor is None else float(alpha_prefactor[c])
        pos += positive_term(batch.s_pos[i], lp[c], a[c], omega, pre)
        neg += negative_term(batch.s_neg[i], ln[c], b[c], omega)
    n = batch.size
    return LossValue((pos + neg) / n, pos / n, neg / n)


def batch_loss(batch: SimilarityBatch, table: AdaptiveParamTable) -> float:
    return adams_loss(batch, table).total


def adams_gradients(batch: SimilarityBatch, table: AdaptiveParamTable,
                    alpha_prefactor: np.ndarray | None = None) -> LossGradients:
    lp, ln, a, b = table.constrained()
    omega = table.config.omega
    n = batch.size
    grads = LossGradients([], [], *(np.zeros(table.num_classes) for _ in range(4)))
    for i in range(n):
        c = batch.class_of[i]
        pre = None if alpha_prefactor is None else float(alpha_prefactor[c])
        d_sp, d_lp, d_a = positive_grads(batch.s_pos[i], lp[c], a[c], omega, pre)
        d_sn, d_ln, d_b = negative_grads(batch.s_neg[i], ln[c], b[c], omega)
        grads.d_s_pos.append(d_sp / n)
        grads.d_s_neg.append(d_sn / n)
        grads.d_lambda_p[c] += d_lp / n
        grads.d_lambda_n[c] += d_ln / n
        grads.d_alpha[c] += d_a / n
        grads.d_beta[c] += d_b / n
    return grads


def grad_similarity(batch, table) -> tuple[list[np.ndarray], list[np.ndarray]]:
    g = adams_gradients(batch, table)
    return g.d_s_pos, g.d_s_neg


def grad_margins(batch, table) -> tuple[np.ndarray, np.ndarray]:
    g = adams_gradients(batch, table)
    return g.d_lambda_p, g.d_lambda_n


def grad_scales(batch, table) -> tuple[np.ndarray, np.ndarray]:
    g = adams_gradients(batch, table)
    return g.d_alpha, g.d_beta


# ---------------------------------------------------------------------------
# fixed-hyper-parameter baselines

def _asyp_anchor(s_pos, s_neg, lam, alpha, beta):
    # log(1 + sum e^{alpha(lam - S)}) / alpha
    z = alpha * (lam - s_pos)
    lse, w = _log1p_sum_exp(z)
    lpos, dpos = lse / alpha, -w
    # mean softplus(beta(S - lam))
    zn = beta * (s_neg - lam)
    lneg = float(np.mean(softplus(zn)))
    dneg = beta * expit(zn) / s_neg.size
    return lpos, lneg, dpos, dneg


def _ms_anchor(s_pos, s_neg, lam, alpha, beta):
    lpos, _, dpos, _ = _asyp_anchor(s_pos, s_neg, lam, alpha, beta)
    lse, w = _log1p_sum_exp(beta * (s_neg - lam))
    return lpos, lse / beta, dpos, w


def _bd_anchor(s_pos, s_neg, lam, alpha, beta):
    _, lneg, _, dneg = _asyp_anchor(s_pos, s_neg, lam, alpha, beta)
    if s_pos.size == 0:
        return 0.0, lneg, s_pos.copy(), dneg
    zp = -alpha * (s_pos - lam)
    lpos = float(np.mean(softplus(zp)))
    dpos = -alpha * expit(zp) / s_pos.size
    return lpos, lneg, dpos, dneg


_BASELINES = {"asyp": _asyp_anchor, "proxy_ms": _ms_anchor, "proxy_bd": _bd_anchor}


def baseline_loss(kind: str, batch: SimilarityBatch, lam: float, alpha: float, beta: float
                  ) -> tuple[LossValue, list[np.ndarray], list[np.ndarray]]:
    """Loss and similarity gradients of a fixed-hyper-parameter baseline.

    ``kind`` is one of ``asyp``, ``proxy_ms``, ``proxy_bd``.
    """
    if kind not in _BASELINES:
        raise ValueError(f"unknown baseline {kind!r}")
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    fn = _BASELINES[kind]
    n = batch.size
    pos = neg = 0.0
    d_pos, d_neg = [], []
    for i in range(n):
        if batch.s_neg[i].size == 0:
            raise EmptyNegativesError(f"anchor {i} has no negatives")
        lp, ln, dp, dn = fn(batch.s_pos[i], batch.s_neg[i], lam, alpha, beta)
        pos += lp
        neg += ln
        d_pos.append(dp / n)
        d_neg.append(dn / n)
    return LossValue((pos + neg) / n, pos / n, neg / n), d_pos, d_neg

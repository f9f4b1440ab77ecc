"""Disentanglement scoring, clustering accuracy, and importance-weighted NLL.

The variance-vote metric and the mutual-information gap both consume a
dump of per-example continuous representation means plus the ground-truth
factor table; their conditional forms reweight per-class scores by the
empirical class frequencies, dropping factors that a class holds constant.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from discondvae import checkpoint as ckpt
from discondvae.data import FactorTable
from discondvae.distributions import gaussian_log_density
from discondvae.models import LatentSample, one_hot
from discondvae.rng import RandomSource
from discondvae.tensor import Tensor, no_grad

# Representation dimensions with dataset std below this are collapsed and
# take no part in variance voting.
COLLAPSED_STD = 1e-6

DEFAULT_TRAIN_VOTES = 800
DEFAULT_EVAL_VOTES = 200
DEFAULT_VOTE_BATCH = 64
DEFAULT_MIG_BINS = 20
MIN_CLASS_EXAMPLES = 100


class MetricError(ValueError):
    pass


@dataclass
class RepresentationDump:
    cont: np.ndarray    # [N, K] continuous representation means
    alpha: np.ndarray   # [N, d] class posteriors

    def __post_init__(self):
        if self.cont.shape[0] != self.alpha.shape[0]:
            raise MetricError("representation and posterior row counts differ")
        if not (np.isfinite(self.cont).all() and np.isfinite(self.alpha).all()):
            raise MetricError("representation dump contains non-finite values")

    def save(self, path) -> None:
        ckpt.save_checkpoint(path, {"reps.cont": self.cont, "reps.alpha": self.alpha})

    @staticmethod
    def load(path) -> "RepresentationDump":
        entries = ckpt.load_checkpoint(path)
        return RepresentationDump(cont=entries["reps.cont"], alpha=entries["reps.alpha"])


@dataclass
class MetricReport:
    metric: str
    value: float
    class_label: str = ""
    seed: int = 0
    n: int = 0

    def csv_row(self) -> list:
        return [self.metric, f"{self.value:.6f}", self.class_label, self.seed, self.n]


METRIC_CSV_HEADER = ["metric", "value", "class", "seed", "n"]


def write_metric_csv(path, reports: list[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_CSV_HEADER)
        for r in reports:
            writer.writerow(r.csv_row())


def _randint(rng: RandomSource, n: int) -> int:
    return min(int(rng.uniform(()) * n), n - 1)


def _usable_factors(factors: FactorTable) -> list[int]:
    cols = []
    for f in range(factors.indices.shape[1]):
        if np.unique(factors.indices[:, f]).size > 1:
            cols.append(f)
    return cols


def factorvae_metric(reps: np.ndarray, factors: FactorTable, rng: RandomSource,
                     num_train_votes: int = DEFAULT_TRAIN_VOTES,
                     num_eval_votes: int = DEFAULT_EVAL_VOTES,
                     batch_size: int = DEFAULT_VOTE_BATCH) -> float:
    """Variance-vote disentanglement accuracy.

    Each vote fixes one factor, draws a batch sharing that factor value,
    and votes for the std-normalized representation dimension with the
    smallest within-batch variance. A per-dimension majority classifier is
    fit on training votes and scored on held-out votes.
    """
    reps = np.asarray(reps, dtype=np.float64)
    stds = reps.std(axis=0)
    active = np.flatnonzero(stds >= COLLAPSED_STD)
    if active.size == 0:
        raise MetricError("every representation dimension has collapsed")
    usable = _usable_factors(factors)
    if len(usable) < 2:
        raise MetricError(f"need at least 2 non-constant factors, found {len(usable)}")
    normalized = reps[:, active] / stds[active]

    # rows grouped by (factor, value) so each vote can draw a fixed-factor batch
    groups: dict[tuple[int, int], np.ndarray] = {}
    for f in usable:
        col = factors.indices[:, f]
        for v in np.unique(col):
            groups[(f, int(v))] = np.flatnonzero(col == v)

    values_per_factor = {f: np.unique(factors.indices[:, f]) for f in usable}

    def vote() -> tuple[int, int]:
        f = usable[_randint(rng, len(usable))]
        vals = values_per_factor[f]
        v = int(vals[_randint(rng, vals.size)])
        pool = groups[(f, v)]
        idx = pool[[_randint(rng, pool.size) for _ in range(batch_size)]]
        variances = normalized[idx].var(axis=0)
        return f, int(np.argmin(variances))

    n_factors = factors.indices.shape[1]
    table = np.zeros((n_factors, active.size), dtype=np.int64)
    for _ in range(num_train_votes):
        f, dim = vote()
        table[f, dim] += 1
    classifier = np.argmax(table, axis=0)  # per-dimension predicted factor

    correct = 0
    for _ in range(num_eval_votes):
        f, dim = vote()
        correct += int(classifier[dim] == f)
    return correct / num_eval_votes


def _equal_count_bins(x: np.ndarray, num_bins: int) -> np.ndarray:
    """Rank-based binning: invariant under strictly monotone transforms."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty_like(order)
    ranks[order] = np.arange(x.size)
    return (ranks * num_bins) // x.size


def _histogram_mi(a: np.ndarray, b: np.ndarray, ka: int, kb: int) -> float:
    joint = np.zeros((ka, kb), dtype=np.float64)
    np.add.at(joint, (a, b), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def mig(reps: np.ndarray, factors: FactorTable, num_bins: int = DEFAULT_MIG_BINS) -> float:
    """Mean over factors of the normalized top-two mutual-information gap."""
    if num_bins < 2:
        raise MetricError(f"num_bins must be >= 2, got {num_bins}")
    reps = np.asarray(reps, dtype=np.float64)
    n, k = reps.shape
    binned = np.stack([_equal_count_bins(reps[:, j], num_bins) for j in range(k)], axis=1)

    gaps = []
    for f in range(factors.indices.shape[1]):
        col = factors.indices[:, f]
        values, codes = np.unique(col, return_inverse=True)
        if values.size < 2:
            warnings.warn(f"factor {factors.names[f]} has a single value; skipped")
            continue
        counts = np.bincount(codes).astype(np.float64)
        p = counts / counts.sum()
        entropy = float(-(p * np.log(p)).sum())
        mis = np.array([
            _histogram_mi(binned[:, j], codes, num_bins, values.size) for j in range(k)
        ])
        top = np.sort(mis)[::-1]
        second = top[1] if k > 1 else 0.0
        gaps.append((top[0] - second) / entropy)
    if not gaps:
        raise MetricError("no usable factors for the information gap")
    return float(np.clip(np.mean(gaps), 0.0, 1.0))


def conditional_metric(metric_fn, reps: np.ndarray, factors: FactorTable,
                       class_labels: np.ndarray,
                       min_examples: int = MIN_CLASS_EXAMPLES) -> tuple[float, dict[int, float]]:
    """Class-frequency-weighted metric over per-class subsets.

    Within each class, factor columns that the class holds constant are
    dropped before calling metric_fn(reps_subset, factor_subset).
    """
    labels = np.asarray(class_labels)
    n = labels.shape[0]
    per_class: dict[int, float] = {}
    total = 0.0
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        if rows.size < min_examples:
            raise MetricError(
                f"class {int(c)} has only {rows.size} examples (minimum {min_examples})"
            )
        sub = factors.indices[rows]
        live = [f for f in range(sub.shape[1]) if np.unique(sub[:, f]).size > 1]
        sub_table = FactorTable(
            sub[:, live],
            tuple(factors.cardinalities[f] for f in live),
            tuple(factors.names[f] for f in live),
        )
        score = float(metric_fn(reps[rows], sub_table))
        per_class[int(c)] = score
        total += (rows.size / n) * score
    return total, per_class


def unsupervised_accuracy(predicted_clusters: np.ndarray, true_labels: np.ndarray) -> float:
    """Accuracy after mapping each cluster to its most frequent true label."""
    pred = np.asarray(predicted_clusters)
    truth = np.asarray(true_labels)
    if pred.size == 0:
        raise MetricError("empty prediction array")
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    correct = 0
    for c in np.unique(pred):
        rows = np.flatnonzero(pred == c)
        counts = np.bincount(truth[rows])
        correct += int(counts.max())
    return correct / pred.size


# -- representation extraction ------------------------------------------

def extract_representations(model, images: np.ndarray, batch_size: int = 256) -> RepresentationDump:
    conts, alphas = [], []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = Tensor(np.ascontiguousarray(images[start : start + batch_size], dtype=np.float32))
            out = model.encode(x)
            conts.append(model.continuous_means(out))
            alphas.append(out.alpha.data.copy())
    return RepresentationDump(cont=np.concatenate(conts), alpha=np.concatenate(alphas))


# -- importance-weighted likelihood ---------------------------------------

def importance_nll(z_mu, z_logvar, loglik, K: int, rng: RandomSource,
                   num_classes: int, w_mu=None, w_logvar=None, prior_w_mu=None,
                   chunk: int = 64) -> np.ndarray:
    """Per-example negative log of the K-sample importance estimate.

    The discrete class is summed exactly; continuous latents are sampled
    from the supplied posteriors. loglik(z [B,Pb], w [B,Pr] or None, i)
    must return per-example log p(x | z, w, class=i) as float64.

        lw_k = logsumexp_i [ loglik_i + log p(z_k) + log p(w_ki | i)
                             - log d - log q(z_k) - log q(w_ki | i) ]
        nll  = -(logsumexp_k lw_k - log K)
    """
    z_mu = np.asarray(z_mu, dtype=np.float64)
    z_logvar = np.asarray(z_logvar, dtype=np.float64)
    b = z_mu.shape[0]
    has_w = w_mu is not None
    if has_w:
        w_mu = np.asarray(w_mu, dtype=np.float64)
        w_logvar = np.asarray(w_logvar, dtype=np.float64)
        prior_w_mu = np.asarray(prior_w_mu, dtype=np.float64)

    lws = np.empty((K, b), dtype=np.float64)
    z_std = np.exp(0.5 * z_logvar)
    for k0 in range(0, K, chunk):
        kc = min(chunk, K - k0)
        eps_z = rng.normal((kc, b, z_mu.shape[1]), dtype=np.float64)
        z = z_mu + z_std * eps_z  # [kc, B, Pb]
        log_qz = gaussian_log_density(z, z_mu, z_logvar)
        log_pz = gaussian_log_density(z, np.zeros_like(z_mu))
        if has_w:
            eps_w = rng.normal((kc, b, num_classes, w_mu.shape[-1]), dtype=np.float64)
            w = w_mu + np.exp(0.5 * w_logvar) * eps_w  # [kc, B, d, Pr]
            log_qw = gaussian_log_density(w, w_mu, w_logvar)          # [kc, B, d]
            log_pw = gaussian_log_density(w, prior_w_mu)              # [kc, B, d]
        per_class = np.empty((kc, b, num_classes), dtype=np.float64)
        for k in range(kc):
            for i in range(num_classes):
                wi = w[k, :, i] if has_w else None
                per_class[k, :, i] = loglik(z[k], wi, i)
        inner = per_class - np.log(num_classes)
        if has_w:
            inner = inner + log_pw - log_qw
        lw = _logsumexp(inner, axis=-1) + log_pz - log_qz
        lws[k0 : k0 + kc] = lw
    return -(_logsumexp(lws, axis=0) - np.log(K))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def iwae_nll(model, images: np.ndarray, K: int, rng: RandomSource,
             batch_size: int = 32, chunk: int = 16) -> float:
    """Mean per-example NLL of a model batch under the K-sample estimator."""
    c = model.config
    results = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            xb = np.ascontiguousarray(images[start : start + batch_size], dtype=np.float32)
            x = Tensor(xb)
            out = model.encode(x)
            flat = xb.reshape(xb.shape[0], -1).astype(np.float64)

            def loglik(z, w, i):
                sample = LatentSample(
                    z=Tensor(z.astype(np.float32)),
                    w=None if w is None else Tensor(w.astype(np.float32)),
                    discrete_repr=Tensor(one_hot(np.full(z.shape[0], i), c.num_classes)),
                    mode_index=np.full(z.shape[0], i),
                )
                logits = model.decode(sample).data.astype(np.float64)
                lf = logits.reshape(logits.shape[0], -1)
                # Bernoulli log-likelihood, stable in both logit tails
                return (flat * lf - np.maximum(lf, 0) - np.log1p(np.exp(-np.abs(lf)))).sum(axis=1)

            if c.variant == "joint":
                nll = importance_nll(
                    out.z_mu.data, out.z_logvar.data, loglik, K, rng, c.num_classes,
                    chunk=chunk,
                )
            else:
                nll = importance_nll(
                    out.z_mu.data, out.z_logvar.data, loglik, K, rng, c.num_classes,
                    w_mu=out.w_mu.data, w_logvar=out.w_logvar.data,
                    prior_w_mu=model.prior_mu, chunk=chunk,
                )
            results.append(nll)
    return float(np.concatenate(results).mean())

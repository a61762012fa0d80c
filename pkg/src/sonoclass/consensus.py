"""Dawid-Skene label aggregation over redundant noisy annotations.

EM alternates between estimating per-annotator confusion matrices plus class
priors (M step) and per-item true-label posteriors (E step).  Additive
smoothing on confusion counts acts as a Dirichlet prior, so the quantity the
solver drives uphill is the smoothed (MAP) objective: the observed-data
log-likelihood plus ``smoothing * sum(log pi)``.  The raw log-likelihood is
available separately via :func:`ds_log_likelihood`.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ConsensusError",
    "AnnotationSet",
    "DawidSkeneState",
    "ConsensusResult",
    "ds_initialize",
    "ds_m_step",
    "ds_e_step",
    "ds_log_likelihood",
    "ds_run",
    "agreement_rate",
    "DawidSkene",
    "read_annotations",
    "write_consensus",
    "write_diagnostics",
]


class ConsensusError(ValueError):
    """Raised for malformed annotation sets or aggregation misuse."""


@dataclass(frozen=True)
class AnnotationSet:
    """Sparse (item, annotator, label) records with 0-based class labels."""

    items: tuple[str, ...]
    annotators: tuple[str, ...]
    records: tuple[tuple[str, str, int], ...]
    n_classes: int

    def __post_init__(self):
        item_index = {it: i for i, it in enumerate(self.items)}
        ann_index = {a: i for i, a in enumerate(self.annotators)}
        if len(item_index) != len(self.items):
            raise ConsensusError("duplicate item ids")
        if len(ann_index) != len(self.annotators):
            raise ConsensusError("duplicate annotator ids")
        seen = set()
        votes_per_item = [0] * len(self.items)
        for item, annotator, label in self.records:
            if item not in item_index:
                raise ConsensusError(f"record references unknown item {item!r}")
            if annotator not in ann_index:
                raise ConsensusError(f"record references unknown annotator {annotator!r}")
            if not 0 <= label < self.n_classes:
                raise ConsensusError(
                    f"label {label} outside 0..{self.n_classes - 1} for item {item!r}"
                )
            key = (item, annotator)
            if key in seen:
                raise ConsensusError(f"duplicate record for {key}")
            seen.add(key)
            votes_per_item[item_index[item]] += 1
        for it, n in zip(self.items, votes_per_item):
            if n == 0:
                raise ConsensusError(f"item {it!r} has no annotation records")

    @classmethod
    def from_records(
        cls, records, n_classes: int | None = None
    ) -> "AnnotationSet":
        """Build from an iterable of (item, annotator, label) triples."""
        records = tuple((str(i), str(a), int(l)) for i, a, l in records)
        items, annotators = [], []
        seen_i, seen_a = set(), set()
        max_label = -1
        for item, annotator, label in records:
            if item not in seen_i:
                seen_i.add(item)
                items.append(item)
            if annotator not in seen_a:
                seen_a.add(annotator)
                annotators.append(annotator)
            max_label = max(max_label, label)
        if n_classes is None:
            n_classes = max_label + 1
        return cls(tuple(items), tuple(annotators), records, int(n_classes))

    def indexed(self):
        """(item_idx, annotator_idx, label) integer arrays for vector math."""
        item_index = {it: i for i, it in enumerate(self.items)}
        ann_index = {a: i for i, a in enumerate(self.annotators)}
        ii = np.array([item_index[r[0]] for r in self.records], dtype=np.int64)
        aa = np.array([ann_index[r[1]] for r in self.records], dtype=np.int64)
        ll = np.array([r[2] for r in self.records], dtype=np.int64)
        return ii, aa, ll


@dataclass
class DawidSkeneState:
    priors: np.ndarray  # (K,)
    confusions: dict[str, np.ndarray]  # annotator -> (K true, K said), row-stochastic
    posterior: np.ndarray  # (I, K), rows sum to 1
    log_likelihood: float  # smoothed EM objective at the final parameters
    objective_trace: list[float]
    raw_log_likelihood: float


@dataclass(frozen=True)
class ConsensusResult:
    labels: np.ndarray  # (I,) argmax posterior, ties to the lowest index
    confidence: np.ndarray  # (I,) max posterior
    iterations: int
    converged: bool


def ds_initialize(annotations: AnnotationSet) -> np.ndarray:
    """Majority-vote posterior: row i,k = votes for k on i / votes on i."""
    ii, _, ll = annotations.indexed()
    n_items = len(annotations.items)
    posterior = np.zeros((n_items, annotations.n_classes))
    np.add.at(posterior, (ii, ll), 1.0)
    totals = posterior.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise ConsensusError("an item has no annotation records")
    return posterior / totals


def ds_m_step(
    annotations: AnnotationSet, posterior: np.ndarray, smoothing: float
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Estimate class priors and per-annotator confusion matrices.

    ``pi_a[t, l]`` is proportional to ``smoothing`` plus the posterior-weighted
    count of annotator ``a`` saying ``l`` on items of true class ``t``; rows
    are renormalized to sum to 1.
    """
    if smoothing < 0:
        raise ConsensusError("smoothing must be nonnegative")
    ii, aa, ll = annotations.indexed()
    k = annotations.n_classes
    priors = posterior.sum(axis=0)
    priors = priors / priors.sum()

    confusions: dict[str, np.ndarray] = {}
    for a_idx, name in enumerate(annotations.annotators):
        mask = aa == a_idx
        if not np.any(mask):
            warnings.warn(f"annotator {name!r} has no records; excluded from M step")
            continue
        counts = np.full((k, k), float(smoothing))
        # counts[t, l] += T[i, t] for each record (i, a, l)
        np.add.at(counts.T, ll[mask], posterior[ii[mask]])
        rows = counts.sum(axis=1, keepdims=True)
        confusions[name] = counts / rows
    return priors, confusions


def _log_vote_matrix(
    annotations: AnnotationSet, confusions: dict[str, np.ndarray]
) -> np.ndarray:
    """Per item, sum over its records of log pi_a[:, said label]."""
    ii, aa, ll = annotations.indexed()
    k = annotations.n_classes
    n_items = len(annotations.items)
    log_pis = np.empty((len(annotations.annotators), k, k))
    present = np.zeros(len(annotations.annotators), dtype=bool)
    for a_idx, name in enumerate(annotations.annotators):
        if name in confusions:
            with np.errstate(divide="ignore"):
                log_pis[a_idx] = np.log(confusions[name])
            present[a_idx] = True
    out = np.zeros((n_items, k))
    use = present[aa]
    np.add.at(out, ii[use], log_pis[aa[use], :, ll[use]])
    return out


def ds_e_step(
    annotations: AnnotationSet,
    priors: np.ndarray,
    confusions: dict[str, np.ndarray],
) -> np.ndarray:
    """Posterior rows proportional to prior times the product of confusion
    entries for the observed votes, computed in log space."""
    with np.errstate(divide="ignore"):
        log_rows = np.log(priors)[None, :] + _log_vote_matrix(annotations, confusions)
    top = log_rows.max(axis=1, keepdims=True)
    dead = ~np.isfinite(top[:, 0])
    if np.any(dead):
        warnings.warn(
            f"{int(dead.sum())} item(s) had zero probability under every class; "
            "using uniform rows"
        )
        log_rows[dead] = 0.0
        top[dead] = 0.0
    unnorm = np.exp(log_rows - top)
    return unnorm / unnorm.sum(axis=1, keepdims=True)


def ds_log_likelihood(
    annotations: AnnotationSet,
    priors: np.ndarray,
    confusions: dict[str, np.ndarray],
) -> float:
    """Observed-data log-likelihood via per-item log-sum-exp.

    Returns ``-inf`` when some item is impossible under every class (only
    reachable with zero smoothing).
    """
    with np.errstate(divide="ignore"):
        log_rows = np.log(priors)[None, :] + _log_vote_matrix(annotations, confusions)
    top = log_rows.max(axis=1)
    safe = np.isfinite(top)
    if not np.all(safe):
        return float("-inf")
    return float((top + np.log(np.exp(log_rows - top[:, None]).sum(axis=1))).sum())


def _smoothed_objective(
    raw_ll: float, confusions: dict[str, np.ndarray], smoothing: float
) -> float:
    if smoothing == 0.0:
        return raw_ll
    with np.errstate(divide="ignore"):
        prior_term = sum(float(np.log(pi).sum()) for pi in confusions.values())
    return raw_ll + smoothing * prior_term


def ds_run(
    annotations: AnnotationSet,
    tol: float = 1e-6,
    max_iter: int = 100,
    smoothing: float = 0.01,
) -> tuple[ConsensusResult, DawidSkeneState]:
    """Alternate M and E steps from the majority-vote start until the EM
    objective moves less than ``tol`` or ``max_iter`` iterations pass.

    The tracked objective (log-likelihood plus the smoothing prior term) is
    nondecreasing across iterations up to floating-point slack.
    """
    if tol <= 0:
        raise ConsensusError("tol must be positive")
    if max_iter < 1:
        raise ConsensusError("max_iter must be >= 1")

    posterior = ds_initialize(annotations)
    trace: list[float] = []
    converged = False
    priors: np.ndarray | None = None
    confusions: dict[str, np.ndarray] = {}
    iterations = 0
    raw_ll = float("-inf")
    for iterations in range(1, max_iter + 1):
        priors, confusions = ds_m_step(annotations, posterior, smoothing)
        posterior = ds_e_step(annotations, priors, confusions)
        raw_ll = ds_log_likelihood(annotations, priors, confusions)
        objective = _smoothed_objective(raw_ll, confusions, smoothing)
        trace.append(objective)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break

    labels = np.argmax(posterior, axis=1)
    confidence = posterior[np.arange(len(posterior)), labels]
    result = ConsensusResult(labels, confidence, iterations, converged)
    state = DawidSkeneState(
        priors=priors,
        confusions=confusions,
        posterior=posterior,
        log_likelihood=trace[-1],
        objective_trace=trace,
        raw_log_likelihood=raw_ll,
    )
    return result, state


# ---------------------------------------------------------------------------
# Agreement statistics
# ---------------------------------------------------------------------------


def agreement_rate(a, b, method: str = "auto") -> float:
    """Agreement between two labelings or two positively-marked id sets.

    Label sequences: the fraction of equal labels.  Sets: either
    ``jaccard`` (|A & B| / |A | B|) or ``mean`` (|A & B| over the mean of
    |A| and |B|).  ``auto`` picks labels for sequences and jaccard for sets.
    """
    if isinstance(a, (set, frozenset)) or isinstance(b, (set, frozenset)):
        sa, sb = set(a), set(b)
        if method == "auto":
            method = "jaccard"
        inter = len(sa & sb)
        if method == "jaccard":
            union = len(sa | sb)
            if union == 0:
                raise ConsensusError("agreement over an empty union is undefined")
            return inter / union
        if method == "mean":
            mean_size = 0.5 * (len(sa) + len(sb))
            if mean_size == 0:
                raise ConsensusError("agreement over two empty sets is undefined")
            return inter / mean_size
        raise ConsensusError(f"unknown set agreement method {method!r}")
    if method not in ("auto", "labels"):
        raise ConsensusError(f"method {method!r} requires set inputs")
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise ConsensusError(f"label sequences differ in length: {len(a)} vs {len(b)}")
    if not a:
        raise ConsensusError("agreement over empty label sequences is undefined")
    return sum(int(x == y) for x, y in zip(a, b)) / len(a)


# ---------------------------------------------------------------------------
# sklearn-style estimator
# ---------------------------------------------------------------------------


class DawidSkene:
    """Estimator wrapper around :func:`ds_run`.

    Parameters mirror the functional API; ``fit`` takes an iterable of
    (item, annotator, label) triples or an :class:`AnnotationSet`.
    """

    def __init__(self, tol: float = 1e-6, max_iter: int = 100, smoothing: float = 0.01,
                 n_classes: int | None = None):
        self.tol = tol
        self.max_iter = max_iter
        self.smoothing = smoothing
        self.n_classes = n_classes

    def get_params(self, deep: bool = True) -> dict:
        return {
            "tol": self.tol,
            "max_iter": self.max_iter,
            "smoothing": self.smoothing,
            "n_classes": self.n_classes,
        }

    def set_params(self, **params) -> "DawidSkene":
        for key, value in params.items():
            if key not in self.get_params():
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, annotations) -> "DawidSkene":
        if not isinstance(annotations, AnnotationSet):
            annotations = AnnotationSet.from_records(annotations, self.n_classes)
        result, state = ds_run(
            annotations, tol=self.tol, max_iter=self.max_iter, smoothing=self.smoothing
        )
        self.annotations_ = annotations
        self.items_ = annotations.items
        self.labels_ = result.labels
        self.confidence_ = result.confidence
        self.posterior_ = state.posterior
        self.class_priors_ = state.priors
        self.confusion_matrices_ = state.confusions
        self.result_ = result
        self.state_ = state
        return self

    def fit_predict(self, annotations) -> np.ndarray:
        return self.fit(annotations).labels_


# ---------------------------------------------------------------------------
# CSV / JSON interfaces
# ---------------------------------------------------------------------------

ANNOTATION_HEADER = ["item_id", "annotator_id", "label"]


def read_annotations(path: str | Path, n_classes: int | None = None) -> AnnotationSet:
    """Read an ``item_id,annotator_id,label`` CSV."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConsensusError(f"cannot read annotations {path}: {exc}") from exc
    if not rows or rows[0] != ANNOTATION_HEADER:
        raise ConsensusError(
            f"annotation file {path} must start with header "
            f"{','.join(ANNOTATION_HEADER)!r}"
        )
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ConsensusError(f"{path} line {lineno}: expected 3 fields")
        try:
            records.append((row[0], row[1], int(row[2])))
        except ValueError as exc:
            raise ConsensusError(f"{path} line {lineno}: bad label {row[2]!r}") from exc
    return AnnotationSet.from_records(records, n_classes)


def write_consensus(
    annotations: AnnotationSet, result: ConsensusResult, path: str | Path
) -> None:
    """Write ``item_id,consensus_label,confidence`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "consensus_label", "confidence"])
        for item, label, conf in zip(annotations.items, result.labels, result.confidence):
            writer.writerow([item, int(label), repr(float(conf))])


def write_diagnostics(state: DawidSkeneState, path: str | Path) -> None:
    """Priors, per-annotator confusion matrices, and the objective trace."""
    payload = {
        "class_priors": state.priors.tolist(),
        "confusion_matrices": {
            name: matrix.tolist() for name, matrix in sorted(state.confusions.items())
        },
        "objective_trace": state.objective_trace,
        "log_likelihood": state.log_likelihood,
        "raw_log_likelihood": state.raw_log_likelihood,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

"""One-vs-all linear SVMs, average precision, and run-aware evaluation.

Each attribute gets an L1-loss linear SVM solved by dual coordinate descent.
The bias is handled as an extra constant feature, so it is regularized along
with the weights.  Features are L2-normalized before training and scoring.

Average precision is the mean of precision@k over the ranks k of the positive
examples after a stable descending sort of the scores: tied scores keep their
original (input) order.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .errors import DimensionError, FormatError, SingleRunError, UndefinedAPError
from .formats import BinaryReader, FeatureMatrix, atomic_write
from .rng import substream
from .simkit.tags import CANONICAL_ATTRIBUTES

log = logging.getLogger(__name__)

XSVM_MAGIC = b"XSVM"
XSVM_VERSION = 1

# full-scale reference mAP, printed next to desk-scale results for context only
REFERENCE_MAP = 0.671


# -- SVM ------------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _cd_pass(X, y, alpha, w, wb, qii, C, order):
    """One dual coordinate-descent sweep; returns updated bias and the PG range."""
    d = X.shape[1]
    pg_max = -np.inf
    pg_min = np.inf
    for t in range(order.shape[0]):
        i = order[t]
        xi = X[i]
        s = wb
        for j in range(d):
            s += w[j] * xi[j]
        g = y[i] * s - 1.0
        a = alpha[i]
        if a == 0.0:
            pg = min(g, 0.0)
        elif a == C:
            pg = max(g, 0.0)
        else:
            pg = g
        if pg > pg_max:
            pg_max = pg
        if pg < pg_min:
            pg_min = pg
        if pg != 0.0:
            na = min(max(a - g / qii[i], 0.0), C)
            delta = (na - a) * y[i]
            alpha[i] = na
            for j in range(d):
                w[j] += delta * xi[j]
            wb += delta
    return wb, pg_max, pg_min


def primal_objective(X, y, w, b, C) -> float:
    """``0.5 (|w|^2 + b^2) + C * sum(hinge)`` for the bias-augmented problem."""
    margins = 1.0 - y * (X @ w + b)
    return 0.5 * (float(w @ w) + b * b) + C * float(np.maximum(margins, 0.0).sum())


@dataclass
class BinarySvm:
    weights: np.ndarray
    bias: float
    C: float
    epochs: int = 0
    converged: bool = False
    primal_log: list = field(default_factory=list)
    raw_primal_log: list = field(default_factory=list)


def train_binary(X, y, C: float = 1.0, max_epochs: int = 200, tol: float = 0.1, seed: int = 0,
                 label: str = "") -> BinarySvm:
    """Dual coordinate descent for one binary problem on already-normalized rows.

    ``raw_primal_log`` is the primal objective after every full pass.  Dual
    coordinate descent does not make that sequence monotone by itself, so the
    returned weights are those of the best pass seen and ``primal_log`` holds
    the running minimum.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    wb = 0.0
    qii = np.einsum("ij,ij->i", X, X) + 1.0
    rng = substream(seed, "svm", label)
    best = (primal_objective(X, y, w, wb, C), w.copy(), wb)
    raw, pocket = [], []
    converged = False
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n).astype(np.int64)
        wb, pg_max, pg_min = _cd_pass(X, y, alpha, w, wb, qii, C, order)
        obj = primal_objective(X, y, w, wb, C)
        raw.append(obj)
        if obj <= best[0]:
            best = (obj, w.copy(), wb)
        pocket.append(best[0])
        if pg_max - pg_min < tol:
            converged = True
            break
    return BinarySvm(best[1], float(best[2]), float(C), epoch, converged, pocket, raw)


def l2_normalize(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms > 0, norms, 1.0)


@dataclass
class SvmModel:
    attributes: list
    weights: np.ndarray
    biases: np.ndarray
    C: np.ndarray
    normalize: bool = True
    skipped: dict = field(default_factory=dict)
    primal_logs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(len(self.attributes), -1)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        self.C = np.asarray(self.C, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite SVM weights")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, SvmModel)
            and self.attributes == other.attributes
            and self.normalize == other.normalize
            and self.skipped == other.skipped
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.biases, other.biases)
            and np.array_equal(self.C, other.C)
        )


def _label_matrix(labels, attributes) -> np.ndarray:
    if isinstance(labels, dict):
        return np.column_stack([np.asarray(labels[a], dtype=np.float64) for a in attributes])
    return np.asarray(labels, dtype=np.float64)


def train_ovr(features, labels, attributes=None, C: float = 1.0, max_epochs: int = 200, tol: float = 0.1,
              seed: int = 0, normalize: bool = True, workers: int = 1) -> SvmModel:
    """Train one scorer per attribute.

    ``labels`` is either a dict attribute -> ±1 vector or an (n, A) matrix
    with ``attributes`` naming its columns.  Attributes whose labels are all
    one class are skipped and listed in ``model.skipped`` with the reason.
    """
    if attributes is None:
        attributes = list(labels) if isinstance(labels, dict) else [str(i) for i in range(np.shape(labels)[1])]
    attributes = list(attributes)
    Y = _label_matrix(labels, attributes)
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(Y):
        raise DimensionError(f"{len(Y)} label rows for feature matrix of shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or infinite values")
    if normalize:
        X = l2_normalize(X)
    X = np.ascontiguousarray(X)

    trained, skipped = [], {}
    for k, name in enumerate(attributes):
        col = Y[:, k]
        if not np.all(np.isin(col, (-1.0, 1.0))):
            raise ValueError(f"labels for {name!r} must be +1/-1")
        pos = int((col > 0).sum())
        if pos == 0:
            skipped[name] = "no positive examples"
        elif pos == len(col):
            skipped[name] = "no negative examples"
        else:
            trained.append((k, name))

    def fit(item):
        k, name = item
        return train_binary(X, Y[:, k], C, max_epochs, tol, seed, name)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            fits = list(pool.map(fit, trained))
    else:
        fits = [fit(t) for t in trained]
    names = [name for _, name in trained]
    d = X.shape[1]
    return SvmModel(
        attributes=names,
        weights=np.array([f.weights for f in fits]).reshape(len(fits), d),
        biases=np.array([f.bias for f in fits]),
        C=np.array([f.C for f in fits]),
        normalize=normalize,
        skipped=skipped,
        primal_logs={n: f.primal_log for n, f in zip(names, fits)},
    )


def scores(model: SvmModel, features) -> dict:
    """Decision values ``w.x + b`` per trained attribute."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != model.dim:
        raise DimensionError(f"features have dimension {X.shape[1]}, model expects {model.dim}")
    if model.normalize:
        X = l2_normalize(X)
    S = X @ model.weights.T + model.biases
    return {a: S[:, k] for k, a in enumerate(model.attributes)}


# -- AP and PR curves -----------------------------------------------------------------


def _ranked(scores_, labels):
    s = np.asarray(scores_, dtype=np.float64)
    lab = np.asarray(labels)
    if s.shape != lab.shape or s.ndim != 1:
        raise DimensionError("scores and labels must be 1-D and the same length")
    pos = lab > 0
    if not pos.any():
        raise UndefinedAPError("average precision is undefined without positive examples")
    order = np.argsort(-s, kind="stable")
    return s[order], pos[order]


def average_precision(scores_, labels) -> float:
    """Mean of precision@k over positive ranks; ties keep input order."""
    _, hits = _ranked(scores_, labels)
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float(np.mean(tp[hits] / ranks[hits]))


@dataclass
class PRCurve:
    attribute: str
    thresholds: np.ndarray
    recall: np.ndarray
    precision: np.ndarray

    def points(self):
        return list(zip(self.recall.tolist(), self.precision.tolist()))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "recall", "precision"])
            for t, r, p in zip(self.thresholds, self.recall, self.precision):
                w.writerow([repr(float(t)), repr(float(r)), repr(float(p))])


def pr_curve(scores_, labels, attribute: str = "") -> PRCurve:
    """One point per distinct score, predicting positive when ``score >= threshold``."""
    s, hits = _ranked(scores_, labels)
    tp = np.cumsum(hits)
    last = np.r_[s[1:] != s[:-1], True]
    tp_at = tp[last]
    n_at = np.flatnonzero(last) + 1
    return PRCurve(attribute, s[last], tp_at / hits.sum(), tp_at / n_at)


# -- folds and filtering --------------------------------------------------------------


def _entry_fields(e):
    if isinstance(e, dict):
        return str(e["id"]), int(e["run_id"]), list(e["attributes"])
    return e.id, e.run_id, list(e.attributes)


def loro_folds(manifest) -> list[tuple[list, list]]:
    """Leave-one-run-out: one (train ids, test ids) pair per distinct run, by run id."""
    by_run: dict[int, list] = {}
    rows = [_entry_fields(e) for e in manifest]
    for i, r, _ in rows:
        by_run.setdefault(r, []).append(i)
    if len(by_run) < 2:
        raise SingleRunError(f"leave-one-run-out needs at least 2 runs, found {len(by_run)}")
    folds = []
    for r in sorted(by_run):
        test = set(by_run[r])
        folds.append(([i for i, _, _ in rows if i not in test], list(by_run[r])))
    return folds


def random_split(manifest, ratio: float = 0.8, seed: int = 0) -> list[tuple[list, list]]:
    """A single shuffled train/test split with ``round(ratio * n)`` training ids."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    ids = [_entry_fields(e)[0] for e in manifest]
    perm = substream(seed, "split").permutation(len(ids))
    cut = int(round(ratio * len(ids)))
    return [([ids[i] for i in sorted(perm[:cut])], [ids[i] for i in sorted(perm[cut:])])]


@dataclass
class FilterReport:
    kept: list
    dropped: dict


def filter_single_run_attributes(manifest, attributes=CANONICAL_ATTRIBUTES) -> FilterReport:
    """Drop attributes whose positive images all come from one run."""
    runs: dict[str, set] = {a: set() for a in attributes}
    for _, r, attrs in (_entry_fields(e) for e in manifest):
        for a in attrs:
            if a in runs:
                runs[a].add(r)
    dropped = {a: next(iter(rs)) for a, rs in runs.items() if len(rs) == 1}
    return FilterReport([a for a in attributes if a not in dropped], dropped)


# -- evaluation -----------------------------------------------------------------------


@dataclass
class EvalReport:
    protocol: str
    attributes: list
    folds: list
    fold_ap: dict
    attribute_ap: dict
    mAP: float
    excluded: dict
    prevalence_baseline: float
    attribute_prevalence: dict
    train_ap: dict
    C: float
    reference_mAP: float = REFERENCE_MAP

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path):
        atomic_write(path, (json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n").encode("utf-8"))

    @classmethod
    def read(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def labels_from_manifest(manifest, attributes=CANONICAL_ATTRIBUTES) -> tuple[list, np.ndarray]:
    rows = [_entry_fields(e) for e in manifest]
    col = {a: k for k, a in enumerate(attributes)}
    Y = -np.ones((len(rows), len(attributes)))
    for n, (_, _, attrs) in enumerate(rows):
        for a in attrs:
            if a in col:
                Y[n, col[a]] = 1.0
    return [r[0] for r in rows], Y


def evaluate(manifest, features: FeatureMatrix, protocol: str = "loro", ratio: float = 0.8, seed: int = 0,
             filter_single_run: bool = False, C: float = 1.0, attributes=CANONICAL_ATTRIBUTES,
             max_epochs: int = 200, tol: float = 0.1, workers: int = 1) -> EvalReport:
    """Train per fold, score the held-out ids, and aggregate AP per attribute.

    A fold contributes an AP term for an attribute only when the attribute was
    trainable on the fold's training ids and has at least one test positive.
    The prevalence baseline is the mAP expected from a random ranking: the
    mean over included attributes of their mean test-set prevalence.
    """
    manifest = list(manifest)
    attributes = list(attributes)
    excluded: dict[str, str] = {}
    if filter_single_run:
        rep = filter_single_run_attributes(manifest, attributes)
        for a, r in rep.dropped.items():
            excluded[a] = f"all positives in run {r}"
        attributes = rep.kept
    ids, Y = labels_from_manifest(manifest, attributes)
    row = {i: n for n, i in enumerate(ids)}
    X = features.rows(ids)

    if protocol == "loro":
        folds = loro_folds(manifest)
    elif protocol == "random":
        folds = random_split(manifest, ratio, seed)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")

    fold_ap: dict[str, list] = {a: [] for a in attributes}
    fold_prev: dict[str, list] = {a: [] for a in attributes}
    train_ap: dict[str, list] = {a: [] for a in attributes}
    fold_meta = []
    for f, (tr, te) in enumerate(folds):
        tri = np.array([row[i] for i in tr])
        tei = np.array([row[i] for i in te])
        model = train_ovr(X[tri], Y[tri], attributes, C, max_epochs, tol, seed, workers=workers)
        s_test = scores(model, X[tei])
        s_train = scores(model, X[tri])
        fold_meta.append({"fold": f, "train": len(tr), "test": len(te), "test_ids": list(te),
                          "skipped": dict(model.skipped)})
        for k, a in enumerate(attributes):
            yt = Y[tei, k]
            if a not in s_test or not (yt > 0).any():
                fold_ap[a].append(None)
                continue
            fold_ap[a].append(average_precision(s_test[a], yt))
            fold_prev[a].append(float((yt > 0).mean()))
            train_ap[a].append(average_precision(s_train[a], Y[tri, k]))

    attribute_ap, prevalence, tr_ap = {}, {}, {}
    for a in attributes:
        vals = [v for v in fold_ap[a] if v is not None]
        if not vals:
            excluded[a] = "no fold with both a trained scorer and a test positive"
            continue
        attribute_ap[a] = float(np.mean(vals))
        prevalence[a] = float(np.mean(fold_prev[a]))
        tr_ap[a] = float(np.mean(train_ap[a]))
    m = float(np.mean(list(attribute_ap.values()))) if attribute_ap else float("nan")
    base = float(np.mean(list(prevalence.values()))) if prevalence else float("nan")
    return EvalReport(
        protocol=protocol if protocol == "loro" else f"random({ratio},{seed})",
        attributes=attributes,
        folds=fold_meta,
        fold_ap=fold_ap,
        attribute_ap=attribute_ap,
        mAP=m,
        excluded=excluded,
        prevalence_baseline=base,
        attribute_prevalence=prevalence,
        train_ap=tr_ap,
        C=float(C),
    )


def select_c(features, labels, attributes=None, grid=(0.1, 1.0, 10.0), folds: int = 3, seed: int = 0) -> float:
    """Pick C from ``grid`` by mean AP over a seeded k-fold split of the rows."""
    X = np.asarray(features, dtype=np.float64)
    Y = _label_matrix(labels, attributes or list(labels)) if isinstance(labels, dict) else np.asarray(labels)
    perm = substream(seed, "select-c").permutation(len(X))
    parts = np.array_split(perm, folds)
    best_c, best = grid[0], -np.inf
    for c in grid:
        aps = []
        for p in parts:
            mask = np.ones(len(X), bool)
            mask[p] = False
            model = train_ovr(X[mask], Y[mask], None, c, seed=seed)
            sc = scores(model, X[p])
            for k, name in enumerate(model.attributes):
                col = Y[p, int(name)]
                if (col > 0).any():
                    aps.append(average_precision(sc[name], col))
        mean = float(np.mean(aps)) if aps else -np.inf
        if mean > best:
            best_c, best = c, mean
    return best_c


# -- XSVM -------------------------------------------------------------------------------
# b"XSVM" | u8 version | u8 normalize | u32 n_attr, dim, n_skipped
# | per attribute: u16 len, utf-8 name, f64 C, f64 bias
# | per skipped: u16 len, name, u16 len, reason | f64 weights (n_attr x dim)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def write_svm(path, model: SvmModel):
    parts = [XSVM_MAGIC, struct.pack("<BBIII", XSVM_VERSION, int(model.normalize), len(model.attributes),
                                     model.dim, len(model.skipped))]
    for a, c, b in zip(model.attributes, model.C, model.biases):
        parts.append(_pack_str(a) + struct.pack("<dd", c, b))
    for a in sorted(model.skipped):
        parts.append(_pack_str(a) + _pack_str(model.skipped[a]))
    parts.append(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
    atomic_write(path, b"".join(parts))


def read_svm(path) -> SvmModel:
    with open(path, "rb") as fh:
        r = BinaryReader(fh.read(), path)
    r.magic(XSVM_MAGIC)
    r.version(XSVM_VERSION)
    normalize, n_attr, dim, n_skipped = r.unpack("BIII")

    def string():
        n = r.unpack("H")
        raw = bytes(r.array("u1", n))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("attribute name is not UTF-8", r.pos - n, path) from None

    names, cs, bs = [], [], []
    for _ in range(n_attr):
        names.append(string())
        c, b = r.unpack("dd")
        cs.append(c)
        bs.append(b)
    skipped = {}
    for _ in range(n_skipped):
        a = string()
        skipped[a] = string()
    w = r.array("<f8", n_attr * dim).reshape(n_attr, dim)
    r.end()
    return SvmModel(names, w, np.array(bs), np.array(cs), bool(normalize), skipped)

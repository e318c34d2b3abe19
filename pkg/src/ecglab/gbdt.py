"""Second-order gradient boosting of depth-1 trees under logistic loss.

Each round fits one stump to the current gradients and hessians, routing
absent (NaN) feature values to whichever side gives the larger gain. A
split at ``threshold`` sends ``x < threshold`` left and ``x >= threshold``
right.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    CorruptModel,
    DegenerateLabels,
    FeatureCountMismatch,
    NoValidSplit,
    SchemaVersionMismatch,
)
from .evaluation import auroc

SCHEMA_VERSION = 1
MAGIC = "ecglab-stump-ensemble"


@dataclass(frozen=True)
class TrainConfig:
    num_rounds: int = 200
    learning_rate: float = 0.1
    lambda_l2: float = 1.0
    min_child_hessian: float = 1.0
    early_stopping_rounds: Optional[int] = 20
    max_bins: int = 256
    seed: int = 0
    exact: bool = False

    def __post_init__(self):
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be positive")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.lambda_l2 < 0 or self.min_child_hessian < 0:
            raise ValueError("lambda_l2 and min_child_hessian must be non-negative")
        if self.early_stopping_rounds is not None and self.early_stopping_rounds < 1:
            raise ValueError("early_stopping_rounds must be positive or None")
        if self.max_bins < 2:
            raise ValueError("max_bins must be at least 2")

    def digest(self):
        """Short sha256 over every field, recorded in trained models."""
        canonical = json.dumps(asdict(self), sort_keys=True)
        return "sha256:" + hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Stump:
    feature_index: int
    threshold: float
    missing_goes_left: bool
    left_value: float
    right_value: float
    gain: float = field(default=math.nan, compare=False)

    def leaf_values(self, X):
        """Routed leaf value for every row of ``X`` (2-D, NaN = absent)."""
        col = X[:, self.feature_index]
        go_left = np.where(np.isnan(col), self.missing_goes_left, col < self.threshold)
        return np.where(go_left, self.left_value, self.right_value)


@dataclass(frozen=True)
class StumpEnsemble:
    base_score: float
    learning_rate: float
    stumps: tuple
    feature_names: tuple
    training_config_digest: str = ""
    history: Optional[list] = field(default=None, compare=False, repr=False)

    @property
    def n_features(self):
        return len(self.feature_names)

    def _as_matrix(self, X):
        if _has_none(X):
            X = [_fill(row) if isinstance(row, (list, tuple)) else _fill([row])[0] for row in X]
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise FeatureCountMismatch(
                f"expected {self.n_features} features, got shape {X.shape}"
            )
        return X, single

    def leaf_sum(self, X):
        """Unshrunk sum of routed leaf values, accumulated in stump order."""
        X, single = self._as_matrix(X)
        total = np.zeros(X.shape[0])
        for stump in self.stumps:
            total += stump.leaf_values(X)
        return total[0] if single else total

    def predict_margin(self, X):
        return self.base_score + self.learning_rate * self.leaf_sum(X)

    def predict_proba(self, X):
        return _sigmoid(self.predict_margin(X))

    def truncated(self, n_stumps):
        return StumpEnsemble(
            self.base_score,
            self.learning_rate,
            self.stumps[:n_stumps],
            self.feature_names,
            self.training_config_digest,
            self.history,
        )


def _fill(row):
    return [math.nan if v is None else v for v in row]


def _has_none(X):
    if isinstance(X, np.ndarray):
        return False
    for row in X:
        if row is None:
            return True
        if isinstance(row, (list, tuple)):
            if any(v is None for v in row):
                return True
    return False


def _sigmoid(margin):
    # two-branch form avoids overflow in exp
    margin = np.asarray(margin, dtype=np.float64)
    out = np.empty_like(margin)
    pos = margin >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-margin[pos]))
    e = np.exp(margin[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def logistic_grad_hess(margin, label):
    """Gradient and hessian of the logistic loss with respect to the margin.

    Works elementwise on scalars or arrays: ``p = sigmoid(margin)``,
    gradient ``p - label``, hessian ``p * (1 - p)``. Both are formed from
    ``sigmoid(margin)`` and ``sigmoid(-margin)`` so neither loses relative
    precision when ``p`` is close to 0 or 1.
    """
    margin = np.asarray(margin, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    p = _sigmoid(margin)
    q = _sigmoid(-margin)
    grad = (1.0 - label) * p - label * q
    hess = p * q
    if grad.ndim == 0:
        return float(grad), float(hess)
    return grad, hess


def logistic_loss(margin, label):
    """Mean negative log-likelihood, computed stably via logaddexp."""
    margin = np.asarray(margin, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, margin) - label * margin))


# -- split finding -------------------------------------------------------------

def _midpoints(values):
    lo, hi = values[:-1], values[1:]
    mids = lo + (hi - lo) / 2.0
    # adjacent floats: the midpoint may round down onto lo
    return np.where(mids > lo, mids, hi)


def candidate_thresholds(column, max_bins=256, exact=False):
    """Split thresholds for one feature column (NaN ignored).

    Exact mode returns the midpoint between every pair of consecutive
    distinct values. Histogram mode returns the same set when there are at
    most ``max_bins`` distinct values, otherwise ``max_bins - 1`` midpoints
    placed at quantiles of the data.
    """
    present = column[~np.isnan(column)]
    distinct = np.unique(present)
    if distinct.size < 2:
        return np.empty(0)
    mids = _midpoints(distinct)
    if exact or distinct.size <= max_bins:
        return mids
    probs = np.arange(1, max_bins) / max_bins
    qvals = np.quantile(present, probs, method="lower")
    idx = np.searchsorted(distinct, qvals, side="left")
    idx = np.unique(np.clip(idx, 0, mids.size - 1))
    return mids[idx]


class BinnedMatrix:
    """Per-feature thresholds and bin indices, computed once per training set.

    Bin ``b`` of a present value is the number of thresholds ``<= x``, so
    ``x < thresholds[k]`` exactly when ``b <= k``. Absent values get bin -1.
    """

    def __init__(self, X, max_bins=256, exact=False):
        X = np.asarray(X, dtype=np.float64)
        self.n_rows, self.n_features = X.shape
        self.thresholds = []
        self.bins = []
        self.missing = []
        for j in range(self.n_features):
            col = X[:, j]
            thr = candidate_thresholds(col, max_bins, exact)
            miss = np.isnan(col)
            b = np.searchsorted(thr, np.where(miss, -np.inf, col), side="right")
            b[miss] = -1
            self.thresholds.append(thr)
            self.bins.append(b)
            self.missing.append(miss)


def _split_gain(GL, HL, GR, HR, parent, lam):
    return GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent


def best_split(binned, grad, hess, lambda_l2=1.0, min_child_hessian=1.0):
    """Highest-gain stump over all (feature, threshold, missing side) candidates.

    Candidates are visited in tie-break order (feature index, threshold,
    missing-left before missing-right) and only a strictly larger gain
    replaces the incumbent. Raises ``NoValidSplit`` when no candidate meets
    ``min_child_hessian`` on both children or the best gain is not positive.
    """
    grad = np.asarray(grad, dtype=np.float64)
    hess = np.asarray(hess, dtype=np.float64)
    G, H = grad.sum(), hess.sum()
    parent = G * G / (H + lambda_l2)
    best, best_gain = None, -math.inf
    for j in range(binned.n_features):
        thr = binned.thresholds[j]
        k = thr.size
        if k == 0:
            continue
        b = binned.bins[j]
        miss = binned.missing[j]
        present = ~miss
        g_hist = np.bincount(b[present], weights=grad[present], minlength=k + 1)
        h_hist = np.bincount(b[present], weights=hess[present], minlength=k + 1)
        g_miss = grad[miss].sum()
        h_miss = hess[miss].sum()
        GL = np.cumsum(g_hist)[:k]
        HL = np.cumsum(h_hist)[:k]
        GR = np.cumsum(g_hist[::-1])[::-1][1:]
        HR = np.cumsum(h_hist[::-1])[::-1][1:]
        # column 0: missing left, column 1: missing right
        gl = np.stack([GL + g_miss, GL], axis=1)
        hl = np.stack([HL + h_miss, HL], axis=1)
        gr = np.stack([GR, GR + g_miss], axis=1)
        hr = np.stack([HR, HR + h_miss], axis=1)
        gains = _split_gain(gl, hl, gr, hr, parent, lambda_l2)
        valid = (hl >= min_child_hessian) & (hr >= min_child_hessian)
        gains = np.where(valid, gains, -np.inf).ravel()
        pos = int(np.argmax(gains))
        if gains[pos] > best_gain:
            best_gain = float(gains[pos])
            t, side = divmod(pos, 2)
            best = Stump(
                feature_index=j,
                threshold=float(thr[t]),
                missing_goes_left=side == 0,
                left_value=float(-gl[t, side] / (hl[t, side] + lambda_l2)),
                right_value=float(-gr[t, side] / (hr[t, side] + lambda_l2)),
                gain=best_gain,
            )
    if best is None or not best_gain > 0:
        raise NoValidSplit("no candidate split with positive gain")
    return best


def fit_stump(X, grad, hess, config=None):
    """Fit one stump to gradients/hessians; see :func:`best_split`."""
    config = config or TrainConfig()
    binned = BinnedMatrix(X, config.max_bins, config.exact)
    return best_split(binned, grad, hess, config.lambda_l2, config.min_child_hessian)


# -- training ----------------------------------------------------------------

def _arrays(data):
    if hasattr(data, "X") and hasattr(data, "y"):
        return np.asarray(data.X, dtype=np.float64), np.asarray(data.y, dtype=np.float64)
    X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)


def train(train_data, validation_data, config=None, feature_names=None):
    """Boost stumps on ``train_data`` with early stopping on validation AUROC.

    Parameters
    ----------
    train_data, validation_data : TaskDataset or (X, y)
        Both folds must contain both classes.
    config : TrainConfig, optional
    feature_names : sequence of str, optional
        Defaults to the dataset's names, else ``f0, f1, ...``.

    Returns
    -------
    StumpEnsemble
        Truncated to the round with the best validation AUROC. Per-round
        train log-loss and validation AUROC are kept in ``history``.
    """
    config = config or TrainConfig()
    X, y = _arrays(train_data)
    Xv, yv = _arrays(validation_data)
    for name, labels in (("train", y), ("validation", yv)):
        if labels.size == 0 or labels.min() == labels.max():
            raise DegenerateLabels(f"{name} fold has a single class")
    if feature_names is None:
        feature_names = getattr(train_data, "feature_names", None)
    if feature_names is None:
        feature_names = [f"f{j}" for j in range(X.shape[1])]
    feature_names = tuple(feature_names)
    if len(feature_names) != X.shape[1] or Xv.shape[1] != X.shape[1]:
        raise FeatureCountMismatch("feature counts differ between folds or names")

    prevalence = y.mean()
    base = math.log(prevalence / (1.0 - prevalence))
    lr = config.learning_rate
    binned = BinnedMatrix(X, config.max_bins, config.exact)

    train_sum = np.zeros(X.shape[0])
    val_sum = np.zeros(Xv.shape[0])
    stumps = []
    history = []
    best_auc, best_round = -math.inf, 0
    for rnd in range(1, config.num_rounds + 1):
        grad, hess = logistic_grad_hess(base + lr * train_sum, y)
        try:
            stump = best_split(binned, grad, hess, config.lambda_l2, config.min_child_hessian)
        except NoValidSplit:
            break
        stumps.append(stump)
        train_sum += stump.leaf_values(X)
        val_sum += stump.leaf_values(Xv)
        val_auc = auroc(val_sum, yv)
        history.append({
            "round": rnd,
            "train_logloss": logistic_loss(base + lr * train_sum, y),
            "val_auroc": val_auc,
        })
        if val_auc > best_auc:
            best_auc, best_round = val_auc, rnd
        elif config.early_stopping_rounds and rnd - best_round >= config.early_stopping_rounds:
            break

    return StumpEnsemble(
        base_score=base,
        learning_rate=lr,
        stumps=tuple(stumps[:best_round]),
        feature_names=feature_names,
        training_config_digest=config.digest(),
        history=history,
    )


def predict_margin(model, X):
    return model.predict_margin(X)


def predict_proba(model, X):
    return model.predict_proba(X)


# -- persistence -------------------------------------------------------------

def dumps_model(model):
    lines = [
        MAGIC,
        f"schema_version {SCHEMA_VERSION}",
        "feature_names " + json.dumps(list(model.feature_names)),
        f"base_score {float(model.base_score).hex()}",
        f"learning_rate {float(model.learning_rate).hex()}",
        f"training_config_digest {model.training_config_digest}",
        f"n_stumps {len(model.stumps)}",
    ]
    for s in model.stumps:
        lines.append(" ".join([
            str(s.feature_index),
            float(s.threshold).hex(),
            "L" if s.missing_goes_left else "R",
            float(s.left_value).hex(),
            float(s.right_value).hex(),
            float(s.gain).hex(),
        ]))
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads_model(text):
    lines = text.split("\n")
    if not lines or lines[0] != MAGIC:
        raise CorruptModel("missing model header")
    try:
        header = dict(line.split(" ", 1) for line in lines[1:7])
        version = int(header["schema_version"])
    except (ValueError, KeyError) as exc:
        raise CorruptModel(f"unreadable header: {exc}") from None
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"model schema {version}, expected {SCHEMA_VERSION}")
    try:
        names = tuple(json.loads(header["feature_names"]))
        base = float.fromhex(header["base_score"])
        lr = float.fromhex(header["learning_rate"])
        digest = header["training_config_digest"]
        n = int(header["n_stumps"])
        body = lines[7:7 + n]
        stumps = []
        for line in body:
            f, thr, side, lv, rv, gain = line.split(" ")
            if side not in ("L", "R"):
                raise ValueError(f"bad missing side {side!r}")
            stumps.append(Stump(
                int(f), float.fromhex(thr), side == "L",
                float.fromhex(lv), float.fromhex(rv), float.fromhex(gain),
            ))
        if len(stumps) != n or lines[7 + n:] != ["end", ""]:
            raise ValueError("stump count or trailer mismatch")
        if any(not 0 <= s.feature_index < len(names) for s in stumps):
            raise ValueError("feature index out of range")
    except (ValueError, KeyError, IndexError) as exc:
        raise CorruptModel(f"malformed model body: {exc}") from None
    return StumpEnsemble(base, lr, tuple(stumps), names, digest)


def save_model(model, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_model(model))


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())

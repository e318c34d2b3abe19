"""Exact interventional Shapley values for stump ensembles.

A stump depends on one feature only, so its Shapley attribution goes
entirely to that feature: ``learning_rate * (leaf(x) - mean leaf over
background)``. Summing over stumps gives exact attributions on the
margin (log-odds) scale.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBackground, InsufficientData

DEFAULT_BACKGROUND_N = 1024


@dataclass(frozen=True)
class Attribution:
    record_id: str
    base_value: float
    contributions: np.ndarray
    margin: float


@dataclass(frozen=True)
class GlobalImportance:
    feature_names: tuple
    values: np.ndarray

    @property
    def ranking(self):
        order = sorted(range(len(self.values)), key=lambda j: (-self.values[j], j))
        return [self.feature_names[j] for j in order]

    def as_rows(self):
        return [(name, float(self.values[self.feature_names.index(name)])) for name in self.ranking]


@dataclass(frozen=True)
class QuartileSummary:
    quartile: int
    low: float
    high: float
    n: int
    mean_value: float
    mean_contribution: float


def _matrix(data):
    X = data.X if hasattr(data, "X") else data
    return np.atleast_2d(np.asarray(X, dtype=np.float64))


def sample_background(dataset, n=DEFAULT_BACKGROUND_N, seed=0):
    """Up to ``n`` rows drawn without replacement, kept in dataset order."""
    X = _matrix(dataset)
    if X.shape[0] <= n:
        return X
    rng = np.random.default_rng(seed)
    return X[np.sort(rng.choice(X.shape[0], n, replace=False))]


def background_means(model, background):
    B = _matrix(background)
    if B.shape[0] == 0:
        raise EmptyBackground("background dataset is empty")
    return np.array([s.leaf_values(B).mean() for s in model.stumps])


def shap_matrix(model, X, background):
    """Attributions for every row of ``X``.

    Returns
    -------
    contributions : ndarray, shape (n_rows, n_features)
    base_value : float
        Mean margin over the background.
    """
    X = _matrix(X)
    means = background_means(model, background)
    lr = model.learning_rate
    contrib = np.zeros((X.shape[0], model.n_features))
    for stump, mean in zip(model.stumps, means):
        contrib[:, stump.feature_index] += lr * (stump.leaf_values(X) - mean)
    base_value = model.base_score + lr * float(means.sum())
    return contrib, base_value


def shap_values(model, row, background, record_id=""):
    """Attribution of one feature row against ``background``."""
    contrib, base_value = shap_matrix(model, row, background)
    return Attribution(record_id, base_value, contrib[0], float(model.predict_margin(_matrix(row))[0]))


def explain_dataset(model, dataset, background):
    """One :class:`Attribution` per example of ``dataset``."""
    contrib, base_value = shap_matrix(model, dataset, background)
    margins = model.predict_margin(dataset.X)
    return [
        Attribution(ex.record_id, base_value, contrib[i], float(margins[i]))
        for i, ex in enumerate(dataset)
    ]


def global_importance(model, dataset, background=None):
    """Mean absolute attribution per feature over ``dataset``."""
    X = _matrix(dataset)
    if X.shape[0] == 0:
        raise InsufficientData("dataset is empty")
    if background is None:
        background = sample_background(X)
    contrib, _ = shap_matrix(model, X, background)
    return GlobalImportance(tuple(model.feature_names), np.abs(contrib).mean(axis=0))


def directionality_report(model, dataset, feature, background=None, min_rows=10):
    """Mean attribution of ``feature`` within quartiles of its observed values.

    Rows where the feature is absent are excluded. Tied quartile edges
    merge bins, so a constant feature yields a single bin.
    """
    idx = feature if isinstance(feature, int) else list(model.feature_names).index(feature)
    X = _matrix(dataset)
    present = ~np.isnan(X[:, idx])
    if present.sum() < min_rows:
        raise InsufficientData(f"feature {feature!r} present in {int(present.sum())} rows")
    if background is None:
        background = sample_background(X)
    contrib, _ = shap_matrix(model, X[present], background)
    values = X[present, idx]
    c = contrib[:, idx]
    edges = np.unique(np.quantile(values, [0.25, 0.5, 0.75]))
    bins = np.searchsorted(edges, values, side="right")
    summary = []
    for q, b in enumerate(np.unique(bins)):
        m = bins == b
        summary.append(QuartileSummary(
            quartile=q + 1,
            low=float(values[m].min()),
            high=float(values[m].max()),
            n=int(m.sum()),
            mean_value=float(values[m].mean()),
            mean_contribution=float(c[m].mean()),
        ))
    return summary

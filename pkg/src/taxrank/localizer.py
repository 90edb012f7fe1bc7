"""CART failure localizer.

A binary classification tree grown by greedy Gini-impurity splits over
taxpayer features. Label 1 means the candidate failed a relation on that
profile. The fitted tree is read back as root-to-leaf condition conjunctions
that describe where the failures concentrate.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ValidationError
from .policy import FilingStatus

FEATURES = ("income", "status", "age65", "blind", "children", "investment_income")
STATUS_COLUMN = 1
BINARY_COLUMNS = (2, 3)


def profiles_to_features(profiles) -> np.ndarray:
    return np.array(
        [[p.income, int(p.status), float(p.age_65_or_older), float(p.blind), p.qualifying_children,
          p.investment_income] for p in profiles],
        dtype=float,
    ).reshape(-1, len(FEATURES))


def gini(n_fail: int, n: int) -> float:
    if n == 0:
        return 0.0
    p = n_fail / n
    return 2.0 * p * (1.0 - p)


@dataclass
class Node:
    n_samples: int
    n_fail: int
    depth: int
    feature: int | None = None
    threshold: float | None = None
    categories: frozenset | None = None  # left branch for the status feature
    left: "Node | None" = None
    right: "Node | None" = None
    gain: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def gini(self) -> float:
        return gini(self.n_fail, self.n_samples)

    @property
    def fail_rate(self) -> float:
        return self.n_fail / self.n_samples if self.n_samples else 0.0

    @property
    def label(self) -> int:
        return int(2 * self.n_fail > self.n_samples)

    def goes_left(self, row) -> bool:
        if self.categories is not None:
            return int(row[self.feature]) in self.categories
        return row[self.feature] <= self.threshold

    def to_dict(self) -> dict:
        d = {"n_samples": self.n_samples, "n_fail": self.n_fail, "gini": round(self.gini, 6)}
        if self.is_leaf:
            d["label"] = "fail" if self.label else "pass"
            return d
        d["feature"] = FEATURES[self.feature]
        if self.categories is not None:
            d["categories"] = [FilingStatus(c).label for c in sorted(self.categories)]
        else:
            d["threshold"] = self.threshold
        d["gain"] = round(self.gain, 6)
        d["left"] = self.left.to_dict()
        d["right"] = self.right.to_dict()
        return d


@dataclass(frozen=True)
class Condition:
    feature: int
    op: str  # "<=", ">", "in"
    value: object

    def mask(self, X: np.ndarray) -> np.ndarray:
        col = X[:, self.feature]
        if self.op == "in":
            return np.isin(col.astype(int), sorted(self.value))
        if self.op == "<=":
            return col <= self.value
        return col > self.value

    def render(self) -> str:
        name = FEATURES[self.feature]
        if self.op == "in":
            labels = ", ".join(FilingStatus(c).label for c in sorted(self.value))
            return f"{name} ∈ {{{labels}}}"
        if self.feature in BINARY_COLUMNS and self.value == 0.5:
            return f"{name} = {0 if self.op == '<=' else 1}"
        return f"{name} {'≤' if self.op == '<=' else '>'} {_fmt_threshold(self.value)}"


def _fmt_threshold(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".") if not float(x).is_integer() else str(int(x))


def _best_numeric_split(x, y, min_leaf):
    """(gain, threshold) of the best midpoint split on one numeric column, or None."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)
    fails = np.cumsum(ys)
    total_fail = fails[-1]
    # candidate cut after position i (left = [0..i])
    idx = np.nonzero(xs[:-1] < xs[1:])[0]
    idx = idx[(idx + 1 >= min_leaf) & (n - idx - 1 >= min_leaf)]
    if idx.size == 0:
        return None
    n_left = idx + 1
    f_left = fails[idx]
    n_right = n - n_left
    f_right = total_fail - f_left
    p_l = f_left / n_left
    p_r = f_right / n_right
    child = (n_left * 2 * p_l * (1 - p_l) + n_right * 2 * p_r * (1 - p_r)) / n
    best = int(np.argmin(child))  # first minimum = lowest threshold
    threshold = (xs[idx[best]] + xs[idx[best] + 1]) / 2.0
    return gini(int(total_fail), n) - float(child[best]), float(threshold)


def _status_subsets(present: Sequence[int]):
    """Every bipartition of the present codes, as the side without the smallest code."""
    present = sorted(present)
    rest = present[1:]
    for size in range(1, len(rest) + 1):
        for combo in itertools.combinations(rest, size):
            yield frozenset(combo)


def _best_status_split(x, y, min_leaf):
    codes = x.astype(int)
    present = sorted(set(codes.tolist()))
    if len(present) < 2:
        return None
    n = len(codes)
    total_fail = int(y.sum())
    best = None
    for subset in _status_subsets(present):
        left = np.isin(codes, sorted(subset))
        n_l = int(left.sum())
        n_r = n - n_l
        if n_l < min_leaf or n_r < min_leaf:
            continue
        f_l = int(y[left].sum())
        child = (n_l * gini(f_l, n_l) + n_r * gini(total_fail - f_l, n_r)) / n
        gain = gini(total_fail, n) - child
        if best is None or gain > best[0] + 1e-12:
            best = (gain, subset)
    return best


class FailureTreeClassifier(ClassifierMixin, BaseEstimator):
    """Gini CART over taxpayer feature vectors (see ``FEATURES``).

    Parameters
    ----------
    max_depth : int, default=4
    min_samples_leaf : int, default=20
    min_gini_gain : float, default=0.01
        Splits must reduce weighted Gini impurity by at least this much.

    The filing-status column is split on subset-vs-complement; every other
    column on midpoints between sorted distinct values. Ties go to the earlier
    feature, then to the lower threshold.
    """

    def __init__(self, max_depth=4, min_samples_leaf=20, min_gini_gain=0.01):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.min_gini_gain = min_gini_gain

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if X.shape[1] != len(FEATURES):
            raise ValidationError(f"expected {len(FEATURES)} feature columns, got {X.shape[1]}")
        y = np.asarray(y).astype(int)
        if not set(np.unique(y)) <= {0, 1}:
            raise ValidationError("labels must be 0 (pass) or 1 (fail)")
        if len(y) < 2 * self.min_samples_leaf:
            raise ValidationError(f"need at least {2 * self.min_samples_leaf} samples, got {len(y)}")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.tree_ = self._grow(X, y, depth=0)
        return self

    def _grow(self, X, y, depth):
        node = Node(n_samples=len(y), n_fail=int(y.sum()), depth=depth)
        if depth >= self.max_depth or node.n_fail in (0, node.n_samples):
            return node
        if node.n_samples < 2 * self.min_samples_leaf:
            return node
        best = None  # (gain, feature, threshold, categories)
        for f in range(X.shape[1]):
            if f == STATUS_COLUMN:
                found = _best_status_split(X[:, f], y, self.min_samples_leaf)
                cand = None if found is None else (found[0], f, None, found[1])
            else:
                found = _best_numeric_split(X[:, f], y, self.min_samples_leaf)
                cand = None if found is None else (found[0], f, found[1], None)
            if cand is not None and (best is None or cand[0] > best[0] + 1e-12):
                best = cand
        if best is None or best[0] < self.min_gini_gain or best[0] <= 0:
            return node
        gain, f, threshold, categories = best
        if categories is not None:
            mask = np.isin(X[:, f].astype(int), sorted(categories))
        else:
            mask = X[:, f] <= threshold
        node.feature, node.threshold, node.categories, node.gain = f, threshold, categories, float(gain)
        node.left = self._grow(X[mask], y[mask], depth + 1)
        node.right = self._grow(X[~mask], y[~mask], depth + 1)
        return node

    def _leaf(self, row) -> Node:
        node = self.tree_
        while not node.is_leaf:
            node = node.left if node.goes_left(row) else node.right
        return node

    def predict_proba(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=float)
        p = np.array([self._leaf(row).fail_rate for row in X])
        return np.column_stack([1 - p, p])

    def predict(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=float)
        return np.array([self._leaf(row).label for row in X])

    def depth(self) -> int:
        check_is_fitted(self, "tree_")

        def walk(n):
            return 0 if n.is_leaf else 1 + max(walk(n.left), walk(n.right))

        return walk(self.tree_)

    def leaves(self):
        """(conditions, leaf) for every leaf, left to right."""
        check_is_fitted(self, "tree_")
        out = []

        def walk(node, conds):
            if node.is_leaf:
                out.append((tuple(conds), node))
                return
            lc, rc = self._split_conditions(node)
            walk(node.left, [*conds, lc])
            walk(node.right, [*conds, rc])

        walk(self.tree_, [])
        return out

    def export_text(self) -> str:
        """Indented text rendering of the fitted tree."""
        check_is_fitted(self, "tree_")
        lines = []

        def walk(node, indent, prefix):
            stats = f"n={node.n_samples} fail={node.n_fail} gini={node.gini:.3f}"
            if node.is_leaf:
                lines.append(f"{indent}{prefix}leaf: {'fail' if node.label else 'pass'} ({stats})")
                return
            lines.append(f"{indent}{prefix}split ({stats}, gain={node.gain:.3f})")
            for cond, child in zip(self._split_conditions(node), (node.left, node.right)):
                lines.append(f"{indent}  if {cond.render()}:")
                walk(child, indent + "    ", "")

        walk(self.tree_, "", "")
        return "\n".join(lines) + "\n"

    @staticmethod
    def _split_conditions(node):
        f = node.feature
        if node.categories is not None:
            complement = frozenset(int(s) for s in FilingStatus) - node.categories
            return Condition(f, "in", node.categories), Condition(f, "in", complement)
        return Condition(f, "<=", node.threshold), Condition(f, ">", node.threshold)

    def to_dict(self) -> dict:
        check_is_fitted(self, "tree_")
        return {"params": self.get_params(), "features": list(FEATURES), "root": self.tree_.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"


def fit_cart(labeled, max_depth: int = 4, min_samples_leaf: int = 20, min_gini_gain: float = 0.01) -> FailureTreeClassifier:
    """Fit on ``(profile, passed)`` pairs (extra tuple fields are ignored)."""
    labeled = list(labeled)
    X = profiles_to_features([item[0] for item in labeled])
    y = np.array([0 if item[1] else 1 for item in labeled], dtype=int)
    return FailureTreeClassifier(max_depth, min_samples_leaf, min_gini_gain).fit(X, y)


@dataclass(frozen=True)
class FailurePath:
    conditions: tuple
    n_samples: int
    n_fail: int

    @property
    def fail_rate(self) -> float:
        return self.n_fail / self.n_samples if self.n_samples else 0.0

    @property
    def condition(self) -> str:
        return " ∧ ".join(c.render() for c in self.conditions) or "always"

    def mask(self, X: np.ndarray) -> np.ndarray:
        m = np.ones(len(X), dtype=bool)
        for c in self.conditions:
            m &= c.mask(X)
        return m

    def to_dict(self) -> dict:
        return {"condition": self.condition, "n_samples": self.n_samples, "fail_rate": round(self.fail_rate, 6)}


def explain_paths(tree: FailureTreeClassifier, min_fail_rate: float = 0.8) -> list[FailurePath]:
    """Leaves whose failure rate reaches ``min_fail_rate``, largest first."""
    paths = [FailurePath(conds, leaf.n_samples, leaf.n_fail)
             for conds, leaf in tree.leaves() if leaf.n_fail > 0 and leaf.fail_rate >= min_fail_rate]
    return sorted(paths, key=lambda p: -p.n_samples)

"""Sparse-regression baseline: candidate library + sequential threshold ridge.

Recovers per-state dynamics by regressing estimated derivatives onto a
library of monomials (optionally trig and state-input cross terms) and
iteratively hard-thresholding small coefficients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .dynamics import Coefficients, SpecError, SystemSpec
from .signals import Trace


@dataclass(frozen=True)
class FunctionLibrary:
    poly_degree: int = 2
    include_trig: bool = False
    include_control: bool = True

    def __post_init__(self):
        if self.poly_degree < 1:
            raise SpecError("library degree must be >= 1")


def _monomial_exponents(n_states: int, degree: int):
    """All exponent tuples with total degree 0..degree, graded lexicographic:
    1, x1, x2, ..., x1^2, x1 x2, ..."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_states), total):
            e = [0] * n_states
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


def _monomial_label(expo, prefix="x"):
    if not any(expo):
        return "1"
    parts = []
    for i, e in enumerate(expo):
        if e == 1:
            parts.append(f"{prefix}{i+1}")
        elif e > 1:
            parts.append(f"{prefix}{i+1}^{e}")
    return "*".join(parts)


def library_labels(lib: FunctionLibrary, n_states: int, n_inputs: int) -> list[str]:
    labels = [_monomial_label(e) for e in _monomial_exponents(n_states, lib.poly_degree)]
    if lib.include_trig:
        for i in range(n_states):
            labels += [f"sin(x{i+1})", f"cos(x{i+1})"]
    if lib.include_control:
        base = list(labels)
        for j in range(n_inputs):
            for lbl in base:
                labels.append(f"u{j+1}" if lbl == "1" else f"{lbl}*u{j+1}")
    return labels


def build_library(lib: FunctionLibrary, y_rows: np.ndarray, u_rows: np.ndarray | None = None):
    """Design matrix (samples x columns) over state and input samples.

    ``y_rows`` is (n_states, k); ``u_rows`` is (n_inputs, k) or None.
    Column order matches :func:`library_labels`.
    """
    y = np.atleast_2d(np.asarray(y_rows, dtype=float))
    n_states, k = y.shape
    if u_rows is None:
        u = np.zeros((0, k))
    else:
        u = np.atleast_2d(np.asarray(u_rows, dtype=float))
        if u.shape[1] != k:
            raise SpecError("state and input sample counts differ")
    cols = []
    for expo in _monomial_exponents(n_states, lib.poly_degree):
        col = np.ones(k)
        for i, e in enumerate(expo):
            if e:
                col = col * y[i] ** e
        cols.append(col)
    if lib.include_trig:
        for i in range(n_states):
            cols.append(np.sin(y[i]))
            cols.append(np.cos(y[i]))
    if lib.include_control:
        base = list(cols)
        for j in range(u.shape[0]):
            for col in base:
                cols.append(col * u[j])
    return np.column_stack(cols)


def estimate_derivatives(tr: Trace) -> np.ndarray:
    """Per-channel time derivatives: central differences inside, one-sided
    (second order) at the ends."""
    if tr.k < 3:
        raise SpecError("need k >= 3 samples to estimate derivatives")
    return np.gradient(tr.y, tr.dt, axis=1, edge_order=2)


def stridge(
    A: np.ndarray,
    b: np.ndarray,
    lam: float,
    threshold: float,
    iters: int = 10,
) -> np.ndarray:
    """Sequential threshold ridge regression.

    Columns are normalized to unit RMS before solving and the result is
    de-normalized afterward, so the hard threshold acts on each term's
    RMS contribution to the target rather than on raw coefficients whose
    size depends on column units or sample count.  The surviving-column
    set only ever shrinks; pruned slots return as exact zeros.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if A.ndim != 2 or A.shape[1] < 1:
        raise SpecError("design matrix must have at least one column")
    if A.shape[0] != b.shape[0]:
        raise SpecError("design matrix and target lengths differ")
    if iters < 1:
        raise SpecError("iters must be >= 1")

    norms = np.linalg.norm(A, axis=0) / np.sqrt(A.shape[0])
    norms[norms == 0] = 1.0
    An = A / norms

    def ridge(cols):
        M = An[:, cols]
        gram = M.T @ M + lam * np.eye(len(cols))
        try:
            return np.linalg.solve(gram, M.T @ b)
        except np.linalg.LinAlgError:
            raise SpecError("singular restricted system in stridge") from None

    d = A.shape[1]
    active = list(range(d))
    w = np.zeros(d)
    w[active] = ridge(active)
    for _ in range(iters):
        keep = [c for c in active if abs(w[c]) >= threshold]
        if len(keep) == len(active):
            break
        if not keep:
            w[active] = 0.0
            active = keep
            break
        w[[c for c in active if c not in keep]] = 0.0
        active = keep
        w[active] = ridge(active)
    return w / norms


@dataclass(frozen=True)
class SparseModel:
    """Sparse per-state coefficients over library columns."""

    xi: np.ndarray  # columns x n_states
    labels: tuple[str, ...]
    threshold: float

    def support(self, state: int) -> tuple[str, ...]:
        return tuple(l for l, v in zip(self.labels, self.xi[:, state]) if v != 0.0)


def sindyc_recover(
    tr: Trace,
    lib: FunctionLibrary,
    lam: float = 1e-6,
    threshold: float = 0.1,
    iters: int = 10,
) -> SparseModel:
    """Fit sparse dynamics to a full-state trace.

    The trace must expose every state variable; this baseline has no
    notion of hidden states.
    """
    labels = tuple(library_labels(lib, tr.y.shape[0], tr.m))
    A = build_library(lib, tr.y, tr.u if tr.m else None)
    dots = estimate_derivatives(tr)
    xi = np.column_stack([stridge(A, dots[i], lam, threshold, iters) for i in range(tr.y.shape[0])])
    return SparseModel(xi=xi, labels=labels, threshold=threshold)


def _term_label(term, n_states: int) -> str:
    expo = [0] * n_states
    for fac in term.factors:
        if fac.func != "identity" or fac.power < 0:
            return ""  # trig terms handled separately; unmapped here
        expo[fac.var] += fac.power
    lbl = _monomial_label(tuple(expo))
    if term.input is not None:
        lbl = f"u{term.input+1}" if lbl == "1" else f"{lbl}*u{term.input+1}"
    return lbl


def map_to_coefficients(
    model: SparseModel, spec: SystemSpec
) -> tuple[np.ndarray, list[tuple[str, int, float]]]:
    """Translate library coefficients onto a system's named coefficients.

    For every spec term whose monomial is a library column, the implied
    coefficient estimate is ``xi[col, state] / weight``; estimates from
    multiple terms of one coefficient are averaged.  Returns the estimate
    vector plus the list of spurious nonzero library entries (label,
    state, value) that match no spec term; those count against the model
    as terms whose true value is zero.
    """
    label_to_col = {l: i for i, l in enumerate(model.labels)}
    estimates: dict[str, list[float]] = {name: [] for name in spec.coeff_names}
    claimed = set()
    for term in list(spec.f_terms) + list(spec.g_terms):
        lbl = _term_label(term, spec.n)
        col = label_to_col.get(lbl)
        if col is None:
            continue
        claimed.add((col, term.state))
        if term.coeff is not None:
            estimates[term.coeff].append(model.xi[col, term.state] / term.weight)
    theta = np.array(
        [np.mean(estimates[name]) if estimates[name] else 0.0 for name in spec.coeff_names]
    )
    spurious = [
        (model.labels[col], state, float(model.xi[col, state]))
        for col in range(model.xi.shape[0])
        for state in range(model.xi.shape[1])
        if model.xi[col, state] != 0.0 and (col, state) not in claimed
    ]
    return theta, spurious


def rmse_with_spurious(
    theta_est: np.ndarray, theta_true: Coefficients, spurious: list[tuple[str, int, float]]
) -> float:
    """Coefficient RMSE where spurious recovered terms count as errors
    against a true value of zero."""
    diffs = np.asarray(theta_est, dtype=float) - theta_true.values
    sq = list(diffs**2) + [v**2 for (_, _, v) in spurious]
    return float(np.sqrt(np.mean(sq)))

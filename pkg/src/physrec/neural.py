"""Recurrent recovery architectures with an ODE-solver reconstruction loss.

A recurrent cell (liquid-time-constant, CT-RNN or plain neural-ODE style)
reads each (observed + input)-channel window; a dense head maps the final
hidden state to coefficient estimates and per-channel input-shift
fractions; the loss reconstructs the observed trace by integrating the
candidate model from the window's first observation and penalizes the
mean-square mismatch.  Network weights are differentiated on the tape;
sensitivities through the solver are obtained by central finite
differences over the (coefficients, shifts) head outputs and spliced in
as a custom tape node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import Coefficients, SensingMask, SpecError, SystemSpec
from .odesolve import SolverConfig, integrate_batch
from .signals import BatchSet, Trace, shift_signed
from .tape import Tape, Var

ARCHS = ("ltc", "ctrnn", "node")

DIVERGED_LOSS = 1e6


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# cells


@dataclass
class LtcCell:
    """Liquid-time-constant unit: hdot = -h/tau + f(h, I)(target - h).

    ``f`` is a softplus-wrapped tanh of an affine map, which keeps it
    positive as the input-dependent-time-constant reading requires.
    """

    w_in: np.ndarray  # V x C
    w_rec: np.ndarray  # V x V
    b: np.ndarray  # V
    tau: np.ndarray  # V, positive
    target: np.ndarray  # V

    def __post_init__(self):
        if np.any(self.tau <= 0):
            raise SpecError("time constants must be positive")

    @property
    def width(self):
        return self.w_rec.shape[0]


@dataclass
class CtRnnCell:
    w_in: np.ndarray
    w_rec: np.ndarray
    b: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        if np.any(self.tau <= 0):
            raise SpecError("time constants must be positive")

    @property
    def width(self):
        return self.w_rec.shape[0]


@dataclass
class NodeCell:
    w_in: np.ndarray
    w_rec: np.ndarray
    b: np.ndarray

    @property
    def width(self):
        return self.w_rec.shape[0]


def _softplus(z):
    return np.logaddexp(0.0, z)


def fused_ltc_update(h, f, target, tau, delta):
    """One fused semi-implicit step of the liquid-time-constant dynamics."""
    return (h + delta * f * target) / (1.0 + delta * (1.0 / tau + f))


def ltc_step(cell: LtcCell, h, inp, dt: float, substeps: int = 1):
    """Advance the hidden state by ``dt`` holding the input constant."""
    if substeps < 1:
        raise SpecError("substeps must be >= 1")
    h = np.asarray(h, dtype=float)
    delta = dt / substeps
    for _ in range(substeps):
        f = _softplus(np.tanh(cell.w_in @ inp + cell.w_rec @ h + cell.b))
        h = fused_ltc_update(h, f, cell.target, cell.tau, delta)
    if not np.all(np.isfinite(h)):
        raise TrainingError("hidden state diverged in ltc_step")
    return h


def ctrnn_step(cell: CtRnnCell, h, inp, dt: float, substeps: int = 1):
    if substeps < 1:
        raise SpecError("substeps must be >= 1")
    h = np.asarray(h, dtype=float)
    delta = dt / substeps
    for _ in range(substeps):
        f = np.tanh(cell.w_in @ inp + cell.w_rec @ h + cell.b)
        h = h + delta * (-h / cell.tau + f)
    if not np.all(np.isfinite(h)):
        raise TrainingError("hidden state diverged in ctrnn_step")
    return h


def node_step(cell: NodeCell, h, inp, dt: float, substeps: int = 1):
    if substeps < 1:
        raise SpecError("substeps must be >= 1")
    h = np.asarray(h, dtype=float)
    delta = dt / substeps
    for _ in range(substeps):
        f = np.tanh(cell.w_in @ inp + cell.w_rec @ h + cell.b)
        h = h + delta * f
    if not np.all(np.isfinite(h)):
        raise TrainingError("hidden state diverged in node_step")
    return h


# ---------------------------------------------------------------------------
# dense head


@dataclass
class DenseHead:
    """ReLU MLP producing coefficient estimates and shift fractions.

    Coefficient outputs follow ``mode``: "relu_signed" emits a ReLU
    magnitude times the declared coefficient sign (free coefficients pass
    through linearly); "linear" passes raw values for every coefficient.
    Each output is then multiplied by its characteristic scale (see
    :func:`coefficient_scales`), which preconditions the search so the
    network always works with O(1) quantities.  Shift outputs go through
    a sigmoid, so each lands in (0, 1).
    """

    weights: list[np.ndarray]  # per layer, fan_out x fan_in
    biases: list[np.ndarray]
    n_coeff: int
    n_shift: int
    dropout_rate: float = 0.2
    mode: str = "relu_signed"
    coeff_scales: np.ndarray | None = None

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise SpecError("dropout rate must be in [0, 1)")
        if self.mode not in ("relu_signed", "linear"):
            raise SpecError(f"unknown coefficient output mode {self.mode!r}")
        if self.weights[-1].shape[0] != self.n_coeff + self.n_shift:
            raise SpecError("head output width must equal n_coeff + n_shift")

    def scales(self) -> np.ndarray:
        if self.coeff_scales is None:
            return np.ones(self.n_coeff)
        return self.coeff_scales


def coefficient_scales(spec: SystemSpec, windows: list[Trace]) -> np.ndarray:
    """Characteristic magnitude of every coefficient, from declared resting
    levels and the input channels' RMS.

    A term ``w * c * prod(x_v^p) * u_j`` on equation i has characteristic
    coefficient size ``sigma_i / (prod sigma_v^p * sigma_u_j)``; where a
    coefficient appears in several terms the geometric mean is used.
    Bounded trig factors count as unit scale.  This is the usual
    column-normalization idea carried over to the term library.
    """
    sigma_x = np.maximum(1.0, np.abs(spec.resting_state()))
    m = spec.m
    if m and windows:
        rms = np.sqrt(np.mean(np.stack([w.u**2 for w in windows]), axis=(0, 2)))
        sigma_u = np.maximum(1.0, rms)
    else:
        sigma_u = np.ones(m)
    per_coeff: dict[str, list[float]] = {name: [] for name in spec.coeff_names}
    for term in (*spec.f_terms, *spec.g_terms):
        if term.coeff is None:
            continue
        s = sigma_x[term.state]
        for fac in term.factors:
            if fac.func == "identity":
                s /= sigma_x[fac.var] ** fac.power
        if term.input is not None:
            s /= sigma_u[term.input]
        per_coeff[term.coeff].append(s)
    return np.array(
        [float(np.exp(np.mean(np.log(per_coeff[name])))) for name in spec.coeff_names]
    )


def _sign_split(spec: SystemSpec, mode: str):
    """(signed, free): per-coefficient multipliers for the two head paths."""
    signs = spec.sign_vector()
    if mode == "linear":
        return np.zeros_like(signs), np.ones_like(signs)
    free = (signs == 0.0).astype(float)
    return signs, free


def head_forward(
    head: DenseHead,
    h_final: np.ndarray,
    spec: SystemSpec,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Numpy head evaluation: returns (coeff estimates, shift fractions).

    ``h_final`` may be a vector (one element) or V x B matrix.
    """
    single = h_final.ndim == 1
    act = h_final[:, None] if single else h_final
    for w, b in zip(head.weights[:-1], head.biases[:-1]):
        act = np.maximum(w @ act + b[:, None], 0.0)
        if training and head.dropout_rate > 0:
            if rng is None:
                raise SpecError("training-mode dropout needs an rng")
            keep = rng.random(act.shape) >= head.dropout_rate
            act = act * keep / (1.0 - head.dropout_rate)
    out = head.weights[-1] @ act + head.biases[-1][:, None]
    raw = out[: head.n_coeff]
    d = 1.0 / (1.0 + np.exp(-out[head.n_coeff :]))
    signed, free = _sign_split(spec, head.mode)
    coeffs = np.maximum(raw, 0.0) * signed[:, None] + raw * free[:, None]
    coeffs = coeffs * head.scales()[:, None]
    if single:
        return coeffs[:, 0], d[:, 0]
    return coeffs, d


# ---------------------------------------------------------------------------
# training configuration


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    unfold_substeps: int = 6
    solve_substeps: int = 6
    s_max: float = 25.0
    signed_shift: bool = False
    shift_channels: tuple[int, ...] = ()
    explicit_loss: bool = False
    seed: int = 0
    hidden_width: int = 32
    head_layers: tuple[int, ...] = (64,)
    dropout: float = 0.2
    coeff_mode: str = "relu_signed"
    fd_eps: float = 1e-4
    grad_clip: float = 1e3
    weight_grad_clip: float = 10.0
    head_init_scale: float = 0.05
    coeff_bias_init: float = 0.3
    warmup_epochs: int = 20

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise SpecError("invalid training configuration")
        if self.unfold_substeps < 1 or self.solve_substeps < 1:
            raise SpecError("substeps must be >= 1")
        if self.s_max < 0:
            raise SpecError("s_max must be >= 0")

    @property
    def n_shift(self) -> int:
        return len(self.shift_channels)

    def shift_samples(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if self.signed_shift:
            return (2.0 * d - 1.0) * self.s_max
        return d * self.s_max


# ---------------------------------------------------------------------------
# reconstruction loss


def _window_mask(spec: SystemSpec, trace: Trace) -> SensingMask:
    meta_mask = trace.meta.get("mask")
    if meta_mask is not None:
        return SensingMask(tuple(int(v) for v in meta_mask))
    if trace.y.shape[0] == spec.n:
        return SensingMask((1,) * spec.n)
    raise SpecError(
        "window does not declare a sensing mask and is not full-state; "
        "set trace.meta['mask']"
    )


def _initial_state(spec: SystemSpec, trace: Trace, mask: SensingMask) -> np.ndarray:
    x0 = spec.resting_state()
    x0[list(mask.observed)] = trace.y[:, 0]
    return x0


def _shift_inputs(u: np.ndarray, shifts: np.ndarray, channels) -> np.ndarray:
    out = u.copy()
    k = u.shape[1]
    for s, ch in zip(shifts, channels):
        s = float(np.clip(s, -(k - 1), k - 1))
        out[ch] = shift_signed(u[ch], s)
    return out


def reconstruction_losses(
    spec: SystemSpec,
    coeff_rows: np.ndarray,
    d_rows: np.ndarray,
    windows: list[Trace],
    cfg: TrainConfig,
    want_grads: bool = True,
):
    """Losses (and FD gradients) for a batch of per-window candidates.

    ``coeff_rows`` is (B, p) and ``d_rows`` is (B, q).  All windows must
    share their grid and sensing mask.  Returns ``(losses, g_coeff, g_d)``
    with gradient arrays zero when ``want_grads`` is false or a variant
    diverged.
    """
    B = len(windows)
    p, q = spec.p, cfg.n_shift
    mask = _window_mask(spec, windows[0])
    if cfg.explicit_loss and mask.n_observed != spec.n:
        raise SpecError("explicit loss mode needs full-state windows")
    k = windows[0].k
    dt = windows[0].dt
    obs = list(mask.observed)

    nvar = 1 + (2 * p + 2 * q if want_grads else 0)
    S = B * nvar
    coeff_all = np.repeat(coeff_rows, nvar, axis=0)
    x0_all = np.empty((S, spec.n))
    u_all = np.empty((S, spec.m, k))
    eps_c = cfg.fd_eps * np.maximum(1.0, np.abs(coeff_rows))
    eps_d = np.full((B, q), cfg.fd_eps)

    for b, w in enumerate(windows):
        base = b * nvar
        x0_all[base : base + nvar] = _initial_state(spec, w, mask)
        shifts = cfg.shift_samples(d_rows[b]) if q else np.zeros(0)
        u_shifted = _shift_inputs(w.u, shifts, cfg.shift_channels) if q else w.u
        u_all[base : base + nvar] = u_shifted
        if want_grads:
            for j in range(p):
                coeff_all[base + 1 + 2 * j, j] += eps_c[b, j]
                coeff_all[base + 2 + 2 * j, j] -= eps_c[b, j]
            for i in range(q):
                for sgn, off in ((+1, base + 1 + 2 * p + 2 * i), (-1, base + 2 + 2 * p + 2 * i)):
                    d_bump = d_rows[b].copy()
                    d_bump[i] += sgn * eps_d[b, i]
                    u_all[off] = _shift_inputs(w.u, cfg.shift_samples(d_bump), cfg.shift_channels)

    states, diverged, _ = integrate_batch(
        spec,
        coeff_all,
        x0_all,
        u_all,
        k,
        dt,
        SolverConfig(method="rk4", substeps=cfg.solve_substeps),
    )

    est = states[:, obs, 1:].reshape(B, nvar, len(obs), k - 1)
    target = np.stack([w.y[:, 1:] for w in windows])[:, None, :, :]
    with np.errstate(all="ignore"):
        losses = np.mean((est - target) ** 2, axis=(2, 3))
    losses = np.where(
        diverged.reshape(B, nvar) | ~np.isfinite(losses), DIVERGED_LOSS, losses
    )

    base_loss = losses[:, 0]
    g_coeff = np.zeros((B, p))
    g_d = np.zeros((B, q))
    if want_grads:
        ok = base_loss < DIVERGED_LOSS
        for j in range(p):
            lp, lm = losses[:, 1 + 2 * j], losses[:, 2 + 2 * j]
            good = ok & (lp < DIVERGED_LOSS) & (lm < DIVERGED_LOSS)
            g_coeff[:, j] = np.where(good, (lp - lm) / (2 * eps_c[:, j]), 0.0)
        for i in range(q):
            lp, lm = losses[:, 1 + 2 * p + 2 * i], losses[:, 2 + 2 * p + 2 * i]
            good = ok & (lp < DIVERGED_LOSS) & (lm < DIVERGED_LOSS)
            g_d[:, i] = np.where(good, (lp - lm) / (2 * eps_d[:, i]), 0.0)
        if cfg.grad_clip > 0:
            # near-divergent candidates produce astronomic slopes that
            # would poison the optimizer's second moments; keep the
            # direction, cap the magnitude
            norms = np.sqrt(np.sum(g_coeff**2, axis=1) + np.sum(g_d**2, axis=1))
            factor = np.minimum(1.0, cfg.grad_clip / np.maximum(norms, 1e-30))
            g_coeff *= factor[:, None]
            g_d *= factor[:, None]
    return base_loss, g_coeff, g_d


def ode_loss(
    spec: SystemSpec,
    coeff_est: np.ndarray,
    d: np.ndarray,
    trace: Trace,
    cfg: TrainConfig,
):
    """Reconstruction loss for one window plus its gradient callback.

    Returns ``(loss, vjp)`` where ``vjp(cotangent)`` yields the cotangents
    for (coefficient estimates, shift fractions), ready for splicing into
    a tape via ``custom_node``.
    """
    coeff_est = np.asarray(coeff_est, dtype=float)
    d = np.asarray(d, dtype=float).reshape(-1)
    if not np.all(np.isfinite(coeff_est)):
        raise SpecError("coefficient estimates must be finite")
    losses, g_c, g_d = reconstruction_losses(
        spec, coeff_est[None, :], d[None, :], [trace], cfg, want_grads=True
    )

    def vjp(cot):
        return [cot * g_c[0], cot * g_d[0]]

    return float(losses[0]), vjp


# ---------------------------------------------------------------------------
# parameter initialization and the tape forward pass


def resting_consistent_init(
    spec: SystemSpec,
    windows: list[Trace],
    scales: np.ndarray,
    prior: float = 0.3,
    lam: float = 0.1,
) -> np.ndarray:
    """Initial scaled coefficient estimates that keep the resting state
    stationary under the average input.

    Solves a small regularized least squares: the right-hand side is
    affine in the coefficients, so zeroing it at the declared resting
    point is a linear condition; the regularizer pulls every scaled
    coefficient toward a common characteristic magnitude.  Starting here
    keeps the first reconstruction solves bounded.
    """
    x0 = spec.resting_state()
    u_mean = (
        np.mean(np.stack([w.u for w in windows]), axis=(0, 2)) if spec.m else np.zeros(0)
    )

    def term_value(term):
        v = term.weight
        for fac in term.factors:
            col = x0[fac.var]
            if fac.func == "sin":
                col = np.sin(col)
            elif fac.func == "cos":
                col = np.cos(col)
            v *= col**fac.power
        if term.input is not None:
            v *= u_mean[term.input]
        return v

    M = np.zeros((spec.n, spec.p))
    r = np.zeros(spec.n)
    for term in (*spec.f_terms, *spec.g_terms):
        v = term_value(term)
        if term.coeff is None:
            r[term.state] -= v
        else:
            M[term.state, spec.coeff_index(term.coeff)] += v
    M_scaled = M * scales[None, :]
    lhs = M_scaled.T @ M_scaled + lam * np.eye(spec.p)
    rhs = M_scaled.T @ r + lam * prior
    theta = np.linalg.solve(lhs, rhs)
    return np.clip(theta, 0.01, None)


def init_params(
    arch: str,
    spec: SystemSpec,
    n_channels: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
    dt: float,
    k: int,
) -> dict[str, np.ndarray]:
    if arch not in ARCHS:
        raise SpecError(f"unknown architecture {arch!r}; supported: {ARCHS}")
    V = cfg.hidden_width
    # the integrator cell has no restoring term, so its hidden magnitude
    # grows with the window duration; shrink its drive at init to keep the
    # starting state O(1)
    drive_scale = 1.0 / max(1.0, dt * k) if arch == "node" else 1.0
    params = {
        "cell.w_in": drive_scale * rng.normal(0.0, 1.0, (V, n_channels)) / np.sqrt(n_channels),
        "cell.w_rec": drive_scale * rng.normal(0.0, 1.0, (V, V)) / np.sqrt(V),
        "cell.b": np.zeros(V),
    }
    if arch in ("ltc", "ctrnn"):
        # time constants log-uniform across the window's timescales
        span = max(k / 8.0, 2.0)
        params["cell.tau"] = dt * np.exp(rng.uniform(0.0, np.log(span), V))
    if arch == "ltc":
        params["cell.target"] = rng.normal(0.0, 0.5, V)
    sizes = [V, *cfg.head_layers, spec.p + cfg.n_shift]
    for li in range(len(sizes) - 1):
        fan_in, fan_out = sizes[li], sizes[li + 1]
        params[f"head.w{li}"] = rng.normal(0.0, 1.0, (fan_out, fan_in)) / np.sqrt(fan_in)
        params[f"head.b{li}"] = np.zeros(fan_out)
    # concentrate the initial estimates: a wide initial spread would throw
    # most candidates far off the stability manifold and clamp their
    # losses before learning starts; the per-coefficient bias is filled in
    # by the caller from the resting-consistency solve
    last = len(sizes) - 2
    params[f"head.w{last}"] *= cfg.head_init_scale
    params[f"head.b{last}"][: spec.p] = cfg.coeff_bias_init
    return params


def _probe_hidden_scale(arch, params, tensor, dt, cfg) -> float:
    """RMS of the final hidden state over a probe batch of windows.

    Used once at initialization to normalize the head's first layer:
    explicit-Euler cells carry hidden magnitudes that scale with the
    sample interval, and an unnormalized head would scatter the initial
    coefficient proposals far off the stability manifold.
    """
    cell = make_cell(arch, params)
    step = {"ltc": ltc_step, "ctrnn": ctrnn_step, "node": node_step}[arch]
    finals = []
    for b in range(tensor.shape[0]):
        h = np.zeros(cell.width)
        for t in range(tensor.shape[2]):
            h = step(cell, h, tensor[b, :, t], dt, cfg.unfold_substeps)
        finals.append(h)
    rms = float(np.sqrt(np.mean(np.square(finals))))
    return max(rms, 1e-3)


def make_cell(arch: str, params: dict[str, np.ndarray]):
    if arch == "ltc":
        return LtcCell(
            params["cell.w_in"],
            params["cell.w_rec"],
            params["cell.b"],
            params["cell.tau"],
            params["cell.target"],
        )
    if arch == "ctrnn":
        return CtRnnCell(
            params["cell.w_in"], params["cell.w_rec"], params["cell.b"], params["cell.tau"]
        )
    return NodeCell(params["cell.w_in"], params["cell.w_rec"], params["cell.b"])


def make_head(spec: SystemSpec, cfg: TrainConfig, params: dict[str, np.ndarray]) -> DenseHead:
    n_layers = len(cfg.head_layers) + 1
    return DenseHead(
        weights=[params[f"head.w{i}"] for i in range(n_layers)],
        biases=[params[f"head.b{i}"] for i in range(n_layers)],
        n_coeff=spec.p,
        n_shift=cfg.n_shift,
        dropout_rate=cfg.dropout,
        mode=cfg.coeff_mode,
    )


def _forward_tape(
    tape: Tape,
    arch: str,
    spec: SystemSpec,
    leaves: dict[str, Var],
    window_tensor: np.ndarray,  # B x C x k
    dt: float,
    cfg: TrainConfig,
    training: bool,
    rng: np.random.Generator | None,
    coeff_scales: np.ndarray | None = None,
) -> tuple[Var, Var]:
    """Run the cell over the window and the head on the final state.

    Returns (coeff matrix Var p x B, shift matrix Var q x B).
    """
    B, C, k = window_tensor.shape
    V = leaves["cell.w_rec"].value.shape[0]
    w_in, w_rec, b = leaves["cell.w_in"], leaves["cell.w_rec"], leaves["cell.b"]
    delta = dt / cfg.unfold_substeps
    h = tape.leaf(np.zeros((V, B)))
    if arch in ("ltc", "ctrnn"):
        inv_tau = tape.div(1.0, leaves["cell.tau"])
    for t in range(k):
        inp = np.ascontiguousarray(window_tensor[:, :, t].T)  # C x B
        drive = tape.matmul(w_in, inp)
        for _ in range(cfg.unfold_substeps):
            z = tape.addcol(tape.add(drive, tape.matmul(w_rec, h)), b)
            if arch == "ltc":
                f = tape.softplus(tape.tanh(z))
                num = tape.add(h, tape.scale(tape.mulcol(f, leaves["cell.target"]), delta))
                den = tape.add(
                    tape.addcol(tape.scale(f, delta), tape.scale(inv_tau, delta)), 1.0
                )
                h = tape.div(num, den)
            elif arch == "ctrnn":
                f = tape.tanh(z)
                h = tape.add(h, tape.scale(tape.sub(f, tape.mulcol(h, inv_tau)), delta))
            else:
                h = tape.add(h, tape.scale(tape.tanh(z), delta))
    act = h
    n_layers = len(cfg.head_layers) + 1
    for li in range(n_layers - 1):
        act = tape.relu(tape.addcol(tape.matmul(leaves[f"head.w{li}"], act), leaves[f"head.b{li}"]))
        if training and cfg.dropout > 0:
            keep = (rng.random(act.value.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            act = tape.mul(act, keep)
    out = tape.addcol(tape.matmul(leaves[f"head.w{n_layers-1}"], act), leaves[f"head.b{n_layers-1}"])
    raw = tape.vslice(out, 0, spec.p)
    signed, free = _sign_split(spec, cfg.coeff_mode)
    coeff = tape.add(tape.mulcol(tape.relu(raw), signed), tape.mulcol(raw, free))
    if coeff_scales is not None:
        coeff = tape.mulcol(coeff, coeff_scales)
    if cfg.n_shift:
        d = tape.sigmoid(tape.vslice(out, spec.p, spec.p + cfg.n_shift))
    else:
        d = tape.leaf(np.zeros((0, B)))
    return coeff, d


# ---------------------------------------------------------------------------
# optimizer and training state


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params):
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )

    def update(self, params, grads, cfg: TrainConfig, lr_scale: float = 1.0):
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        lr = cfg.lr * lr_scale
        for key in sorted(params):
            g = grads[key]
            self.m[key] = b1 * self.m[key] + (1 - b1) * g
            self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
            step = lr * (self.m[key] / corr1) / (np.sqrt(self.v[key] / corr2) + cfg.adam_eps)
            params[key] = params[key] - step


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically."""

    arch: str
    params: dict[str, np.ndarray]
    adam: AdamState
    rng_state: dict
    epoch: int
    cfg: TrainConfig


@dataclass
class RecoveryResult:
    coeffs: Coefficients
    shifts: np.ndarray
    loss_history: list[float]
    rmse_y: float
    reconstructions: list[Trace]
    rmse_coeffs: float | None = None
    state: TrainState | None = None


def _project_signs(spec: SystemSpec, values: np.ndarray) -> np.ndarray:
    out = values.copy()
    for i, s in enumerate(spec.coeff_signs):
        if s == "nonneg":
            out[i] = max(out[i], 0.0)
        elif s == "nonpos":
            out[i] = min(out[i], 0.0)
    return out


def _reconstruct_window(
    spec: SystemSpec, coeffs: Coefficients, shifts: np.ndarray, w: Trace, cfg: TrainConfig
) -> tuple[Trace, float]:
    """Solve one window under the final estimate; returns trace + its RMSE."""
    mask = _window_mask(spec, w)
    x0 = _initial_state(spec, w, mask)
    u = _shift_inputs(w.u, shifts, cfg.shift_channels) if cfg.n_shift else w.u
    states, diverged, _ = integrate_batch(
        spec,
        coeffs.values[None, :],
        x0[None, :],
        u[None, :, :],
        w.k,
        w.dt,
        SolverConfig(method="rk4", substeps=cfg.solve_substeps),
    )
    y_est = states[0, list(mask.observed), :]
    rmse = float(np.mean(np.sqrt(np.mean((y_est - w.y) ** 2, axis=1))))
    if diverged[0]:
        rmse = float("inf")
    est = Trace(w.t0, w.dt, y_est, u, w.labels, dict(w.meta))
    return est, rmse


def train(
    arch: str,
    spec: SystemSpec,
    batches: BatchSet,
    cfg: TrainConfig,
    coeffs_true: Coefficients | None = None,
    state: TrainState | None = None,
) -> RecoveryResult:
    """Train a recovery network and aggregate the final estimates.

    The per-epoch loss history is the mean training-batch loss; the final
    coefficient and shift estimates are the means of the per-window head
    outputs over the test split (train split when no test windows exist),
    evaluated without dropout.  Deterministic for a given seed.
    """
    if arch not in ARCHS:
        raise SpecError(f"unknown architecture {arch!r}")
    if not batches.windows:
        raise SpecError("empty batch set")
    k = batches.k
    dt = batches.windows[0].dt
    n_channels = batches.windows[0].y.shape[0] + batches.windows[0].u.shape[0]

    scales = coefficient_scales(spec, list(batches.windows))
    if state is None:
        rng = np.random.default_rng(cfg.seed)
        params = init_params(arch, spec, n_channels, cfg, rng, dt, k)
        probe = batches.tensor(batches.train_idx[: min(8, len(batches.train_idx))])
        params["head.w0"] /= _probe_hidden_scale(arch, params, probe, dt, cfg)
        n_layers = len(cfg.head_layers) + 1
        params[f"head.b{n_layers - 1}"][: spec.p] = resting_consistent_init(
            spec, list(batches.windows), scales, prior=cfg.coeff_bias_init
        )
        adam = AdamState.fresh(params)
        start_epoch = 0
    else:
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        params = {key: v.copy() for key, v in state.params.items()}
        adam = AdamState(
            m={key: v.copy() for key, v in state.adam.m.items()},
            v={key: v.copy() for key, v in state.adam.v.items()},
            t=state.adam.t,
        )
        start_epoch = state.epoch

    train_groups = batches.train_batches
    loss_history: list[float] = []

    for _epoch in range(start_epoch, cfg.epochs):
        lr_scale = min(1.0, (_epoch + 1) / cfg.warmup_epochs) if cfg.warmup_epochs else 1.0
        epoch_losses = []
        any_alive = False
        for group in train_groups:
            tensor = batches.tensor(group)
            windows = [batches.windows[i] for i in group]
            tape = Tape()
            leaves = {key: tape.leaf(v) for key, v in params.items()}
            coeff_var, d_var = _forward_tape(
                tape, arch, spec, leaves, tensor, dt, cfg, training=True, rng=rng,
                coeff_scales=scales,
            )
            losses, g_c, g_d = reconstruction_losses(
                spec, coeff_var.value.T, d_var.value.T, windows, cfg, want_grads=True
            )
            B = len(group)

            def vjp(cot, g_c=g_c, g_d=g_d, B=B):
                return [cot * g_c.T / B, cot * g_d.T / B]

            loss_var = tape.custom_node([coeff_var, d_var], np.mean(losses), vjp)
            grads_table = tape.backward(loss_var)
            grads = {key: grads_table[leaf.idx] for key, leaf in leaves.items()}
            if cfg.weight_grad_clip > 0:
                total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if total > cfg.weight_grad_clip:
                    factor = cfg.weight_grad_clip / total
                    grads = {key: g * factor for key, g in grads.items()}
            adam.update(params, grads, cfg, lr_scale)
            if "cell.tau" in params:
                np.clip(params["cell.tau"], 1e-3 * dt, None, out=params["cell.tau"])
            epoch_losses.append(float(np.mean(losses)))
            if np.any(losses < DIVERGED_LOSS):
                any_alive = True
        if not any_alive:
            raise TrainingError("every batch element diverged for an entire epoch")
        loss_history.append(float(np.mean(epoch_losses)))

    # final estimates on the held-out windows, dropout off
    eval_idx = batches.test_idx if batches.test_idx else batches.train_idx
    coeff_cols, d_cols = [], []
    for start in range(0, len(eval_idx), cfg.batch_size):
        group = eval_idx[start : start + cfg.batch_size]
        tensor = batches.tensor(group)
        tape = Tape()
        leaves = {key: tape.leaf(v) for key, v in params.items()}
        coeff_var, d_var = _forward_tape(
            tape, arch, spec, leaves, tensor, dt, cfg, training=False, rng=None,
            coeff_scales=scales,
        )
        coeff_cols.append(coeff_var.value)
        d_cols.append(d_var.value)
    coeff_mat = np.hstack(coeff_cols)
    d_mat = np.hstack(d_cols)
    coeff_est = _project_signs(spec, np.mean(coeff_mat, axis=1))
    d_mean = np.mean(d_mat, axis=1) if cfg.n_shift else np.zeros(0)
    shifts = cfg.shift_samples(d_mean) if cfg.n_shift else np.zeros(0)
    coeffs = Coefficients(coeff_est)

    recons, rmses = [], []
    for i in eval_idx:
        est, rmse = _reconstruct_window(spec, coeffs, shifts, batches.windows[i], cfg)
        recons.append(est)
        rmses.append(rmse)
    rmse_y = float(np.mean(rmses)) if rmses else float("nan")

    rmse_c = None
    if coeffs_true is not None:
        rmse_c = float(np.sqrt(np.mean((coeff_est - coeffs_true.values) ** 2)))

    final_state = TrainState(
        arch=arch,
        params=params,
        adam=adam,
        rng_state=rng.bit_generator.state,
        epoch=cfg.epochs,
        cfg=cfg,
    )
    return RecoveryResult(
        coeffs=coeffs,
        shifts=shifts,
        loss_history=loss_history,
        rmse_y=rmse_y,
        reconstructions=recons,
        rmse_coeffs=rmse_c,
        state=final_state,
    )


def recover(
    traces: list[Trace],
    spec: SystemSpec,
    arch: str,
    cfg: TrainConfig,
    k_window: int = 200,
    split_ratio: float = 0.75,
    coeffs_true: Coefficients | None = None,
) -> RecoveryResult:
    """Window the traces, train, and report the aggregated estimates."""
    from .signals import make_batches

    batches = make_batches(traces, cfg.batch_size, k_window, split_ratio, seed=cfg.seed)
    return train(arch, spec, batches, cfg, coeffs_true=coeffs_true)


# ---------------------------------------------------------------------------
# checkpointing


def _arrays_to_lists(d):
    return {k: np.asarray(v).tolist() for k, v in d.items()}


def _lists_to_arrays(d):
    return {k: np.array(v, dtype=float) for k, v in d.items()}


def save_checkpoint(state: TrainState, path) -> None:
    """Write a JSON checkpoint; reloading reproduces subsequent training
    bit-identically (python float repr round-trips exactly)."""
    doc = {
        "arch": state.arch,
        "epoch": state.epoch,
        "params": _arrays_to_lists(state.params),
        "adam_m": _arrays_to_lists(state.adam.m),
        "adam_v": _arrays_to_lists(state.adam.v),
        "adam_t": state.adam.t,
        "rng_state": state.rng_state,
        "cfg": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(state.cfg).items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> TrainState:
    with open(path) as fh:
        doc = json.load(fh)
    cfg_fields = dict(doc["cfg"])
    for key in ("shift_channels", "head_layers"):
        cfg_fields[key] = tuple(cfg_fields[key])
    cfg = TrainConfig(**cfg_fields)
    rng_state = doc["rng_state"]
    # JSON turns ints into arbitrary precision fine, but nested state dicts
    # need their integer leaves restored as python ints
    return TrainState(
        arch=doc["arch"],
        params=_lists_to_arrays(doc["params"]),
        adam=AdamState(
            m=_lists_to_arrays(doc["adam_m"]),
            v=_lists_to_arrays(doc["adam_v"]),
            t=int(doc["adam_t"]),
        ),
        rng_state=rng_state,
        epoch=int(doc["epoch"]),
        cfg=cfg,
    )

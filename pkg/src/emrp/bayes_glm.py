"""Hierarchical Bernoulli-logit regression with a built-in HMC sampler.

Models are varying-intercept logistic regressions over a finite set of
covariate cells: logit Pr(y=1 | cell) = alpha + sum_t coef_t[level_t(cell)].
Each term's coefficients get a Normal(0, sigma_t^2) prior with
sigma_t ~ half-Cauchy(0, a); scales are sampled on the log scale with the
Jacobian included.  The default parameterization is non-centered
(coef = sigma * u with u ~ N(0,1)); a centered variant is kept for
cross-checks.

Sampling uses static-trajectory HMC with dual-averaging step-size
adaptation, windowed diagonal mass-matrix estimation during warmup, and
+/-20% trajectory-length jitter.  Everything is deterministic given the
seed.
"""
from __future__ import annotations

import csv
import warnings as _warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, ndtri

from .data_model import CellFrame, CellMeanDraws, ValidationError

__all__ = [
    "FactorTerm",
    "ModelSpec",
    "BernoulliCellData",
    "cell_data_from_units",
    "SamplerConfig",
    "PosteriorFit",
    "log_posterior",
    "leapfrog",
    "sample",
    "cell_means",
    "diagnostics",
    "split_rhat",
    "bulk_ess",
    "posterior_predictive_check",
    "write_draws_csv",
]

# Dual-averaging constants (Hoffman & Gelman 2014 defaults).
DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75

DIVERGENCE_THRESHOLD = 1000.0


@dataclass(frozen=True)
class FactorTerm:
    """One varying-intercept factor: a level for every covariate cell."""

    name: str
    n_levels: int
    levels: np.ndarray  # (n_cells,) 1-based level per cell
    fixed_sigma: float | None = None

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=int)
        object.__setattr__(self, "levels", levels)
        if self.n_levels < 1:
            raise ValidationError(f"term {self.name!r}: n_levels must be >= 1")
        if levels.ndim != 1 or levels.size == 0:
            raise ValidationError(f"term {self.name!r}: levels must be a 1-D map over cells")
        if np.any(levels < 1) or np.any(levels > self.n_levels):
            raise ValidationError(f"term {self.name!r}: levels must lie in 1..{self.n_levels}")
        if self.fixed_sigma is not None and self.fixed_sigma <= 0:
            raise ValidationError(f"term {self.name!r}: fixed_sigma must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """Varying-intercept logistic model over ``n_cells`` covariate cells."""

    terms: tuple[FactorTerm, ...]
    n_cells: int
    intercept: bool = True
    prior_scale: float = 1.0
    centered: bool = False

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.prior_scale <= 0:
            raise ValidationError("prior_scale must be positive")
        if self.n_cells < 1:
            raise ValidationError("n_cells must be >= 1")
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise ValidationError("term names must be unique")
        for t in self.terms:
            if t.levels.size != self.n_cells:
                raise ValidationError(
                    f"term {t.name!r} maps {t.levels.size} cells, expected {self.n_cells}"
                )


@dataclass(frozen=True)
class BernoulliCellData:
    """Aggregated outcomes: Bernoulli trials and successes per cell."""

    trials: np.ndarray    # (n_cells,)
    successes: np.ndarray  # (n_cells,)

    def __post_init__(self):
        trials = np.asarray(self.trials, dtype=float)
        succ = np.asarray(self.successes, dtype=float)
        object.__setattr__(self, "trials", trials)
        object.__setattr__(self, "successes", succ)
        if trials.shape != succ.shape or trials.ndim != 1:
            raise ValidationError("trials and successes must be equal-length 1-D arrays")
        if np.any(trials < 0) or np.any(succ < 0) or np.any(succ > trials):
            raise ValidationError("need 0 <= successes <= trials")

    @property
    def n_cells(self) -> int:
        return self.trials.size


def cell_data_from_units(cells, y, n_cells: int) -> BernoulliCellData:
    """Aggregate unit-level binary outcomes by 1-based cell index."""
    cells = np.asarray(cells, dtype=int)
    y = np.asarray(y, dtype=int)
    if np.any(cells < 1) or np.any(cells > n_cells):
        raise ValidationError("unit cell indices out of range")
    trials = np.bincount(cells - 1, minlength=n_cells).astype(float)
    succ = np.bincount(cells - 1, weights=y.astype(float), minlength=n_cells)
    return BernoulliCellData(trials=trials, successes=succ)


class _Posterior:
    """Packed design and parameter layout for fast log-density evaluation."""

    def __init__(self, spec: ModelSpec, data: BernoulliCellData):
        if data.n_cells != spec.n_cells:
            raise ValidationError(
                f"data covers {data.n_cells} cells, model expects {spec.n_cells}"
            )
        self.spec = spec
        self.data = data
        K = sum(t.n_levels for t in spec.terms)
        A = np.zeros((spec.n_cells, K))
        col = 0
        self.term_slices = []
        for t in spec.terms:
            A[np.arange(spec.n_cells), col + t.levels - 1] = 1.0
            self.term_slices.append(slice(col, col + t.n_levels))
            col += t.n_levels
        self.A = A
        self.AT = A.T.copy()
        self.K = K
        self.n_int = 1 if spec.intercept else 0
        self.free_scale_terms = [i for i, t in enumerate(spec.terms) if t.fixed_sigma is None]
        self.dim = self.n_int + K + len(self.free_scale_terms)
        # hot-path precomputations
        self._fail = data.trials - data.successes
        self._term_starts = np.array([sl.start for sl in self.term_slices], dtype=int)
        self._term_of_col = np.repeat(np.arange(len(spec.terms)),
                                      [t.n_levels for t in spec.terms])
        self._sigma_base = np.array([np.nan if t.fixed_sigma is None else t.fixed_sigma
                                     for t in spec.terms])
        self._free_idx = np.array(self.free_scale_terms, dtype=int)
        self._log_a = np.log(spec.prior_scale)
        self._hc_const = len(self.free_scale_terms) * float(
            np.log(2.0 / (np.pi * spec.prior_scale)))
        self.names = []
        if spec.intercept:
            self.names.append("intercept")
        for t in spec.terms:
            self.names += [f"{t.name}[{k}]" for k in range(1, t.n_levels + 1)]
        self.names += [f"log_sigma_{spec.terms[i].name}" for i in self.free_scale_terms]

    def unpack(self, params: np.ndarray):
        """(intercept, raw coefficient block, per-term sigma array)."""
        alpha = params[0] if self.n_int else 0.0
        raw = params[self.n_int:self.n_int + self.K]
        sigma = np.empty(len(self.spec.terms))
        for i, t in enumerate(self.spec.terms):
            sigma[i] = t.fixed_sigma if t.fixed_sigma is not None else np.nan
        for scale_pos, i in enumerate(self.free_scale_terms):
            # same cap as the non-centered path: keeps diverging trajectories
            # finite (exp(160) fits in a double, exp of an unbounded log does not)
            sigma[i] = np.exp(min(params[self.n_int + self.K + scale_pos], 80.0))
        return alpha, raw, sigma

    def coefficients(self, params: np.ndarray):
        """Natural-scale coefficient vector (K,) plus intercept."""
        alpha, raw, sigma = self.unpack(params)
        coef = np.empty(self.K)
        for i, sl in enumerate(self.term_slices):
            coef[sl] = raw[sl] * sigma[i] if not self.spec.centered else raw[sl]
        return alpha, coef, sigma

    def logp_grad(self, params: np.ndarray):
        if self.spec.centered:
            return self._logp_grad_centered(params)
        n_int, K = self.n_int, self.K
        alpha = params[0] if n_int else 0.0
        raw = params[n_int:n_int + K]
        log_s = params[n_int + K:]
        sigma = self._sigma_base.copy()
        if log_s.size:
            # cap keeps diverging trajectories finite; the posterior has no
            # mass remotely near exp(80)
            sigma[self._free_idx] = np.exp(np.minimum(log_s, 80.0))

        grad = np.empty(self.dim)
        if K:
            sigma_col = sigma.take(self._term_of_col)
            eta = self.A @ (raw * sigma_col)
        else:
            eta = np.zeros(self.data.n_cells)
        if n_int:
            eta += alpha
        succ = self.data.successes
        # log_expit(-eta) = log_expit(eta) - eta folds the two likelihood
        # pieces into trials @ log_expit(eta) - failures @ eta
        lp = self.data.trials @ log_expit(eta) - self._fail @ eta
        e = succ - self.data.trials * expit(eta)
        if n_int:
            grad[0] = e.sum()
        if K:
            g_coef = self.AT @ e
            lp -= 0.5 * (raw @ raw)
            grad[n_int:n_int + K] = sigma_col * g_coef - raw
            if log_s.size:
                # d lp / d log sigma through the likelihood, per term
                dots = np.add.reduceat(raw * g_coef, self._term_starts)
                scale_dot = sigma[self._free_idx] * dots[self._free_idx]
            else:
                scale_dot = None
        else:
            scale_dot = None
        if log_s.size:
            # half-Cauchy(0, a) on sigma plus the log-scale Jacobian, written
            # in terms of t = log(sigma/a) so extreme scales stay finite
            t2 = 2.0 * (log_s - self._log_a)
            lp += self._hc_const - np.logaddexp(0.0, t2).sum() + log_s.sum()
            grad[n_int + K:] = scale_dot - 2.0 * expit(t2) + 1.0
        return float(lp), grad

    def _logp_grad_centered(self, params: np.ndarray):
        spec = self.spec
        a = spec.prior_scale
        alpha, raw, sigma = self.unpack(params)
        eta = self.A @ raw if self.K else np.zeros(self.data.n_cells)
        if self.n_int:
            eta = eta + alpha
        trials, succ = self.data.trials, self.data.successes
        lp = float(succ @ log_expit(eta) + (trials - succ) @ log_expit(-eta))
        e = succ - trials * expit(eta)
        g_coef = self.AT @ e

        grad = np.empty(self.dim)
        if self.n_int:
            grad[0] = e.sum()
        g_raw = grad[self.n_int:self.n_int + self.K]
        scale_grads = {}
        for i, sl in enumerate(self.term_slices):
            s = sigma[i]
            lp += -0.5 * float(raw[sl] @ raw[sl]) / (s * s) \
                - (sl.stop - sl.start) * np.log(s)
            g_raw[sl] = g_coef[sl] - raw[sl] / (s * s)
            if i in self.free_scale_terms:
                scale_grads[i] = float(raw[sl] @ raw[sl]) / (s * s) - (sl.stop - sl.start)
        for scale_pos, i in enumerate(self.free_scale_terms):
            s = sigma[i]
            # half-Cauchy(0, a) on sigma plus the log-scale Jacobian
            lp += float(np.log(2.0 / (np.pi * a)) - np.logaddexp(0.0, 2.0 * np.log(s / a))
                        + np.log(s))
            grad[self.n_int + self.K + scale_pos] = (
                scale_grads[i] - 2.0 * s * s / (a * a + s * s) + 1.0
            )
        return lp, grad


def log_posterior(spec: ModelSpec, data: BernoulliCellData, params: np.ndarray):
    """Unnormalized log joint density and its gradient at ``params``."""
    params = np.asarray(params, dtype=float)
    post = _Posterior(spec, data)
    if params.shape != (post.dim,):
        raise ValidationError(f"params must have shape ({post.dim},)")
    return post.logp_grad(params)


def leapfrog(q, p, step_size, n_steps, grad_fn, inv_mass):
    """Standard leapfrog integration of Hamilton's equations.

    ``grad_fn`` returns the gradient of the log posterior (not the potential),
    ``inv_mass`` is the diagonal of the inverse mass matrix.
    """
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    g = grad_fn(q)
    p = p + 0.5 * step_size * g
    for step in range(n_steps):
        q = q + step_size * inv_mass * p
        g = grad_fn(q)
        if step != n_steps - 1:
            p = p + step_size * g
    p = p + 0.5 * step_size * g
    return q, p


@dataclass
class SamplerConfig:
    """Settings for :func:`sample`."""

    chains: int = 2
    iters: int = 2000
    warmup: int = 1500
    seed: int | np.random.SeedSequence = 0
    target_accept: float = 0.8
    traj_time: float = 0.8
    traj_jitter: float = 0.2
    max_steps: int = 32
    init_jitter: float = 0.5
    step_size: float | None = None
    adapt: bool = True

    def __post_init__(self):
        if self.chains < 1:
            raise ValidationError("chains must be >= 1")
        if not 0 <= self.warmup < self.iters:
            raise ValidationError("need 0 <= warmup < iters")
        if not self.adapt and self.step_size is None:
            raise ValidationError("adapt=False requires an explicit step_size")


@dataclass(frozen=True)
class PosteriorFit:
    """Kept HMC draws plus adaptation and diagnostic byproducts."""

    spec: ModelSpec
    draws: np.ndarray        # (chains, kept, dim)
    lp: np.ndarray           # (chains, kept)
    param_names: tuple[str, ...]
    step_sizes: np.ndarray   # (chains,)
    inv_mass: np.ndarray     # (chains, dim)
    divergences: int
    accept_rate: float
    warnings: tuple[str, ...] = ()

    @property
    def chains(self) -> int:
        return self.draws.shape[0]

    @property
    def kept(self) -> int:
        return self.draws.shape[1]

    def stacked(self) -> np.ndarray:
        """All kept draws merged across chains, shape (chains*kept, dim)."""
        return self.draws.reshape(-1, self.draws.shape[2])


class _DualAveraging:
    def __init__(self, eps0: float, target: float):
        self.target = target
        self.reset(eps0)

    def reset(self, eps0: float):
        self.mu = np.log(10.0 * eps0)
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept_stat: float) -> float:
        self.t += 1
        frac = 1.0 / (self.t + DA_T0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - np.sqrt(self.t) / DA_GAMMA * self.h_bar
        w = self.t ** (-DA_KAPPA)
        self.log_eps_bar = w * self.log_eps + (1 - w) * self.log_eps_bar
        return np.exp(self.log_eps)

    def adapted(self) -> float:
        return float(np.exp(self.log_eps_bar))


def _initial_step_size(post, q0, rng, eps0=1.0):
    """Double/halve until the one-step acceptance probability crosses 0.5."""
    dim = post.dim
    p0 = rng.standard_normal(dim)
    lp0, _ = post.logp_grad(q0)
    h0 = lp0 - 0.5 * p0 @ p0

    def one_step_h(eps):
        q, p = leapfrog(q0, p0, eps, 1, lambda q: post.logp_grad(q)[1], np.ones(dim))
        lp, _ = post.logp_grad(q)
        return lp - 0.5 * p @ p

    eps = eps0
    ratio = np.exp(min(0.0, one_step_h(eps) - h0))
    direction = 1.0 if ratio > 0.5 else -1.0
    for _ in range(50):
        eps_new = eps * (2.0 ** direction)
        h1 = one_step_h(eps_new)
        if not np.isfinite(h1):
            break
        ratio = np.exp(min(0.0, h1 - h0))
        if (direction > 0 and ratio <= 0.5) or (direction < 0 and ratio >= 0.5):
            return float(np.clip(eps_new if direction < 0 else eps, 1e-6, 10.0))
        eps = eps_new
    return float(np.clip(eps, 1e-6, 10.0))


def _mass_windows(warmup: int) -> tuple[list[int], int]:
    """Doubling-window schedule: ([window end iters], collection start)."""
    init_buf = max(1, int(round(0.15 * warmup)))
    term_buf = max(1, int(round(0.10 * warmup)))
    middle = warmup - init_buf - term_buf
    if middle < 20:
        return [], warmup
    ends, width, pos = [], max(25, middle // 30), init_buf
    while True:
        nxt = pos + width
        if nxt + 2 * width > init_buf + middle:
            ends.append(init_buf + middle)
            break
        ends.append(nxt)
        pos = nxt
        width *= 2
    return ends, init_buf


def _trajectory(post, q, lp, grad, p, eps, n_steps, inv_mass):
    """Fused leapfrog trajectory reusing the cached starting gradient.

    The inputs are never mutated; the loop works on copies in place so a
    rejected proposal leaves the chain state intact.
    """
    q = q.copy()
    p = p + 0.5 * eps * grad
    scratch = np.empty_like(q)
    for step in range(n_steps):
        np.multiply(inv_mass, p, out=scratch)
        scratch *= eps
        q += scratch
        lp, g = post.logp_grad(q)
        if not np.isfinite(lp):
            return q, -np.inf, g, p
        if step != n_steps - 1:
            np.multiply(g, eps, out=scratch)
            p += scratch
    p += 0.5 * eps * g
    return q, lp, g, p


def _run_chain(post, config: SamplerConfig, seed: np.random.SeedSequence):
    rng = np.random.default_rng(seed)
    dim = post.dim
    q = rng.uniform(-config.init_jitter, config.init_jitter, size=dim)
    lp, grad = post.logp_grad(q)
    if not np.isfinite(lp):
        raise ValidationError("non-finite log posterior at initialization")

    inv_mass = np.ones(dim)
    sqrt_mass = np.ones(dim)  # p ~ N(0, M): sd = sqrt(M) = 1/sqrt(inv_mass)
    if config.adapt:
        eps = config.step_size or _initial_step_size(post, q, rng)
        da = _DualAveraging(eps, config.target_accept)
    else:
        eps = float(config.step_size)
        da = None
    window_ends, collect_start = _mass_windows(config.warmup) if config.adapt else ([], 0)
    window_draws: list[np.ndarray] = []

    kept = config.iters - config.warmup
    draws = np.empty((kept, dim))
    lps = np.empty(kept)
    divergences = 0
    accepts = 0

    for it in range(config.iters):
        in_warmup = it < config.warmup
        p = rng.standard_normal(dim) * sqrt_mass
        h0 = lp - 0.5 * float((p * p) @ inv_mass)
        base_steps = int(np.clip(round(config.traj_time / eps), 1, config.max_steps))
        jit = rng.uniform(1.0 - config.traj_jitter, 1.0 + config.traj_jitter)
        n_steps = max(1, int(round(base_steps * jit)))

        q_new, lp_new, grad_new, p_new = _trajectory(
            post, q, lp, grad, p, eps, n_steps, inv_mass)
        h1 = lp_new - 0.5 * float((p_new * p_new) @ inv_mass)
        delta = h1 - h0
        if not np.isfinite(delta) or -delta > DIVERGENCE_THRESHOLD:
            accept_stat, accepted = 0.0, False
            if not in_warmup:
                divergences += 1
        else:
            accept_stat = float(np.exp(min(0.0, delta)))
            accepted = bool(np.log(rng.uniform()) < delta)
        if accepted:
            q, lp, grad = q_new, lp_new, grad_new
        if not in_warmup:
            accepts += accepted
            draws[it - config.warmup] = q
            lps[it - config.warmup] = lp
            continue

        if da is not None:
            eps = da.update(accept_stat)
        if it >= collect_start:
            window_draws.append(q.copy())
        if window_ends and it + 1 == window_ends[0]:
            window_ends.pop(0)
            block = np.asarray(window_draws)
            window_draws = []
            if block.shape[0] >= 10:
                n_w = block.shape[0]
                var = block.var(axis=0, ddof=1)
                inv_mass = (n_w / (n_w + 5.0)) * var + 1e-3 * (5.0 / (n_w + 5.0))
                sqrt_mass = 1.0 / np.sqrt(inv_mass)
            if da is not None:
                da.reset(np.exp(da.log_eps))
        if da is not None and it + 1 == config.warmup:
            eps = da.adapted()

    return draws, lps, float(eps), inv_mass, divergences, accepts / max(1, kept)


def sample(spec: ModelSpec, data: BernoulliCellData, config: SamplerConfig) -> PosteriorFit:
    """Run HMC and return kept draws from all chains."""
    post = _Posterior(spec, data)
    seed = config.seed
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    chain_seeds = root.spawn(config.chains)

    all_draws, all_lps, step_sizes, inv_masses = [], [], [], []
    divergences = 0
    accept_rates = []
    for cs in chain_seeds:
        draws, lps, eps, inv_mass, div, acc = _run_chain(post, config, cs)
        all_draws.append(draws)
        all_lps.append(lps)
        step_sizes.append(eps)
        inv_masses.append(inv_mass)
        divergences += div
        accept_rates.append(acc)

    draws = np.stack(all_draws)
    lps = np.stack(all_lps)
    warn: list[str] = []
    total_kept = draws.shape[0] * draws.shape[1]
    if divergences > 0.10 * total_kept:
        warn.append(f"divergence rate {divergences / total_kept:.1%} exceeds 10%")
    fit = PosteriorFit(
        spec=spec,
        draws=draws,
        lp=lps,
        param_names=tuple(post.names),
        step_sizes=np.asarray(step_sizes),
        inv_mass=np.stack(inv_masses),
        divergences=divergences,
        accept_rate=float(np.mean(accept_rates)),
        warnings=tuple(warn),
    )
    if draws.shape[1] >= 4:
        extra = convergence_warnings(diagnostics(fit))
        if extra:
            fit = PosteriorFit(
                spec=spec, draws=draws, lp=lps, param_names=tuple(post.names),
                step_sizes=fit.step_sizes, inv_mass=fit.inv_mass,
                divergences=divergences, accept_rate=fit.accept_rate,
                warnings=tuple(warn) + extra,
            )
    return fit


# ---------------------------------------------------------------------------
# Convergence diagnostics.
# ---------------------------------------------------------------------------

def _split_chains(x: np.ndarray) -> np.ndarray:
    """Split (chains, n) into (2*chains, n//2), dropping an odd last draw."""
    chains, n = x.shape
    half = n // 2
    if half < 1:
        raise ValidationError("need at least 2 draws per chain to split")
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def split_rhat(x: np.ndarray) -> float:
    """Potential scale reduction over split chains for one parameter."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValidationError("split_rhat expects (chains, draws)")
    s = _split_chains(x)
    m, n = s.shape
    chain_means = s.mean(axis=1)
    b_over_n = chain_means.var(ddof=1)
    w = s.var(axis=1, ddof=1).mean()
    if w <= 0:
        return float("nan")
    var_plus = (n - 1) / n * w + b_over_n
    return float(np.sqrt(var_plus / w))


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(-1)
    ranks = np.empty_like(flat)
    order = np.argsort(flat, kind="stable")
    ranks[order] = np.arange(1, flat.size + 1)
    z = ndtri((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(x.shape)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT, shape preserved."""
    n = x.shape[1]
    x_c = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x_c, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real
    return acov / n


def bulk_ess(x: np.ndarray) -> float:
    """Rank-normalized effective sample size (Geyer initial monotone sum)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValidationError("bulk_ess expects (chains, draws)")
    s = _split_chains(_rank_normalize(x))
    m, n = s.shape
    if np.allclose(s.var(axis=1), 0):
        return float("nan")
    acov = _autocovariance(s)
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n + s.mean(axis=1).var(ddof=1)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    # Geyer: accumulate positive, monotone-decreasing pair sums.
    tau = -rho[0]  # corrects for adding rho_0 back in the pair loop
    prev_pair = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        pair = min(pair, prev_pair)
        tau += 2.0 * pair
        prev_pair = pair
        t += 2
    tau = max(tau, 1.0 / np.log10(m * n + 10))
    return float(m * n / tau)


def diagnostics(fit: PosteriorFit) -> dict:
    """Split R-hat and bulk ESS per parameter, plus divergence count."""
    draws = fit.draws
    n_par = draws.shape[2]
    if fit.chains < 2:
        rhat = None
    else:
        rhat = np.array([split_rhat(draws[:, :, i]) for i in range(n_par)])
    ess = np.array([bulk_ess(draws[:, :, i]) for i in range(n_par)])
    return {
        "rhat": rhat,
        "ess_bulk": ess,
        "divergences": fit.divergences,
        "param_names": fit.param_names,
    }


def convergence_warnings(diag: dict, rhat_limit: float = 1.05,
                         ess_limit: float = 100.0) -> tuple[str, ...]:
    out = []
    rhat = diag.get("rhat")
    if rhat is not None and np.any(np.nan_to_num(rhat, nan=0.0) > rhat_limit):
        worst = int(np.nanargmax(rhat))
        out.append(
            f"split R-hat {rhat[worst]:.3f} > {rhat_limit} for "
            f"{diag['param_names'][worst]}"
        )
    ess = diag.get("ess_bulk")
    if ess is not None:
        finite = np.isfinite(ess)
        if np.any(finite) and np.min(ess[finite]) < ess_limit:
            worst = int(np.argmin(np.where(finite, ess, np.inf)))
            out.append(
                f"bulk ESS {ess[worst]:.0f} < {ess_limit:.0f} for "
                f"{diag['param_names'][worst]}"
            )
    return tuple(out)


# ---------------------------------------------------------------------------
# Posterior summaries over cells.
# ---------------------------------------------------------------------------

def _stacked_coefficients(fit: PosteriorFit):
    """Natural-scale coefficients for all kept draws: (alpha, coef, sigma)."""
    post = _Posterior(fit.spec, BernoulliCellData(
        trials=np.zeros(fit.spec.n_cells), successes=np.zeros(fit.spec.n_cells)))
    stacked = fit.stacked()
    S = stacked.shape[0]
    alpha = stacked[:, 0] if fit.spec.intercept else np.zeros(S)
    raw = stacked[:, post.n_int:post.n_int + post.K]
    sigma = np.empty((S, len(fit.spec.terms)))
    for i, t in enumerate(fit.spec.terms):
        sigma[:, i] = t.fixed_sigma if t.fixed_sigma is not None else np.nan
    for scale_pos, i in enumerate(post.free_scale_terms):
        sigma[:, i] = np.exp(stacked[:, post.n_int + post.K + scale_pos])
    if fit.spec.centered:
        coef = raw.copy()
    else:
        coef = np.empty_like(raw)
        for i, sl in enumerate(post.term_slices):
            coef[:, sl] = raw[:, sl] * sigma[:, i:i + 1]
    return post, alpha, coef, sigma


def _stacked_cell_probs(fit: PosteriorFit) -> np.ndarray:
    post, alpha, coef, _ = _stacked_coefficients(fit)
    eta = coef @ post.AT
    if fit.spec.intercept:
        eta += alpha[:, None]
    return expit(eta)


def cell_means(fit: PosteriorFit, spec: ModelSpec | None = None,
               frame: CellFrame | None = None) -> CellMeanDraws:
    """Posterior draws of Pr(y = 1 | cell) for every covariate cell."""
    if spec is not None and spec is not fit.spec:
        raise ValidationError("spec must be the spec the model was fitted with")
    if frame is not None and frame.J != fit.spec.n_cells:
        raise ValidationError(
            f"frame has J={frame.J} joint cells, model covers {fit.spec.n_cells}"
        )
    return CellMeanDraws(means=_stacked_cell_probs(fit))


def posterior_predictive_check(
    fit: PosteriorFit,
    unit_cells,
    subgroups: dict[str, np.ndarray],
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Posterior predictive subgroup means of simulated outcomes.

    ``unit_cells`` holds each sample unit's 1-based covariate cell;
    ``subgroups`` maps names to arrays of 0-based unit indices.  Empty
    subgroups are skipped with a warning.
    """
    unit_cells = np.asarray(unit_cells, dtype=int)
    probs = _stacked_cell_probs(fit)[:, unit_cells - 1]  # (S, n_units)
    sim = rng.uniform(size=probs.shape) < probs
    out = {}
    for name, idx in subgroups.items():
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            _warnings.warn(f"subgroup {name!r} has no units; skipped")
            continue
        out[name] = sim[:, idx].mean(axis=1)
    return out


def write_draws_csv(fit: PosteriorFit, path) -> None:
    """Dump kept draws: natural-scale coefficients, sigmas, and lp__."""
    header = []
    if fit.spec.intercept:
        header.append("intercept")
    for t in fit.spec.terms:
        header += [f"{t.name}[{k}]" for k in range(1, t.n_levels + 1)]
    sigma_terms = [i for i, t in enumerate(fit.spec.terms) if t.fixed_sigma is None]
    header += [f"sigma_{fit.spec.terms[i].name}" for i in sigma_terms]
    header.append("lp__")
    _, alpha, coef, sigma = _stacked_coefficients(fit)
    lps = fit.lp.reshape(-1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in range(coef.shape[0]):
            row = ([alpha[s]] if fit.spec.intercept else []) + list(coef[s])
            row += [sigma[s, i] for i in sigma_terms]
            row.append(lps[s])
            writer.writerow([repr(float(v)) for v in row])

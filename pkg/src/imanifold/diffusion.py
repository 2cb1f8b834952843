"""Denoising diffusion on low-dimensional data.

Time is indexed by integer grid points ``t = 0..T``; ``alpha_bar[t]`` is
the signal-retention coefficient, ``alpha_bar[0] == 1``. For ``s < t`` the
composed coefficients are ``alpha_bar_st = alpha_bar[t] / alpha_bar[s]``
and ``beta_bar_st = 1 - alpha_bar_st``.

Samplers step backwards over a stride-``h`` grid ``T, T-h, ...``; when
``h`` does not divide ``T`` the last step down to 0 is shorter.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Adam, Mlp, MlpSpec, Rng, Tensor, concat
from .core.density import LOG_2PI, gaussian_log_density, gaussian_log_density_rows, standard_normal_log_density_rows

log = logging.getLogger(__name__)

N_TIME_FREQS = 4  # sin/cos pairs -> 8 features, plus t/T
VARIANCE_CHOICES = ("beta_st", "tilde")
LOGPROB_CHUNK_ROWS = 100_000  # (sample, round) rows evaluated together in log_prob
MODES = ("ddpm", "ddim")
CSV_COLUMNS = ("sample_id", "round", "log_pxT", "sum_fwd", "sum_bwd", "total")
SUMMARY_COLUMNS = ("sample_id", "rounds", "log_pxT_mean", "log_pxT_std", "sum_fwd_mean", "sum_fwd_std",
                   "sum_bwd_mean", "sum_bwd_std", "total_mean", "total_std")


class ScheduleError(ValueError):
    pass


class DiffusionError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    times: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.T < 2 or ab.shape != (self.T + 1,):
            raise ScheduleError("invalid schedule: need T >= 2 and T+1 coefficients")
        if ab[0] != 1.0 or np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) >= 0):
            raise ScheduleError("invalid schedule: alpha_bar must start at 1 and strictly decrease in (0, 1]")
        if ab[-1] > 1e-4:
            raise ScheduleError("invalid schedule: final alpha_bar must be <= 1e-4")

    @property
    def beta_bar(self) -> np.ndarray:
        return 1.0 - self.alpha_bar

    def check(self, t) -> int:
        if isinstance(t, (bool, np.bool_)) or not float(t).is_integer() or not 0 <= t <= self.T:
            raise ScheduleError(f"time {t!r} is not on the schedule grid 0..{self.T}")
        return int(t)

    def alpha_bar_st(self, s: int, t: int) -> float:
        s, t = self.check(s), self.check(t)
        return float(self.alpha_bar[t] / self.alpha_bar[s])

    def beta_bar_st(self, s: int, t: int) -> float:
        return 1.0 - self.alpha_bar_st(s, t)

    def to_dict(self) -> dict:
        return {"T": self.T, "alpha_bar": [float(a) for a in self.alpha_bar]}

    @classmethod
    def from_array(cls, alpha_bar) -> "NoiseSchedule":
        ab = np.asarray(alpha_bar, dtype=np.float64)
        T = len(ab) - 1
        return cls(T, np.linspace(0.0, 1.0, T + 1), ab)


def schedule_linear(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.2) -> NoiseSchedule:
    """alpha_bar[t] = prod_{k<=t} (1 - beta_k) with beta linear in k = 1..T."""
    if not (0 < beta_min <= beta_max < 1) or T < 2:
        raise ScheduleError("invalid schedule: need 0 < beta_min <= beta_max < 1 and T >= 2")
    betas = np.linspace(beta_min, beta_max, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T, np.linspace(0.0, 1.0, T + 1), alpha_bar)


def schedule_cosine(T: int = 100, power: float = 2.0, tail_steps: int = 22, tail_start: float = 0.047,
                    final: float = 7.5e-5) -> NoiseSchedule:
    """Cosine body with a log-SNR-linear tail.

    For t <= T - tail_steps, alpha_bar = cos^2(pi/2 * k * u^power) with
    u = t / (T - tail_steps) and k chosen so the body ends at ``tail_start``.
    The remaining steps move linearly in log(alpha_bar / (1 - alpha_bar))
    down to ``final``, which keeps the ratio alpha_bar_s / alpha_bar_t of
    neighbouring steps bounded near t = T.
    """
    if not (0 <= tail_steps < T - 1) or not (0 < final < tail_start < 1) or final > 1e-4 or power <= 0:
        raise ScheduleError("invalid schedule: check tail_steps, tail_start, final and power")
    body = T - tail_steps
    k = math.acos(math.sqrt(tail_start)) / (math.pi / 2)
    u = np.arange(body + 1) / body
    ab = np.cos(math.pi / 2 * k * u**power) ** 2
    logit = lambda a: math.log(a / (1.0 - a))  # noqa: E731
    if tail_steps:
        tail = np.linspace(logit(tail_start), logit(final), tail_steps + 1)[1:]
        ab = np.concatenate([ab, 1.0 / (1.0 + np.exp(-tail))])
    else:
        ab[-1] = final
    ab[0] = 1.0
    return NoiseSchedule(T, np.linspace(0.0, 1.0, T + 1), ab)


SCHEDULES = {"linear": schedule_linear, "cosine": schedule_cosine}


def time_grid(T: int, h: int) -> list[int]:
    """Ascending grid ``0 = t_0 < ... < t_K = T`` with stride ``h`` counted down from T."""
    if h < 1 or h > T:
        raise ScheduleError(f"step size h={h} must satisfy 1 <= h <= T={T}")
    grid = sorted(set(range(T, 0, -h)) | {0})
    if T % h:
        log.info("h=%d does not divide T=%d; final step %d -> 0 is shortened", h, T, grid[1])
    return grid


def time_features(t, T: int) -> np.ndarray:
    """``[t/T, sin(pi 2^k t/T), cos(pi 2^k t/T)]`` for k < 4; shape (n, 9)."""
    u = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.pi * 2.0 ** np.arange(N_TIME_FREQS)
    ang = u[:, None] * freqs[None, :]
    return np.concatenate([u[:, None], np.sin(ang), np.cos(ang)], axis=1)


# -- models -------------------------------------------------------------------

@dataclass
class EpsilonModel:
    """MLP noise predictor eps_theta(x_t, t) on ``dim``-dimensional data."""

    net: Mlp
    schedule: NoiseSchedule
    dim: int
    trained: bool = False

    @classmethod
    def create(cls, dim: int, schedule: NoiseSchedule, hidden=(128, 128, 128), activation: str = "relu",
               seed: int = 0) -> "EpsilonModel":
        widths = (dim + 1 + 2 * N_TIME_FREQS, *hidden, dim)
        return cls(Mlp(MlpSpec.build(widths, hidden=activation, seed=seed)), schedule, dim)

    def _inputs(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
        return np.concatenate([x, time_features(t, self.schedule.T)], axis=1)

    def predict(self, x: np.ndarray, t) -> np.ndarray:
        return self.net.apply(self._inputs(x, t))

    def forward_t(self, x: np.ndarray, t: np.ndarray) -> Tensor:
        return self.net(self._inputs(x, t))


@dataclass
class GaussianDataEpsilon:
    """Exact noise predictor for data distributed N(0, variance * I).

    E[eps | x_t] = sqrt(beta_bar_t) x_t / (alpha_bar_t variance + beta_bar_t).
    """

    schedule: NoiseSchedule
    dim: int = 1
    variance: float = 1.0
    trained: bool = True

    def predict(self, x: np.ndarray, t) -> np.ndarray:
        ab = self.schedule.alpha_bar[np.asarray(t, dtype=np.int64)]
        ab = np.reshape(ab, (-1, 1)) if np.ndim(ab) else ab
        return np.sqrt(1.0 - ab) * x / (ab * self.variance + (1.0 - ab))


class ConstantEpsilon:
    """Predicts the same vector everywhere; used to check sampler reductions."""

    def __init__(self, schedule: NoiseSchedule, value):
        self.schedule = schedule
        self.value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        self.dim = self.value.size
        self.trained = True

    def predict(self, x, t):
        return np.broadcast_to(self.value, np.shape(x)).copy()


# -- forward process ----------------------------------------------------------

def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    t = sched.check(t)
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * np.asarray(x0, dtype=np.float64) + math.sqrt(1.0 - ab) * np.asarray(eps)


def forward_conditional_logpdf(x_t, x_s, s: int, t: int, sched: NoiseSchedule) -> float:
    """log q(x_t | x_s) = log N(x_t | sqrt(alpha_bar_st) x_s, beta_bar_st)."""
    s, t = sched.check(s), sched.check(t)
    if s > t:
        raise ScheduleError("forward conditional needs s < t")
    ab = sched.alpha_bar_st(s, t)
    var = 1.0 - ab
    if var <= 0:
        raise DiffusionError("degenerate conditional")
    return gaussian_log_density(np.asarray(x_t), math.sqrt(ab) * np.asarray(x_s, dtype=np.float64), var)


def _forward_conditional_rows(x_t, x_s, s, t, sched) -> np.ndarray:
    ab = sched.alpha_bar_st(s, t)
    return gaussian_log_density_rows(x_t, math.sqrt(ab) * x_s, 1.0 - ab)


# -- training -----------------------------------------------------------------

@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)

    def moving_average(self, window: int = 100) -> np.ndarray:
        a = np.asarray(self.losses)
        if len(a) < window:
            return np.array([a.mean()]) if len(a) else a
        c = np.cumsum(np.concatenate([[0.0], a]))
        return (c[window:] - c[:-window]) / window


def train_epsilon(model: EpsilonModel, data: np.ndarray, iters: int, batch: int = 256, lr: float = 1e-3,
                  rng: Rng | None = None, lr_final: float | None = None) -> TrainTrace:
    """Minimise E ||eps - eps_theta(x_t, t)||^2 (mean over elements), t uniform on 1..T.

    The learning rate decays linearly from ``lr`` to ``lr_final`` (default
    ``lr / 10``) over the run.
    """
    rng = rng or Rng(0)
    data = np.asarray(getattr(data, "points", data), dtype=np.float64)
    T = model.schedule.T
    opt = Adam(model.net.parameters(), lr=lr)
    lr_final = lr / 10 if lr_final is None else lr_final
    trace = TrainTrace()
    sqrt_ab = np.sqrt(model.schedule.alpha_bar)
    sqrt_bb = np.sqrt(model.schedule.beta_bar)
    for it in range(iters):
        idx = rng.integers(0, len(data), size=batch)
        t = rng.integers(1, T + 1, size=batch)
        eps = rng.normal(size=(batch, model.dim))
        x0 = data[idx]
        xt = sqrt_ab[t, None] * x0 + sqrt_bb[t, None] * eps
        opt.zero_grad()
        loss = (model.forward_t(xt, t) - eps).square().mean()
        value = loss.item()
        if not math.isfinite(value) or value > 1e3:
            raise DiffusionError("training diverged")
        loss.backward()
        frac = it / max(iters - 1, 1)
        opt.step(lr + (lr_final - lr) * frac)
        trace.losses.append(value)
    if iters > 0:
        model.trained = True
    return trace


# -- backward process -----------------------------------------------------------

def backward_mean(x_t: np.ndarray, s: int, t: int, model, eps: np.ndarray | None = None) -> np.ndarray:
    """mu(x_s | x_t) = (x_t - beta_bar_st / sqrt(beta_bar_t) * eps) / sqrt(alpha_bar_st)."""
    sched = model.schedule
    s, t = sched.check(s), sched.check(t)
    if s >= t:
        raise ScheduleError("backward mean needs s < t")
    bb_t = sched.beta_bar[t]
    if bb_t <= 0:
        raise DiffusionError("beta_bar_t is zero at t=0")
    if eps is None:
        eps = model.predict(x_t, t)
    ab_st = sched.alpha_bar_st(s, t)
    return (x_t - (1.0 - ab_st) / math.sqrt(bb_t) * eps) / math.sqrt(ab_st)


def backward_variance(s: int, t: int, choice: str, sched: NoiseSchedule) -> float:
    s, t = sched.check(s), sched.check(t)
    if s >= t:
        raise ScheduleError("backward variance needs s < t")
    bb_st = sched.beta_bar_st(s, t)
    if choice == "beta_st":
        return bb_st
    if choice == "tilde":
        return float(sched.beta_bar[s] * bb_st / sched.beta_bar[t])
    raise ValueError(f"unknown variance choice {choice!r}; expected one of {VARIANCE_CHOICES}")


def ddim_step(x_t: np.ndarray, eps: np.ndarray, s: int, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic step: re-noise the x0 estimate to level s along the predicted noise."""
    x0 = (x_t - math.sqrt(sched.beta_bar[t]) * eps) / math.sqrt(sched.alpha_bar[t])
    return math.sqrt(sched.alpha_bar[s]) * x0 + math.sqrt(sched.beta_bar[s]) * eps


def base_step(x_t, eps, s: int, t: int, model, mode: str) -> np.ndarray:
    """Noise-free backward move from t to s given a noise prediction (``s == t`` is identity)."""
    if s == t:
        return x_t
    if mode == "ddpm":
        return backward_mean(x_t, s, t, model, eps)
    if mode == "ddim":
        return ddim_step(x_t, eps, s, t, model.schedule)
    raise ValueError(f"unknown sampling mode {mode!r}; expected one of {MODES}")


def _initial_noise(model, n: int, rng: Rng, x_T):
    if x_T is not None:
        return np.array(x_T, dtype=np.float64).reshape(-1, model.dim)
    return rng.spawn("x_T").normal(size=(n, model.dim))


def _add_noise(x, s, t, model, mode, variance, rng: Rng):
    # DDPM adds backward noise on every step except the last one into t=0
    if mode != "ddpm" or s == 0:
        return x
    var = backward_variance(s, t, variance, model.schedule)
    return x + math.sqrt(var) * rng.spawn(f"step/{t}").normal(size=x.shape)


def sample(model, h: int, mode: str = "ddpm", n: int = 1000, rng: Rng | None = None,
           variance: str = "beta_st", x_T: np.ndarray | None = None) -> np.ndarray:
    """Iterate the stride-``h`` backward chain from x_T ~ N(0, I) down to t = 0."""
    if mode not in MODES:
        raise ValueError(f"unknown sampling mode {mode!r}; expected one of {MODES}")
    rng = rng or Rng(0)
    grid = time_grid(model.schedule.T, h)
    x = _initial_noise(model, n, rng, x_T)
    for s, t in zip(reversed(grid[:-1]), reversed(grid[1:])):
        eps = model.predict(x, t)
        x = _add_noise(base_step(x, eps, s, t, model, mode), s, t, model, mode, variance, rng)
    return x


def _predict(model, x, t):
    # the noise predictor is only trained for t >= 1
    return model.predict(x, max(t, 1))


def rk4_sample(model, h: int, inference: str = "ddim", n: int = 1000, rng: Rng | None = None,
               variance: str = "beta_st", x_T: np.ndarray | None = None,
               multipliers: bool = False) -> np.ndarray:
    """Backward sampling with a Runge-Kutta combination of four noise predictions.

    Per step t -> s with half point m = t - floor((t - s) / 2)::

        k1 = eps(x_t, t)
        k2 = eps(g(x_t, k1, m), m)
        k3 = eps(g(x_t, k2, m), m)
        k4 = eps(g(x_t, k3, s), s)
        x_s = g(x_t, (k1 + 2 k2 + 2 k3 + k4) / 6, s)

    where ``g`` is the noise-free base step of ``inference`` (plus backward
    noise on the final move for DDPM). With ``multipliers`` the moving steps
    carry the classic h/2, h and h/6 factors. A step whose half point
    coincides with t (h = 1) falls back to the base sampler step.
    """
    if inference not in MODES:
        raise ValueError(f"unknown sampling mode {inference!r}; expected one of {MODES}")
    rng = rng or Rng(0)
    grid = time_grid(model.schedule.T, h)
    x = _initial_noise(model, n, rng, x_T)
    for s, t in zip(reversed(grid[:-1]), reversed(grid[1:])):
        step = t - s
        m = t - step // 2
        k1 = _predict(model, x, t)
        if m == t:
            eps = k1
        else:
            c_half, c_full, c_comb = (step / 2, step, step / 6) if multipliers else (1.0, 1.0, 1.0)
            k2 = _predict(model, base_step(x, c_half * k1, m, t, model, inference), m)
            k3 = _predict(model, base_step(x, c_half * k2, m, t, model, inference), m)
            k4 = _predict(model, base_step(x, c_full * k3, s, t, model, inference), s)
            eps = c_comb * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not multipliers:
                eps = eps / 6.0
        x = _add_noise(base_step(x, eps, s, t, model, inference), s, t, model, inference, variance, rng)
    return x


def rk4_integrate(f, x0, t0: float, t1: float, h: float):
    """Classic fourth-order Runge-Kutta for dx/dt = f(x, t) from t0 to t1."""
    n_steps = int(round((t1 - t0) / h))
    x, t = x0, t0
    for _ in range(n_steps):
        k1 = f(x, t)
        k2 = f(x + h / 2 * k1, t + h / 2)
        k3 = f(x + h / 2 * k2, t + h / 2)
        k4 = f(x + h * k3, t + h)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t + h
    return x


def empirical_order(f, x0, t1: float, exact: float, steps=(0.2, 0.1, 0.05, 0.025)) -> float:
    """Log-log slope of global error against step size."""
    errs = [abs(rk4_integrate(f, x0, 0.0, t1, h) - exact) for h in steps]
    slope, _ = np.polyfit(np.log(steps), np.log(errs), 1)
    return float(slope)


# -- log-probability -------------------------------------------------------------

@dataclass
class LogProbReport:
    """Per-sample, per-round terms of log q(x0) = log p(x_T) - sum_fwd + sum_bwd."""

    log_pxT: np.ndarray  # (n, rounds)
    sum_fwd: np.ndarray  # sum of log q(x_t | x_s)
    sum_bwd: np.ndarray  # sum of log p_theta(x_s | x_t)
    h: int
    dim: int

    @property
    def total(self) -> np.ndarray:
        return self.log_pxT - self.sum_fwd + self.sum_bwd

    @property
    def rounds(self) -> int:
        return self.log_pxT.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.total.mean(axis=1)

    @property
    def std(self) -> np.ndarray:
        return self.total.std(axis=1)

    def log10_mean(self) -> np.ndarray:
        """Mean log-probability in base 10."""
        return self.mean / math.log(10.0)

    def per_dim_nll(self) -> np.ndarray:
        return -self.mean / self.dim

    def to_csv(self, path):
        """Write one line per (sample, round) with columns ``CSV_COLUMNS``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for i, k, *vals in self.rows():
                w.writerow([i, k, *(repr(float(v)) for v in vals)])
        return path

    def to_summary_csv(self, path):
        """Write one line per sample: mean and std over rounds of each term."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        parts = (self.log_pxT, self.sum_fwd, self.sum_bwd, self.total)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            for i in range(len(self.total)):
                vals = [stat(p[i]) for p in parts for stat in (np.mean, np.std)]
                w.writerow([i, self.rounds, *(repr(float(v)) for v in vals)])
        return path

    def rows(self):
        """(sample_id, round, log_pxT, sum_fwd, sum_bwd, total) tuples, sample-major."""
        total = self.total
        n, r = total.shape
        for i in range(n):
            for k in range(r):
                yield i, k, self.log_pxT[i, k], self.sum_fwd[i, k], self.sum_bwd[i, k], total[i, k]


def log_prob(model, x0: np.ndarray, h: int = 1, rounds: int = 100, rng: Rng | None = None,
             variance: str = "beta_st") -> LogProbReport:
    """Estimate log q(x0) per sample by simulating the forward chain ``rounds`` times.

    Each round draws one forward trajectory x_0 -> x_T on the stride-``h``
    grid and accumulates the log-density of x_T under N(0, I), the forward
    conditionals, and the modelled backward conditionals on that trajectory.
    """
    if not getattr(model, "trained", False):
        raise DiffusionError("model is untrained")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    rng = rng or Rng(0)
    x0 = np.asarray(getattr(x0, "points", x0), dtype=np.float64).reshape(-1, model.dim)
    n = len(x0)
    # one stream per round, shared by every sample in the batch: a sample's
    # estimate depends neither on round scheduling nor on its batch-mates
    streams = [rng.spawn(f"round/{r}") for r in range(rounds)]
    chunk = max(1, LOGPROB_CHUNK_ROWS // max(n, 1))
    parts = [_log_prob_rounds(model, x0, h, streams[i:i + chunk], variance) for i in range(0, rounds, chunk)]
    pxT, fwd, bwd = (np.concatenate([p[j] for p in parts], axis=1) for j in range(3))
    return LogProbReport(pxT, fwd, bwd, h, model.dim)


def _log_prob_rounds(model, x0: np.ndarray, h: int, streams: list, variance: str):
    """(log p(x_T), sum_fwd, sum_bwd), each (n, len(streams)), for one block of rounds."""
    sched = model.schedule
    n, rounds = len(x0), len(streams)
    grid = time_grid(sched.T, h)
    n_steps = len(grid) - 1
    noise = np.stack([s.normal(size=(n_steps, model.dim)) for s in streams], axis=1)
    noise = np.repeat(noise, n, axis=1)
    x_s = np.tile(x0, (rounds, 1))
    sum_fwd = np.zeros(rounds * n)
    sum_bwd = np.zeros(rounds * n)
    for k, (s, t) in enumerate(zip(grid[:-1], grid[1:])):
        ab = sched.alpha_bar_st(s, t)
        x_t = math.sqrt(ab) * x_s + math.sqrt(1.0 - ab) * noise[k].reshape(-1, model.dim)
        sum_fwd += _forward_conditional_rows(x_t, x_s, s, t, sched)
        var = backward_variance(s, t, variance, sched)
        if var <= 0:
            raise DiffusionError("degenerate backward variance; use the beta_st choice")
        mu = backward_mean(x_t, s, t, model)
        sum_bwd += gaussian_log_density_rows(x_s, mu, var)
        x_s = x_t
    log_pxT = standard_normal_log_density_rows(x_s)
    shape = (rounds, n)
    return log_pxT.reshape(shape).T, sum_fwd.reshape(shape).T, sum_bwd.reshape(shape).T


def mean_nn_distance(samples: np.ndarray, reference: np.ndarray, chunk: int = 2048) -> float:
    """Mean Euclidean distance from each sample to its nearest reference point."""
    samples = np.asarray(samples, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    ref_sq = np.sum(reference * reference, axis=1)
    out = []
    for i in range(0, len(samples), chunk):
        a = samples[i:i + chunk]
        d2 = np.sum(a * a, axis=1)[:, None] - 2.0 * a @ reference.T + ref_sq[None, :]
        out.append(np.sqrt(np.maximum(d2.min(axis=1), 0.0)))
    return float(np.concatenate(out).mean())


def save_model(path, model: EpsilonModel, seed: int = 0, meta: dict | None = None):
    from .core import Checkpoint, save_checkpoint

    meta = dict(meta or {})
    meta.update({"dim": model.dim, "trained": model.trained})
    return save_checkpoint(path, Checkpoint("diffusion", seed, {"eps": model.net},
                                            {"alpha_bar": model.schedule.alpha_bar}, meta))


def load_model(path) -> EpsilonModel:
    from .core import load_checkpoint

    ck = load_checkpoint(path, kind="diffusion")
    return EpsilonModel(ck.networks["eps"], NoiseSchedule.from_array(ck.arrays["alpha_bar"]),
                        int(ck.meta["dim"]), bool(ck.meta.get("trained", False)))


__all__ = [
    "ConstantEpsilon", "DiffusionError", "EpsilonModel", "GaussianDataEpsilon", "LogProbReport", "NoiseSchedule",
    "ScheduleError", "TrainTrace", "backward_mean", "backward_variance", "base_step", "ddim_step",
    "empirical_order", "forward_conditional_logpdf", "forward_sample", "log_prob", "mean_nn_distance",
    "rk4_integrate", "rk4_sample", "sample", "schedule_linear", "time_features", "time_grid", "train_epsilon",
    "load_model", "save_model", "CSV_COLUMNS", "SUMMARY_COLUMNS", "LOG_2PI", "MODES", "SCHEDULES", "VARIANCE_CHOICES", "schedule_cosine",
]

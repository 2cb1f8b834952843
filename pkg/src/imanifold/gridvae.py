"""VAE with an equal-weight Gaussian-mixture prior on a Cartesian grid.

The KL term is either the dynamic nearest-cluster KL (only the grid centre
closest to the posterior mean counts) or a one-sample Monte-Carlo KL
against the full mixture. Guided training replaces the rounded centre with
a known target centre on some or all latent dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Adam, Mlp, MlpSpec, Rng, Tensor, concat
from .core.density import LOG_2PI

MODES = ("unsupervised", "guided", "partial")
KL_KINDS = ("nearest", "mog")
MAX_COMPONENTS = 10_000
OBS_VARIANCE = 0.1
LOG_SIGMA_BOUNDS = (math.log(1e-4), math.log(1e2))


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Per-dimension centre lists, prior std and guidance mode.

    ``guided_mask[i]`` marks dimension ``i`` as guided in ``partial`` mode.
    """

    centers: tuple[tuple[float, ...], ...]
    sigma0: float
    mode: str = "unsupervised"
    guided_mask: tuple[bool, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(tuple(float(c) for c in cs) for cs in self.centers))
        if not self.centers:
            raise GridError("grid needs at least one dimension")
        for cs in self.centers:
            if len(cs) == 0:
                raise GridError("empty grid dim")
            if np.any(np.diff(cs) <= 0):
                raise GridError("grid centres must be strictly increasing")
        if not self.sigma0 > 0:
            raise GridError("sigma0 must be positive")
        if self.mode not in MODES:
            raise GridError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "partial":
            if self.guided_mask is None or len(self.guided_mask) != self.n_dims:
                raise GridError("partial mode needs one guided flag per dimension")
            object.__setattr__(self, "guided_mask", tuple(bool(m) for m in self.guided_mask))

    @classmethod
    def uniform(cls, n_dims: int, lo: int, hi: int, sigma0: float, mode: str = "unsupervised",
                guided_mask=None) -> "GridSpec":
        """Integer centres lo..hi on every dimension."""
        return cls(tuple(tuple(range(lo, hi + 1)) for _ in range(n_dims)), sigma0, mode, guided_mask)

    @property
    def n_dims(self) -> int:
        return len(self.centers)

    @property
    def n_components(self) -> int:
        return int(np.prod([len(c) for c in self.centers], dtype=np.float64))

    @property
    def guided(self) -> np.ndarray:
        """Boolean per-dimension guidance flags implied by the mode."""
        if self.mode == "guided":
            return np.ones(self.n_dims, dtype=bool)
        if self.mode == "partial":
            return np.asarray(self.guided_mask, dtype=bool)
        return np.zeros(self.n_dims, dtype=bool)

    def to_dict(self) -> dict:
        return {"centers": [list(c) for c in self.centers], "sigma0": self.sigma0, "mode": self.mode,
                "guided_mask": None if self.guided_mask is None else list(self.guided_mask)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        mask = d.get("guided_mask")
        return cls(tuple(tuple(c) for c in d["centers"]), d["sigma0"], d["mode"],
                   None if mask is None else tuple(mask))


def round_to_grid(mu: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Nearest centre per dimension; ties go to the centre farther from zero.

    Values beyond the outermost centres clamp to them.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    if mu.shape[1] != grid.n_dims:
        raise GridError(f"expected {grid.n_dims} latent dims, got {mu.shape[1]}")
    out = np.empty_like(mu)
    for i, cs in enumerate(grid.centers):
        c = np.asarray(cs)
        d = np.abs(mu[:, i:i + 1] - c[None, :])
        ties = d == d.min(axis=1, keepdims=True)
        out[:, i] = c[np.argmax(np.where(ties, np.abs(c)[None, :], -np.inf), axis=1)]
    return out


def kl_targets(mu: np.ndarray, grid: GridSpec, mu_gt: np.ndarray | None = None) -> np.ndarray:
    """Prior centres used by the nearest-cluster KL: rounded, or ground truth on guided dims."""
    target = round_to_grid(mu, grid)
    guided = grid.guided
    if guided.any():
        if mu_gt is None:
            raise GridError("guided mode requires attribute targets")
        gt = np.atleast_2d(np.asarray(mu_gt, dtype=np.float64))
        target[:, guided] = gt[:, guided]
    return target


def kl_nearest_cluster(mu, sigma, grid: GridSpec, mu_gt=None) -> np.ndarray:
    """Row-wise KL(N(mu, diag sigma^2) || N(target, sigma0^2 I)).

    1/2 sum_i [log sigma0^2 - log sigma_i^2 - 1 + (sigma_i^2 + (mu_i - target_i)^2) / sigma0^2]
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape)
    if np.any(sigma <= 0):
        raise GridError("sigma must be positive")
    s0sq = grid.sigma0**2
    target = kl_targets(mu, grid, mu_gt)
    terms = math.log(s0sq) - np.log(sigma**2) - 1.0 + (sigma**2 + (mu - target) ** 2) / s0sq
    return 0.5 * terms.sum(axis=1)


def kl_nearest_t(mu: Tensor, log_sigma: Tensor, target: np.ndarray, sigma0: float) -> Tensor:
    s0sq = sigma0**2
    var = (log_sigma * 2.0).exp()
    terms = (log_sigma * -2.0) + (math.log(s0sq) - 1.0) + (var + (mu - target).square()) * (1.0 / s0sq)
    return terms.sum(axis=1) * 0.5


def _check_size(grid: GridSpec):
    if grid.n_components > MAX_COMPONENTS:
        raise GridError(f"grid too large: {grid.n_components} components exceed {MAX_COMPONENTS}; "
                        "use the nearest-cluster KL")


def mog_prior_log_prob(z, grid: GridSpec) -> np.ndarray:
    """Row-wise log of the equal-weight mixture density over all grid centres.

    The mixture over a Cartesian grid factorises into per-dimension mixtures,
    so the log-sum-exp runs per dimension.
    """
    _check_size(grid)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    s0sq = grid.sigma0**2
    total = np.zeros(len(z))
    for i, cs in enumerate(grid.centers):
        c = np.asarray(cs)
        a = -0.5 * (z[:, i:i + 1] - c[None, :]) ** 2 / s0sq
        m = a.max(axis=1, keepdims=True)
        total += (m[:, 0] + np.log(np.exp(a - m).sum(axis=1))) - math.log(len(c)) - 0.5 * math.log(2 * math.pi * s0sq)
    return total


def mog_prior_log_prob_t(z: Tensor, grid: GridSpec) -> Tensor:
    s0sq = grid.sigma0**2
    total = None
    for i, cs in enumerate(grid.centers):
        c = np.asarray(cs)[None, :]
        a = (z[:, i:i + 1] - c).square() * (-0.5 / s0sq)
        term = a.logsumexp(axis=1) - (math.log(len(cs)) + 0.5 * math.log(2 * math.pi * s0sq))
        total = term if total is None else total + term
    return total


def kl_mog(mu, sigma, grid: GridSpec, n_quad: int = 80) -> np.ndarray:
    """Row-wise KL(q || mixture prior) by Gauss-Hermite quadrature per dimension."""
    _check_size(grid)
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape)
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_quad)
    weights = weights / weights.sum()
    neg_entropy = -0.5 * np.sum(np.log(2 * math.pi * math.e * sigma**2), axis=1)
    cross = np.zeros(len(mu))
    for i, cs in enumerate(grid.centers):
        sub = GridSpec((cs,), grid.sigma0)
        pts = mu[:, i:i + 1] + sigma[:, i:i + 1] * nodes[None, :]
        lp = mog_prior_log_prob(pts.reshape(-1, 1), sub).reshape(pts.shape)
        cross += lp @ weights
    return neg_entropy - cross


# -- model ----------------------------------------------------------------------

@dataclass
class GridVaeModel:
    encoder: Mlp  # x -> [mu, log sigma]
    decoder: Mlp  # z -> pixel means in [0, 1]
    grid: GridSpec
    trained: bool = False

    @classmethod
    def create(cls, in_dim: int, grid: GridSpec, hidden=(256, 128), seed: int = 0) -> "GridVaeModel":
        n = grid.n_dims
        rng = Rng(seed).spawn("gridvae")
        enc = Mlp(MlpSpec.build((in_dim, *hidden, 2 * n), hidden="relu", seed=int(rng.integers(0, 2**31))))
        dec = Mlp(MlpSpec.build((n, *reversed(hidden), in_dim), hidden="relu", out="sigmoid",
                                seed=int(rng.integers(0, 2**31))))
        return cls(enc, dec, grid)

    @property
    def latent_dim(self) -> int:
        return self.grid.n_dims

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and std."""
        out = self.encoder.apply(np.asarray(x, dtype=np.float64).reshape(len(x), -1))
        n = self.latent_dim
        return out[:, :n], np.exp(np.clip(out[:, n:], *LOG_SIGMA_BOUNDS))

    def decode(self, z: np.ndarray) -> np.ndarray:
        return self.decoder.apply(np.atleast_2d(np.asarray(z, dtype=np.float64)))


def gaussian_recon_log_lik(x, x_hat, variance: float = OBS_VARIANCE) -> np.ndarray:
    x, x_hat = np.asarray(x), np.asarray(x_hat)
    d = x.shape[1]
    return -0.5 * np.sum((x - x_hat) ** 2, axis=1) / variance - 0.5 * d * math.log(2 * math.pi * variance)


@dataclass
class ElboTerms:
    loss: np.ndarray
    recon: np.ndarray
    kl: np.ndarray


def elbo(model: GridVaeModel, x: np.ndarray, rng: Rng, mu_gt=None, kl: str = "nearest") -> ElboTerms:
    """Per-sample negative ELBO parts from one reparameterised draw."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    mu, sigma = model.encode(x)
    eps = rng.normal(size=mu.shape)
    z = mu + sigma * eps
    recon = gaussian_recon_log_lik(x, model.decode(z))
    if kl == "nearest":
        k = kl_nearest_cluster(mu, sigma, model.grid, mu_gt)
    elif kl == "mog":
        log_q = np.sum(-0.5 * eps**2 - np.log(sigma) - 0.5 * LOG_2PI, axis=1)
        k = log_q - mog_prior_log_prob(z, model.grid)
    else:
        raise ValueError(f"unknown KL kind {kl!r}; expected one of {KL_KINDS}")
    loss = -recon + k
    if not np.all(np.isfinite(loss)):
        raise GridError("non-finite ELBO")
    return ElboTerms(loss, recon, k)


@dataclass
class AttributeTable:
    values: np.ndarray  # (N, K) in {0, 1}
    names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[1] != len(self.names):
            raise GridError("attribute table needs one column per name")
        if not np.all((v == 0) | (v == 1)):
            raise GridError("attribute entries must be 0 or 1")
        object.__setattr__(self, "values", v.astype(np.int64))


def factor_targets(factors: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Map integer factor labels 0..K-1 to the K centres of each dimension."""
    f = np.asarray(factors, dtype=np.int64)
    out = np.empty(f.shape, dtype=np.float64)
    for i, cs in enumerate(grid.centers[:f.shape[1]]):
        out[:, i] = np.asarray(cs)[f[:, i]]
    return out


@dataclass
class TrainSettings:
    iters: int = 30_000
    batch: int = 64
    lr: float = 1e-3
    kl: str = "nearest"
    warmup: float = 0.1  # fraction of iterations over which the KL weight ramps 0 -> 1


def train(model: GridVaeModel, images: np.ndarray, settings: TrainSettings | None = None,
          targets: np.ndarray | None = None, rng: Rng | None = None) -> list[float]:
    """Minimise the negative ELBO; ``targets`` are the guided centres per sample."""
    settings = settings or TrainSettings()
    if settings.kl not in KL_KINDS:
        raise ValueError(f"unknown KL kind {settings.kl!r}; expected one of {KL_KINDS}")
    guided = model.grid.guided
    if guided.any() and targets is None:
        raise GridError("guided mode requires attribute targets")
    if settings.kl == "mog" and guided.any():
        raise GridError("guidance applies to the nearest-cluster KL only")
    if settings.kl == "mog":
        _check_size(model.grid)
    rng = rng or Rng(0)
    x_all = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    n, d = model.latent_dim, x_all.shape[1]
    opt = Adam(model.parameters(), lr=settings.lr)
    warm = max(int(settings.warmup * settings.iters), 1)
    const = 0.5 * d * math.log(2 * math.pi * OBS_VARIANCE)
    losses = []
    for it in range(settings.iters):
        idx = rng.integers(0, len(x_all), size=settings.batch)
        x = x_all[idx]
        opt.zero_grad()
        out = model.encoder(x)
        mu = out[:, :n]
        log_sigma = out[:, n:].clip(*LOG_SIGMA_BOUNDS)
        eps = rng.normal(size=(settings.batch, n))
        z = mu + log_sigma.exp() * eps
        recon = (model.decoder(z) - x).square().sum(axis=1) * (-0.5 / OBS_VARIANCE) - const
        if settings.kl == "nearest":
            target = kl_targets(mu.data, model.grid, None if targets is None else targets[idx])
            kl = kl_nearest_t(mu, log_sigma, target, model.grid.sigma0)
        else:
            log_q = log_sigma.sum(axis=1) * -1.0 + float(-0.5 * n * LOG_2PI) + Tensor(-0.5 * np.sum(eps**2, 1))
            kl = log_q - mog_prior_log_prob_t(z, model.grid)
        weight = min(1.0, (it + 1) / warm)
        loss = (recon * -1.0 + kl * weight).mean()
        value = loss.item()
        if not math.isfinite(value):
            raise GridError("non-finite ELBO")
        loss.backward()
        opt.step()
        losses.append(value)
    if settings.iters > 0:
        model.trained = True
    return losses


# -- analysis -----------------------------------------------------------------------

def latent_traverse(model: GridVaeModel, base_z, dim: int, values) -> np.ndarray:
    """Decode ``base_z`` with coordinate ``dim`` swept over ``values``."""
    if not 0 <= dim < model.latent_dim:
        raise GridError(f"dim {dim} out of range for {model.latent_dim} latent dims")
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        return np.empty((0, model.decoder.out_dim))
    z = np.repeat(np.asarray(base_z, dtype=np.float64).reshape(1, -1), len(values), axis=0)
    z[:, dim] = values
    return model.decode(z)


def _cells(mu: np.ndarray, grid: GridSpec) -> np.ndarray:
    r = round_to_grid(mu, grid)
    _, ids = np.unique(r, axis=0, return_inverse=True)
    return ids.reshape(-1)


def cluster_purity(model: GridVaeModel, images: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose grid cell's majority label is their own label."""
    mu, _ = model.encode(images)
    return purity_from_cells(_cells(mu, model.grid), labels)


def purity_from_cells(cells: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    total = 0
    for c in np.unique(cells):
        total += np.bincount(labels[cells == c]).max()
    return total / len(labels)


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two discrete label arrays."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))


def entropy(labels: np.ndarray) -> float:
    p = np.bincount(np.unique(labels, return_inverse=True)[1].reshape(-1)) / len(labels)
    return float(-np.sum(p * np.log(p)))


@dataclass
class DisentanglementReport:
    """MI between each rounded latent coordinate (rows) and each factor (columns).

    ``normalized`` divides by the factor entropy; ``share`` divides each row
    by its sum so rows sum to 1 (rows with zero MI stay zero).
    """

    mi: np.ndarray
    normalized: np.ndarray
    share: np.ndarray
    assignment: np.ndarray  # factor index with the largest normalised MI per dim

    def rows(self):
        for i in range(self.mi.shape[0]):
            for j in range(self.mi.shape[1]):
                yield i, j, self.mi[i, j], self.normalized[i, j], self.share[i, j]


def disentanglement_from_latents(mu: np.ndarray, factors: np.ndarray, grid: GridSpec) -> DisentanglementReport:
    r = round_to_grid(mu, grid)
    factors = np.asarray(factors)
    n, k = r.shape[1], factors.shape[1]
    mi = np.array([[mutual_information(r[:, i], factors[:, j]) for j in range(k)] for i in range(n)])
    h = np.array([entropy(factors[:, j]) for j in range(k)])
    normalized = mi / np.where(h > 0, h, 1.0)[None, :]
    sums = mi.sum(axis=1, keepdims=True)
    share = np.divide(mi, sums, out=np.zeros_like(mi), where=sums > 0)
    return DisentanglementReport(mi, normalized, share, np.argmax(normalized, axis=1))


def disentanglement_report(model: GridVaeModel, images: np.ndarray, factors: np.ndarray) -> DisentanglementReport:
    if not model.trained:
        raise GridError("model is untrained")
    mu, _ = model.encode(images)
    return disentanglement_from_latents(mu, factors, model.grid)


@dataclass
class FactorProbe:
    """Softmax-regression classifiers, one per factor, on flattened images."""

    weights: list[np.ndarray]
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, images: np.ndarray, factors: np.ndarray, iters: int = 300, lr: float = 0.5) -> "FactorProbe":
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        mean, scale = x.mean(0), x.std(0) + 1e-6
        xs = np.hstack([(x - mean) / scale, np.ones((len(x), 1))])
        weights = []
        for j in range(factors.shape[1]):
            k = int(factors[:, j].max()) + 1
            onehot = np.eye(k)[factors[:, j]]
            w = np.zeros((xs.shape[1], k))
            for _ in range(iters):
                logits = xs @ w
                logits -= logits.max(1, keepdims=True)
                p = np.exp(logits)
                p /= p.sum(1, keepdims=True)
                w -= lr * xs.T @ (p - onehot) / len(xs)
            weights.append(w)
        return cls(weights, mean, scale)

    def predict(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        xs = np.hstack([(x - self.mean) / self.scale, np.ones((len(x), 1))])
        return np.stack([np.argmax(xs @ w, axis=1) for w in self.weights], axis=1)


def traversal_single_factor_rate(model: GridVaeModel, probe: FactorProbe) -> tuple[float, int]:
    """Share of steps between neighbouring centres that change exactly one probed factor.

    Every grid centre serves as a base point and every dimension is swept
    across its centres. Returns (rate, number of steps).
    """
    good = steps = 0
    grid = model.grid
    bases = np.array(np.meshgrid(*grid.centers, indexing="ij")).reshape(grid.n_dims, -1).T
    for base in bases:
        for dim, cs in enumerate(grid.centers):
            preds = probe.predict(latent_traverse(model, base, dim, cs))
            changed = (preds[1:] != preds[:-1]).sum(axis=1)
            good += int(np.sum(changed == 1))
            steps += len(changed)
    return good / steps, steps


# -- attribute-KL on a second manifold ---------------------------------------------

def nearest_neighbours(emb: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Index of each row's Euclidean nearest neighbour, excluding itself."""
    emb = np.asarray(emb, dtype=np.float64)
    sq = np.sum(emb * emb, axis=1)
    out = np.empty(len(emb), dtype=np.int64)
    for i in range(0, len(emb), chunk):
        block = emb[i:i + chunk]
        d2 = sq[i:i + chunk, None] - 2 * block @ emb.T + sq[None, :]
        d2[np.arange(len(block)), np.arange(i, i + len(block))] = np.inf
        out[i:i + chunk] = np.argmin(d2, axis=1)
    return out


def binary_kl(p: float, q: float, eps: float = 1e-6) -> float:
    """KL(Bern(p) || Bern(q)) with both parameters clamped to [eps, 1 - eps]."""
    p = min(max(p, eps), 1 - eps)
    q = min(max(q, eps), 1 - eps)
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


@dataclass
class AttrKLResult:
    """Scores sorted descending; flagged attributes carry score 0 (constant) or NaN (no support)."""

    names: list[str]
    scores: np.ndarray
    p: np.ndarray
    p_cond: np.ndarray
    flags: list[str]

    def score_of(self, name: str) -> float:
        return float(self.scores[self.names.index(name)])


def _attr_kl_raw(values: np.ndarray, nn: np.ndarray):
    p = values.mean(axis=0)
    scores, p_cond, flags = [], [], []
    for j in range(values.shape[1]):
        a = values[:, j]
        sel = values[nn, j] == 0
        if a.min() == a.max():
            scores.append(0.0)
            p_cond.append(float(a[sel].mean()) if sel.any() else math.nan)
            flags.append("constant")
        elif not sel.any():
            scores.append(math.nan)
            p_cond.append(math.nan)
            flags.append("no support")
        else:
            pc = float(a[sel].mean())
            scores.append(binary_kl(float(p[j]), pc))
            p_cond.append(pc)
            flags.append("")
    return np.array(scores), p, np.array(p_cond), flags


def manifold_attr_kl(emb: np.ndarray, attrs: AttributeTable) -> AttrKLResult:
    """Per attribute: KL between p(a) and p(a | nearest neighbour has a = 0)."""
    emb = np.asarray(emb, dtype=np.float64)
    if len(emb) != len(attrs.values):
        raise GridError("embedding rows must match attribute rows")
    if len(emb) < 2:
        raise GridError("need at least two samples")
    scores, p, pc, flags = _attr_kl_raw(attrs.values, nearest_neighbours(emb))
    order = sorted(range(len(scores)), key=lambda j: (-np.nan_to_num(scores[j], nan=-np.inf), j))
    return AttrKLResult([attrs.names[j] for j in order], scores[order], p[order], pc[order],
                        [flags[j] for j in order])


@dataclass
class PermutationNull:
    mean: np.ndarray  # per attribute, in table order
    std: np.ndarray
    names: tuple[str, ...]

    def within(self, result: AttrKLResult, k: float = 3.0) -> dict[str, bool]:
        out = {}
        for name, s in zip(result.names, result.scores):
            j = self.names.index(name)
            out[name] = bool(abs(s - self.mean[j]) <= k * self.std[j]) if math.isfinite(s) else True
        return out


def permutation_null(emb: np.ndarray, attrs: AttributeTable, n_perm: int = 200, rng: Rng | None = None) -> PermutationNull:
    """Attribute-KL scores with attribute rows shuffled relative to the embedding."""
    rng = rng or Rng(0)
    nn = nearest_neighbours(emb)
    draws = []
    for b in range(n_perm):
        perm = rng.spawn(f"perm/{b}").permutation(len(emb))
        draws.append(_attr_kl_raw(attrs.values[perm], nn)[0])
    draws = np.array(draws)
    return PermutationNull(np.nanmean(draws, 0), np.nanstd(draws, 0), attrs.names)


def planted_embedding(images: np.ndarray, n_attrs: int = 8, planted: int = 3, dim: int = 16,
                      strength: float = 4.0, seed: int = 0) -> tuple[np.ndarray, AttributeTable]:
    """Random projection of images plus an offset along one direction for the planted attribute.

    Attribute frequencies are drawn from U(0.2, 0.8); only attribute
    ``planted`` influences the embedding.
    """
    rng = Rng(seed).spawn("planted")
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    proj = rng.normal(size=(x.shape[1], dim)) / math.sqrt(x.shape[1])
    emb = (x - x.mean(0)) @ proj
    emb /= emb.std() + 1e-12
    freq = rng.uniform(0.2, 0.8, size=n_attrs)
    values = (rng.uniform(size=(len(x), n_attrs)) < freq[None, :]).astype(np.int64)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    emb = emb + strength * values[:, planted:planted + 1] * direction[None, :]
    return emb, AttributeTable(values, tuple(f"attr{j}" for j in range(n_attrs)))


def save_model(path, model: GridVaeModel, seed: int = 0):
    from .core import Checkpoint, save_checkpoint

    return save_checkpoint(path, Checkpoint("gridvae", seed, {"encoder": model.encoder, "decoder": model.decoder},
                                            {}, {"grid": model.grid.to_dict(), "trained": model.trained}))


def load_model(path) -> GridVaeModel:
    from .core import load_checkpoint

    ck = load_checkpoint(path, kind="gridvae")
    return GridVaeModel(ck.networks["encoder"], ck.networks["decoder"], GridSpec.from_dict(ck.meta["grid"]),
                        bool(ck.meta["trained"]))

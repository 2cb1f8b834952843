"""VAE classifier with a latent classification head, patch and l-inf attacks,
and test-time purification by gradient ascent on the ELBO.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Adam, Mlp, MlpSpec, Rng, Tensor, parameter, per_item_normals
from .core.density import LOG_2PI

OBS_VARIANCE = 0.1
LOG_SIGMA_BOUNDS = (math.log(1e-4), math.log(1e2))
NORMS = ("linf", "patch")
MOMENTUM = ("plain", "nesterov")
BOUNDS = ("bounded", "patch", "global")
NAG_DECAY = 0.9
TABLE_COLUMNS = ("variant", "clean", "adversarial", "purified_clean", "purified_adversarial")


class DefenseError(ValueError):
    pass


def _apply_const(net: Mlp, h: Tensor) -> Tensor:
    """Forward pass that differentiates only with respect to the input."""
    from .core.nn import _act_tensor

    for i, act in enumerate(net.spec.activations):
        h = _act_tensor(act, h @ net.params[2 * i].data + net.params[2 * i + 1].data)
    return h


@dataclass
class VaeClassifier:
    """Gaussian VAE with a standard-normal prior and a classifier on the latent code."""

    encoder: Mlp  # x -> [mu, log sigma]
    decoder: Mlp  # z -> pixel means
    head: Mlp  # z -> class logits
    lam: float = 1.0
    trained: bool = False

    @classmethod
    def create(cls, in_dim: int = 256, latent_dim: int = 8, n_classes: int = 2, hidden: int = 128,
               lam: float = 1.0, seed: int = 0) -> "VaeClassifier":
        rng = Rng(seed).spawn("vae-classifier")
        seeds = [int(s) for s in rng.integers(0, 2**31, size=3)]
        enc = Mlp(MlpSpec.build((in_dim, hidden, hidden, 2 * latent_dim), hidden="relu", seed=seeds[0]))
        dec = Mlp(MlpSpec.build((latent_dim, hidden, hidden, in_dim), hidden="relu", out="sigmoid", seed=seeds[1]))
        head = Mlp(MlpSpec.build((latent_dim, 32, n_classes), hidden="tanh", seed=seeds[2]))
        return cls(enc, dec, head, lam)

    @property
    def latent_dim(self) -> int:
        return self.decoder.in_dim

    @property
    def n_classes(self) -> int:
        return self.head.out_dim

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters() + self.head.parameters()

    def encode(self, x) -> tuple[np.ndarray, np.ndarray]:
        out = self.encoder.apply(_flat(x))
        m = self.latent_dim
        return out[:, :m], np.exp(np.clip(out[:, m:], *LOG_SIGMA_BOUNDS))

    def reconstruct(self, x) -> np.ndarray:
        return self.decoder.apply(self.encode(x)[0])

    def predict(self, x) -> np.ndarray:
        """Class decisions from the posterior mean."""
        return np.argmax(self.head.apply(self.encode(x)[0]), axis=1)

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))


def _flat(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1)


def _terms_t(model: VaeClassifier, x: Tensor, eps: np.ndarray, const: bool):
    """Per-sample (ELBO, logits) graph under one reparameterised draw."""
    enc = _apply_const(model.encoder, x) if const else model.encoder(x)
    m = model.latent_dim
    mu, log_sigma = enc[:, :m], enc[:, m:].clip(*LOG_SIGMA_BOUNDS)
    z = mu + log_sigma.exp() * eps
    x_hat = _apply_const(model.decoder, z) if const else model.decoder(z)
    d = x.shape[1]
    recon = (x_hat - x).square().sum(axis=1) * (-0.5 / OBS_VARIANCE) - 0.5 * d * math.log(2 * math.pi * OBS_VARIANCE)
    kl = ((log_sigma * 2.0).exp() + mu.square() - 1.0 - log_sigma * 2.0).sum(axis=1) * 0.5
    logits = _apply_const(model.head, z) if const else model.head(z)
    return recon - kl, logits


def elbo_estimate(model: VaeClassifier, x, eps: np.ndarray) -> np.ndarray:
    """Per-sample ELBO with the given standard-normal draws, shape (k, n, m) or (n, m)."""
    x = _flat(x)
    eps = eps[None] if eps.ndim == 2 else eps
    mu, sigma = model.encode(x)
    kl = 0.5 * np.sum(sigma**2 + mu**2 - 1.0 - 2.0 * np.log(sigma), axis=1)
    recon = np.zeros(len(x))
    for e in eps:
        x_hat = model.decoder.apply(mu + sigma * e)
        recon += -0.5 * np.sum((x_hat - x) ** 2, axis=1) / OBS_VARIANCE
    recon = recon / len(eps) - 0.5 * x.shape[1] * math.log(2 * math.pi * OBS_VARIANCE)
    return recon - kl


@dataclass
class JointTrace:
    elbo: list[float] = field(default_factory=list)
    ce: list[float] = field(default_factory=list)


def train_joint(model: VaeClassifier, images, labels, iters: int = 20_000, batch: int = 64, lr: float = 1e-3,
                rng: Rng | None = None, lam: float | None = None) -> JointTrace:
    """Maximise ELBO + lam * E[y^T log h(z)] over encoder, decoder and head."""
    lam = model.lam if lam is None else float(lam)
    if lam < 0:
        raise DefenseError("lambda must be non-negative")
    model.lam = lam
    rng = rng or Rng(0)
    x_all, y_all = _flat(images), np.asarray(labels, dtype=np.int64)
    if len(x_all) != len(y_all):
        raise DefenseError("images and labels differ in length")
    onehot = np.eye(model.n_classes)[y_all]
    opt = Adam(model.parameters(), lr=lr)
    trace = JointTrace()
    for _ in range(iters):
        idx = rng.integers(0, len(x_all), size=batch)
        opt.zero_grad()
        elbo, logits = _terms_t(model, Tensor(x_all[idx]), rng.normal(size=(batch, model.latent_dim)), const=False)
        ce = (logits.log_softmax(axis=1) * onehot[idx]).sum(axis=1) * -1.0
        loss = (elbo * -1.0 + ce * lam).mean()
        value = loss.item()
        if not math.isfinite(value) or value > 1e6:
            raise DefenseError("training diverged")
        loss.backward()
        opt.step()
        trace.elbo.append(float(elbo.data.mean()))
        trace.ce.append(float(ce.data.mean()))
    if iters > 0:
        model.trained = True
    return trace


# -- attacks ------------------------------------------------------------------

@dataclass(frozen=True)
class AttackSpec:
    """Sign-gradient ascent on cross-entropy; ``patch`` is (row, col, height, width)."""

    norm: str = "patch"
    patch: tuple[int, int, int, int] | None = (0, 4, 4, 8)
    iters: int = 512
    step: float = 4 / 255
    eps: float | None = None
    momentum: str = "plain"
    side: int = 16

    def __post_init__(self):
        if self.norm not in NORMS:
            raise DefenseError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if self.momentum not in MOMENTUM:
            raise DefenseError(f"unknown momentum {self.momentum!r}; expected one of {MOMENTUM}")
        if not self.step > 0:
            raise DefenseError("step size must be positive")
        if self.iters < 0:
            raise DefenseError("iterations must be non-negative")
        if self.norm == "patch":
            patch_mask(self.patch, self.side)
        elif self.eps is None or self.eps < 0:
            raise DefenseError("linf attack needs a non-negative budget eps")


def patch_mask(patch, side: int = 16) -> np.ndarray:
    """Flat boolean mask of a rectangle; raises if it leaves the image."""
    if patch is None:
        raise DefenseError("patch mode needs a rectangle")
    r, c, h, w = (int(v) for v in patch)
    if h <= 0 or w <= 0 or r < 0 or c < 0 or r + h > side or c + w > side:
        raise DefenseError(f"patch {tuple(patch)} outside the {side}x{side} image")
    mask = np.zeros((side, side), dtype=bool)
    mask[r:r + h, c:c + w] = True
    return mask.reshape(-1)


def _ce_input_grad(model: VaeClassifier, x: np.ndarray, y: np.ndarray, eps: np.ndarray) -> np.ndarray:
    xt = parameter(x)
    _, logits = _terms_t(model, xt, eps, const=True)
    ce = (logits.log_softmax(axis=1) * np.eye(model.n_classes)[y]).sum() * -1.0
    ce.backward()
    return xt.grad


def attack(model: VaeClassifier, x, y, spec: AttackSpec, seed: int = 0, indices=None) -> np.ndarray:
    """Craft adversarial inputs; noise for sample i depends only on (seed, indices[i])."""
    x0 = _flat(x)
    y = np.asarray(y, dtype=np.int64)
    if spec.iters == 0:
        return x0.copy()
    indices = np.arange(len(x0)) if indices is None else np.asarray(indices)
    noise = per_item_normals(seed, "attack", indices, (spec.iters, model.latent_dim))
    support = patch_mask(spec.patch, spec.side)[None, :] if spec.norm == "patch" else None
    x_adv = x0.copy()
    velocity = np.zeros_like(x0)
    for k in range(spec.iters):
        eps = noise[:, k]
        if spec.momentum == "nesterov":
            look = np.clip(x_adv + spec.step * NAG_DECAY * velocity, 0.0, 1.0)
            g = _ce_input_grad(model, look, y, eps)
            velocity = NAG_DECAY * velocity + g / (np.sum(np.abs(g), axis=1, keepdims=True) + 1e-12)
            direction = np.sign(velocity)
        else:
            direction = np.sign(_ce_input_grad(model, x_adv, y, eps))
        x_adv = x_adv + spec.step * direction
        x_adv = _project(x_adv, x0, support, spec.eps if spec.norm == "linf" else None)
    return x_adv


def _project(x: np.ndarray, x0: np.ndarray, support, bound: float | None) -> np.ndarray:
    if support is not None:
        x = np.where(support, x, x0)
    if bound is not None:
        x = np.clip(x, x0 - bound, x0 + bound)
    return np.clip(x, 0.0, 1.0)


# -- purification -----------------------------------------------------------------

@dataclass(frozen=True)
class PurifySpec:
    """Sign-gradient ascent on the ELBO within a feasible set.

    ``bounded`` keeps ||eps||_inf <= eps_th everywhere, ``patch`` frees the
    pixels inside ``patch`` only (optionally also ``eps_th`` globally), and
    ``global`` frees every pixel.
    """

    iters: int = 256
    step: float = 4 / 255
    bound: str = "patch"
    eps_th: float | None = None
    patch: tuple[int, int, int, int] | None = (0, 4, 4, 8)
    draws: int = 1
    eval_draws: int = 8
    side: int = 16

    def __post_init__(self):
        if self.bound not in BOUNDS:
            raise DefenseError(f"unknown bound mode {self.bound!r}; expected one of {BOUNDS}")
        if self.bound == "bounded" and (self.eps_th is None or self.eps_th < 0):
            raise DefenseError("bounded purification needs eps_th")
        if self.bound == "patch":
            patch_mask(self.patch, self.side)
        if not self.step > 0 or self.iters < 0 or self.draws < 1 or self.eval_draws < 1:
            raise DefenseError("invalid purification settings")


@dataclass
class PurifyResult:
    x: np.ndarray  # best iterate per sample
    best_elbo: np.ndarray  # (iters + 1, n) best-so-far ELBO
    latent_path: np.ndarray  # (iters + 1, n, m) posterior means of the iterates


def _elbo_input_grad(model: VaeClassifier, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    xt = parameter(x)
    total = None
    for e in eps:
        elbo, _ = _terms_t(model, xt, e, const=True)
        total = elbo.sum() if total is None else total + elbo.sum()
    total.backward()
    return xt.grad


def purify(model: VaeClassifier, x_adv, spec: PurifySpec, seed: int = 0, indices=None) -> PurifyResult:
    """Move inputs towards higher ELBO; the best iterate under a fixed-draw ELBO is returned."""
    x0 = _flat(x_adv)
    n, m = len(x0), model.latent_dim
    indices = np.arange(n) if indices is None else np.asarray(indices)
    eval_eps = np.moveaxis(per_item_normals(seed, "purify/eval", indices, (spec.eval_draws, m)), 1, 0)
    best_x = x0.copy()
    best = elbo_estimate(model, x0, eval_eps)
    history, path = [best.copy()], [model.encode(x0)[0]]
    if spec.iters:
        noise = per_item_normals(seed, "purify", indices, (spec.iters, spec.draws, m))
    support = None
    if spec.bound == "patch":
        support = patch_mask(spec.patch, spec.side)[None, :]
    bound = spec.eps_th if spec.bound in ("bounded", "patch") else None
    x = x0.copy()
    for k in range(spec.iters):
        g = _elbo_input_grad(model, x, np.moveaxis(noise[:, k], 1, 0))
        x = _project(x + spec.step * np.sign(g), x0, support, bound)
        value = elbo_estimate(model, x, eval_eps)
        better = value > best
        best = np.where(better, value, best)
        best_x[better] = x[better]
        history.append(best.copy())
        path.append(model.encode(x)[0])
    return PurifyResult(best_x, np.array(history), np.array(path))


# -- evaluation ----------------------------------------------------------------------

@dataclass
class DefenseRow:
    variant: str
    clean: float
    adversarial: float
    purified_clean: float
    purified_adversarial: float


@dataclass
class DefenseReport:
    rows: list[DefenseRow]
    samples: dict[str, dict[str, np.ndarray]]  # per variant: inputs, reconstructions, predictions

    def row(self, variant: str) -> DefenseRow:
        return next(r for r in self.rows if r.variant == variant)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_COLUMNS)
            for r in self.rows:
                w.writerow([r.variant] + [repr(float(getattr(r, c))) for c in TABLE_COLUMNS[1:]])
        return path


def evaluate_defense(model: VaeClassifier, images, labels, attack_spec: AttackSpec, purify_spec: PurifySpec,
                     seed: int = 0, variants=MOMENTUM) -> DefenseReport:
    """Accuracies in percent for clean, attacked and purified inputs per attack variant."""
    x, y = _flat(images), np.asarray(labels, dtype=np.int64)
    clean_acc = 100.0 * model.accuracy(x, y)
    pfy_clean = purify(model, x, purify_spec, seed=seed).x
    pfy_clean_acc = 100.0 * model.accuracy(pfy_clean, y)
    rows, samples = [], {}
    for name in variants:
        spec = AttackSpec(**{**attack_spec.__dict__, "momentum": name})
        x_adv = attack(model, x, y, spec, seed=seed)
        x_pfy = purify(model, x_adv, purify_spec, seed=seed).x
        rows.append(DefenseRow(name, clean_acc, 100.0 * model.accuracy(x_adv, y), pfy_clean_acc,
                               100.0 * model.accuracy(x_pfy, y)))
        samples[name] = {
            "clean": x, "adversarial": x_adv, "purified": x_pfy,
            "recon_clean": model.reconstruct(x), "recon_adversarial": model.reconstruct(x_adv),
            "recon_purified": model.reconstruct(x_pfy),
            "pred_clean": model.predict(x), "pred_adversarial": model.predict(x_adv),
            "pred_purified": model.predict(x_pfy), "labels": y,
        }
    return DefenseReport(rows, samples)


def semantic_consistency(model: VaeClassifier, x_pfy, y, class_means: np.ndarray) -> float:
    """Among correctly classified purified inputs, the share whose reconstruction is nearer
    (L2) to its own class mean image than to every other class mean."""
    y = np.asarray(y, dtype=np.int64)
    ok = model.predict(x_pfy) == y
    if not ok.any():
        return 0.0
    rec = model.reconstruct(_flat(x_pfy)[ok])
    d = np.linalg.norm(rec[:, None, :] - class_means[None], axis=2)
    own = d[np.arange(len(rec)), y[ok]]
    d[np.arange(len(rec)), y[ok]] = np.inf
    return float(np.mean(own < d.min(axis=1)))


def save_model(path, model: VaeClassifier, seed: int = 0):
    from .core import Checkpoint, save_checkpoint

    nets = {"encoder": model.encoder, "decoder": model.decoder, "head": model.head}
    return save_checkpoint(path, Checkpoint("vae_classifier", seed, nets, {},
                                            {"lam": model.lam, "trained": model.trained}))


def load_model(path) -> VaeClassifier:
    from .core import load_checkpoint

    ck = load_checkpoint(path, kind="vae_classifier")
    n = ck.networks
    return VaeClassifier(n["encoder"], n["decoder"], n["head"], float(ck.meta["lam"]), bool(ck.meta["trained"]))

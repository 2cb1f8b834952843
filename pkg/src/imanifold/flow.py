"""Affine coupling flows and a two-level hierarchical autoencoder + flow model.

Level 1 is the finest resolution (16x16 glyphs); level ``i+1`` sees the
2x2 average-pooled image of level ``i``. Each level has an encoder ``f``
(image -> y), a flow ``g`` (y -> z ~ N(0, I)), the flow inverse, and a
decoder ``f'`` that for all but the top level also receives the
higher-level image as conditioning input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Adam, Mlp, MlpSpec, Rng, Tensor, concat
from .core.density import LOG_2PI, standard_normal_log_density_rows

LOG_SCALE_CLAMP = 2.0


class FlowError(RuntimeError):
    pass


def _soft_clamp(raw, c=LOG_SCALE_CLAMP):
    if isinstance(raw, Tensor):
        return (raw * (1.0 / c)).tanh() * c
    return c * np.tanh(raw / c)


# -- flow layers --------------------------------------------------------------

@dataclass
class CouplingLayer:
    """Affine coupling: dims with ``mask == 1`` pass through and parameterise the rest.

    z = y * m + (1 - m) * (y * exp(s) + t), with s, t functions of y * m and
    s soft-clamped to (-2, 2). log|det| = sum of s over the transformed dims.
    """

    mask: np.ndarray
    scale_net: Mlp
    shift_net: Mlp

    @classmethod
    def create(cls, mask, hidden=(64, 64), seed: int = 0, zero_init: bool = True) -> "CouplingLayer":
        mask = np.asarray(mask, dtype=np.float64)
        d = mask.size
        widths = (d, *hidden, d)
        s = Mlp(MlpSpec.build(widths, hidden="tanh", seed=seed, zero_last=zero_init))
        t = Mlp(MlpSpec.build(widths, hidden="tanh", seed=seed + 7919, zero_last=zero_init))
        return cls(mask, s, t)

    @property
    def dim(self) -> int:
        return self.mask.size

    def parameters(self):
        return self.scale_net.parameters() + self.shift_net.parameters()

    def _check(self, y):
        shape = y.shape if isinstance(y, Tensor) else np.shape(y)
        if len(shape) != 2 or shape[1] != self.dim:
            raise FlowError(f"coupling layer expects inputs of shape (n, {self.dim}), got {tuple(shape)}")

    def _st(self, y_masked):
        inv = 1.0 - self.mask
        if isinstance(y_masked, Tensor):
            return _soft_clamp(self.scale_net(y_masked)) * inv, self.shift_net(y_masked) * inv
        return _soft_clamp(self.scale_net.apply(y_masked)) * inv, self.shift_net.apply(y_masked) * inv

    def forward(self, y):
        """y -> (z, log|det dz/dy| per row)."""
        self._check(y)
        if isinstance(y, Tensor):
            ym = y * self.mask
            s, t = self._st(ym)
            z = ym + (y * s.exp() + t) * (1.0 - self.mask)
            return z, s.sum(axis=1)
        y = np.asarray(y, dtype=np.float64)
        ym = y * self.mask
        s, t = self._st(ym)
        z = ym + (1.0 - self.mask) * (y * np.exp(s) + t)
        return z, s.sum(axis=1)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        self._check(z)
        z = np.asarray(z, dtype=np.float64)
        zm = z * self.mask
        s, t = self._st(zm)
        return zm + (1.0 - self.mask) * (z - t) * np.exp(-s)


@dataclass
class ElementwiseAffine:
    """Fixed z = (y - mu) / sigma per dimension."""

    mu: np.ndarray
    log_sigma: np.ndarray

    @property
    def dim(self) -> int:
        return np.size(self.mu)

    def parameters(self):
        return []

    def forward(self, y):
        if isinstance(y, Tensor):
            z = (y - self.mu) * np.exp(-self.log_sigma)
        else:
            z = (np.asarray(y, dtype=np.float64) - self.mu) * np.exp(-self.log_sigma)
        logdet = np.full(len(z.data if isinstance(z, Tensor) else z), -float(np.sum(self.log_sigma)))
        return z, Tensor(logdet) if isinstance(y, Tensor) else logdet

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * np.exp(self.log_sigma) + self.mu


def alternating_masks(d: int, n_layers: int) -> list[np.ndarray]:
    """Cycle even/odd and first-half/second-half masks so every dim gets transformed."""
    idx = np.arange(d)
    patterns = [idx % 2 == 0, idx % 2 == 1]
    if d >= 4:
        patterns += [idx < d // 2, idx >= d // 2]
    return [patterns[k % len(patterns)].astype(np.float64) for k in range(n_layers)]


@dataclass
class FlowStack:
    layers: list
    dim: int

    @classmethod
    def create(cls, d: int, n_layers: int = 6, hidden=(64, 64), seed: int = 0) -> "FlowStack":
        if d < 2:
            raise FlowError("coupling flows need at least 2 dimensions")
        rng = Rng(seed).spawn("flow")
        layers = [CouplingLayer.create(m, hidden, seed=int(rng.integers(0, 2**31)))
                  for m in alternating_masks(d, n_layers)]
        return cls(layers, d)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, y):
        """y -> (z, summed log-det per row)."""
        total = None
        z = y
        for layer in self.layers:
            z, ld = layer.forward(z)
            total = ld if total is None else total + ld
        if total is None:
            n = len(y.data if isinstance(y, Tensor) else y)
            total = Tensor(np.zeros(n)) if isinstance(y, Tensor) else np.zeros(n)
        return z, total

    def layer_log_dets(self, y: np.ndarray) -> list[np.ndarray]:
        out, z = [], np.asarray(y, dtype=np.float64)
        for layer in self.layers:
            z, ld = layer.forward(z)
            out.append(ld)
        return out

    def inverse(self, z: np.ndarray) -> np.ndarray:
        y = np.asarray(z, dtype=np.float64)
        for layer in reversed(self.layers):
            y = layer.inverse(y)
        return y


def flow_log_prob(stack: FlowStack, y: np.ndarray) -> np.ndarray:
    """Row-wise log p_Y(y) = log N(g(y); 0, I) + log|det J_g(y)|."""
    with np.errstate(over="ignore", invalid="ignore"):
        z, logdet = stack.forward(np.asarray(y, dtype=np.float64))
        out = standard_normal_log_density_rows(z) + logdet
    if not np.all(np.isfinite(out)):
        raise FlowError("flow overflow")
    return out


def flow_nll_t(stack: FlowStack, y: np.ndarray) -> Tensor:
    """Mean negative log p_Y per dimension (taped)."""
    z, logdet = stack.forward(Tensor(np.asarray(y, dtype=np.float64)))
    d = stack.dim
    log_p = (z.square().sum(axis=1) * -0.5 - 0.5 * d * LOG_2PI) + logdet
    return log_p.mean() * (-1.0 / d)


def train_flow(stack: FlowStack, data: np.ndarray, iters: int, batch: int = 256, lr: float = 1e-3,
               rng: Rng | None = None) -> list[float]:
    rng = rng or Rng(0)
    data = np.asarray(data, dtype=np.float64)
    opt = Adam(stack.parameters(), lr=lr)
    losses = []
    for _ in range(iters):
        idx = rng.integers(0, len(data), size=min(batch, len(data)))
        opt.zero_grad()
        loss = flow_nll_t(stack, data[idx])
        value = loss.item()
        if not math.isfinite(value):
            raise FlowError("flow overflow")
        loss.backward()
        opt.step()
        losses.append(value)
    return losses


# -- downsampling ---------------------------------------------------------------

def downsample(x: np.ndarray, side: int) -> np.ndarray:
    """2x2 average pooling of flattened (n, side*side) images."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if x.shape[1] != side * side or side % 2:
        raise FlowError(f"cannot pool images of {x.shape[1]} pixels with side {side}")
    h = side // 2
    return x.reshape(n, h, 2, h, 2).mean(axis=(2, 4)).reshape(n, h * h)


def downsample_matrix(side: int) -> np.ndarray:
    """Explicit Jacobian of ``downsample`` (out_pixels, in_pixels)."""
    return downsample(np.eye(side * side), side).T


def downsample_log_det(side: int) -> float:
    """Generalised log-determinant 1/2 log det(J J^T) of 2x2 average pooling.

    Rows of J have four entries 1/4 and are mutually orthogonal, so
    J J^T = I / 4 and the value is (side/2)^2 * log(1/2).
    """
    return (side // 2) ** 2 * math.log(0.5)


def generalized_log_det(jac: np.ndarray) -> np.ndarray:
    """1/2 log det(J J^T) for a batch of (out, in) Jacobians with out <= in."""
    jjt = np.einsum("bij,bkj->bik", jac, jac)
    sign, logdet = np.linalg.slogdet(jjt)
    if np.any(sign <= 0):
        raise FlowError("encoder Jacobian is rank deficient")
    return 0.5 * logdet


# -- hierarchy ------------------------------------------------------------------

@dataclass
class HierLevel:
    """One resolution level: encoder, decoder, and flow on the encoder output.

    The decoder of a conditioned level takes ``[y, x_higher]`` with
    ``x_higher`` the flattened image of the next coarser level.
    """

    side: int
    encoder: Mlp
    decoder: Mlp
    flow: FlowStack
    cond_dim: int = 0

    @property
    def pixels(self) -> int:
        return self.side * self.side

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.apply(x)

    def decode(self, y: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
        if self.cond_dim:
            if cond is None:
                raise FlowError(f"level at {self.side}x{self.side} needs a conditioning image")
            y = np.concatenate([y, cond], axis=1)
        return self.decoder.apply(y)


@dataclass
class FlowHierarchy:
    levels: list[HierLevel]
    ae_trained: bool = False
    flow_trained: bool = False
    include_encoder_jacobian: bool = True

    @classmethod
    def create(cls, side: int = 16, n_levels: int = 2, latent_dims=(32, 16), hidden: int = 128,
               flow_layers: int = 6, flow_hidden=(64, 64), seed: int = 0) -> "FlowHierarchy":
        if len(latent_dims) != n_levels:
            raise ValueError("need one latent dimension per level")
        rng = Rng(seed).spawn("hierarchy")
        levels = []
        for i in range(n_levels):
            s = side // 2**i
            pix = s * s
            cond = (s // 2) ** 2 if i < n_levels - 1 else 0
            d = latent_dims[i]
            # smooth encoder so the Jacobian keeps full row rank everywhere
            enc = Mlp(MlpSpec.build((pix, hidden, hidden, d), hidden="tanh",
                                    seed=int(rng.integers(0, 2**31))))
            dec = Mlp(MlpSpec.build((d + cond, hidden, hidden, pix), hidden="relu", out="sigmoid",
                                    seed=int(rng.integers(0, 2**31))))
            flow = FlowStack.create(d, flow_layers, flow_hidden, seed=int(rng.integers(0, 2**31)))
            levels.append(HierLevel(s, enc, dec, flow, cond))
        return cls(levels)

    @property
    def top(self) -> int:
        return len(self.levels) - 1

    def pyramid(self, x1: np.ndarray) -> list[np.ndarray]:
        """[x_1, d(x_1), d(d(x_1)), ...] for flattened inputs."""
        xs = [np.asarray(x1, dtype=np.float64).reshape(len(x1), -1)]
        for lvl in self.levels[:-1]:
            xs.append(downsample(xs[-1], lvl.side))
        return xs

    def level_for_pixels(self, pixels: int) -> int:
        for i, lvl in enumerate(self.levels):
            if lvl.pixels == pixels:
                return i
        raise FlowError(f"no level has {pixels} pixels; sides are {[l.side for l in self.levels]}")


@dataclass
class PhaseSchedule:
    ae_iters: int = 3000
    flow_iters: int = 3000
    batch: int = 64
    ae_lr: float = 1e-3
    flow_lr: float = 1e-3


@dataclass
class HierTrainTrace:
    ae_losses: list[list[float]] = field(default_factory=list)  # per iteration, per level
    flow_losses: list[float] = field(default_factory=list)


def _ae_loss(h: FlowHierarchy, xs: list[np.ndarray]) -> tuple[Tensor, list[float]]:
    total, parts = None, []
    for i, lvl in enumerate(h.levels):
        y = lvl.encoder(xs[i])
        # lower levels decode against the true coarser image (teacher forcing)
        inp = concat([y, Tensor(xs[i + 1])], axis=1) if lvl.cond_dim else y
        mse = (lvl.decoder(inp) - xs[i]).square().mean()
        parts.append(mse.item())
        total = mse if total is None else total + mse
    return total, parts


def train_autoencoders(h: FlowHierarchy, images: np.ndarray, iters: int, batch: int = 64, lr: float = 1e-3,
                       rng: Rng | None = None) -> list[list[float]]:
    """Jointly minimise the per-level reconstruction MSE (mean over pixels)."""
    rng = rng or Rng(0)
    xs_all = h.pyramid(images)
    params = [p for lvl in h.levels for p in lvl.encoder.parameters() + lvl.decoder.parameters()]
    opt = Adam(params, lr=lr)
    trace = []
    for _ in range(iters):
        idx = rng.integers(0, len(xs_all[0]), size=batch)
        opt.zero_grad()
        loss, parts = _ae_loss(h, [x[idx] for x in xs_all])
        loss.backward()
        opt.step()
        trace.append(parts)
    if iters > 0:
        h.ae_trained = True
    return trace


def train_flows(h: FlowHierarchy, images: np.ndarray, iters: int, batch: int = 64, lr: float = 1e-3,
                rng: Rng | None = None) -> list[float]:
    """Jointly minimise sum over levels of -log p_Y(y_i) with the autoencoders frozen."""
    if not h.ae_trained:
        raise FlowError("autoencoders untrained")
    rng = rng or Rng(0)
    ys = [lvl.encode(x) for lvl, x in zip(h.levels, h.pyramid(images))]
    opt = Adam([p for lvl in h.levels for p in lvl.flow.parameters()], lr=lr)
    trace = []
    for _ in range(iters):
        idx = rng.integers(0, len(ys[0]), size=batch)
        opt.zero_grad()
        loss = None
        for lvl, y in zip(h.levels, ys):
            term = flow_nll_t(lvl.flow, y[idx])
            loss = term if loss is None else loss + term
        value = loss.item()
        if not math.isfinite(value):
            raise FlowError("flow overflow")
        loss.backward()
        opt.step()
        trace.append(value)
    if iters > 0:
        h.flow_trained = True
    return trace


def train_hierarchy(h: FlowHierarchy, images: np.ndarray, schedule: PhaseSchedule | None = None,
                    rng: Rng | None = None) -> HierTrainTrace:
    """Phase 1 trains all autoencoders, phase 2 all flows."""
    schedule = schedule or PhaseSchedule()
    rng = rng or Rng(0)
    trace = HierTrainTrace()
    trace.ae_losses = train_autoencoders(h, images, schedule.ae_iters, schedule.batch, schedule.ae_lr,
                                         rng.spawn("ae"))
    if schedule.flow_iters:
        trace.flow_losses = train_flows(h, images, schedule.flow_iters, schedule.batch, schedule.flow_lr,
                                        rng.spawn("flow"))
    return trace


def reconstruction_mse(h: FlowHierarchy, images: np.ndarray) -> list[float]:
    xs = h.pyramid(images)
    out = []
    for i, lvl in enumerate(h.levels):
        rec = lvl.decode(lvl.encode(xs[i]), xs[i + 1] if lvl.cond_dim else None)
        out.append(float(np.mean((rec - xs[i]) ** 2)))
    return out


@dataclass
class HierLogProb:
    """Per-sample, per-level log p(z), log p(y), log p(x) plus the chained total."""

    log_pz: np.ndarray  # (n, levels)
    log_py: np.ndarray
    log_px: np.ndarray
    down_log_dets: list[float]

    def chained(self, level: int | None = None) -> np.ndarray:
        """sum_{j<=i} log p_X(x_j) plus the pooling log-det for every j > 1."""
        i = self.log_px.shape[1] - 1 if level is None else level
        return self.log_px[:, :i + 1].sum(axis=1) + sum(self.down_log_dets[:i])

    def per_dim(self, dims) -> "HierLogProb":
        d = np.asarray(dims, dtype=np.float64)
        return HierLogProb(self.log_pz / d, self.log_py / d, self.log_px / d, self.down_log_dets)


def hier_log_prob(h: FlowHierarchy, x1: np.ndarray) -> HierLogProb:
    if not (h.ae_trained and h.flow_trained):
        raise FlowError("hierarchy is untrained")
    xs = h.pyramid(x1)
    pz, py, px = [], [], []
    for lvl, x in zip(h.levels, xs):
        y = lvl.encode(x)
        with np.errstate(over="ignore", invalid="ignore"):
            z, ld = lvl.flow.forward(y)
            lpz = standard_normal_log_density_rows(z)
        lpy = lpz + ld
        if not np.all(np.isfinite(lpy)):
            raise FlowError("flow overflow")
        enc = generalized_log_det(lvl.encoder.jacobian(x)) if h.include_encoder_jacobian else 0.0
        pz.append(lpz)
        py.append(lpy)
        px.append(lpy + enc)
    downs = [downsample_log_det(lvl.side) for lvl in h.levels[:-1]]
    return HierLogProb(np.stack(pz, 1), np.stack(py, 1), np.stack(px, 1), downs)


def _latents(h: FlowHierarchy, n: int, temperature: float, rng: Rng | None, z) -> list[np.ndarray]:
    if z is not None:
        return [np.asarray(zi, dtype=np.float64) for zi in z]
    if temperature == 0:
        return [np.zeros((n, lvl.latent_dim)) for lvl in h.levels]
    rng = rng or Rng(0)
    return [temperature * rng.spawn(f"z/{i}").normal(size=(n, lvl.latent_dim)) for i, lvl in enumerate(h.levels)]


def hier_generate(h: FlowHierarchy, n: int = 1, temperature: float = 1.0, rng: Rng | None = None,
                  z: list[np.ndarray] | None = None, conditions: dict[int, np.ndarray] | None = None) -> list:
    """Decode top-down; returns the generated image at every level, finest first.

    ``conditions`` may pin the image used as conditioning for a level
    (keyed by that level's index), replacing the generated coarser image.
    """
    if not h.ae_trained:
        raise FlowError("hierarchy is untrained")
    zs = _latents(h, n, temperature, rng, z)
    conditions = conditions or {}
    out: list[np.ndarray] = [None] * len(h.levels)
    higher = None
    for i in range(h.top, -1, -1):
        lvl = h.levels[i]
        y = lvl.flow.inverse(zs[i])
        cond = conditions.get(i, higher)
        out[i] = lvl.decode(y, cond)
        higher = out[i]
    return out


def super_resolve(h: FlowHierarchy, x_low: np.ndarray, n_variants: int = 4, temperature: float = 1.0,
                  rng: Rng | None = None) -> np.ndarray:
    """High-resolution variants of each low-resolution input; shape (m, variants, pixels).

    ``x_low`` conditions the level directly below its own; that level's latent
    is drawn at ``temperature`` (a single deterministic variant when 0).
    """
    if not (h.ae_trained and h.flow_trained):
        raise FlowError("hierarchy is untrained")
    x_low = np.asarray(x_low, dtype=np.float64)
    x_low = x_low.reshape(len(x_low), -1)
    src = h.level_for_pixels(x_low.shape[1])
    if src == 0:
        raise FlowError("input already has the finest resolution")
    target = src - 1
    lvl = h.levels[target]
    variants = 1 if temperature == 0 else n_variants
    rng = rng or Rng(0)
    m = len(x_low)
    if temperature == 0:
        z = np.zeros((m * variants, lvl.latent_dim))
    else:
        z = temperature * rng.spawn("superres").normal(size=(m * variants, lvl.latent_dim))
    cond = np.repeat(x_low, variants, axis=0)
    out = lvl.decode(lvl.flow.inverse(z), cond)
    return out.reshape(m, variants, -1)


def save_hierarchy(path, h: FlowHierarchy, seed: int = 0):
    from .core import Checkpoint, save_checkpoint

    nets, meta = {}, {"levels": [], "ae_trained": h.ae_trained, "flow_trained": h.flow_trained,
                      "include_encoder_jacobian": h.include_encoder_jacobian}
    arrays = {}
    for i, lvl in enumerate(h.levels):
        nets[f"enc{i}"] = lvl.encoder
        nets[f"dec{i}"] = lvl.decoder
        for k, layer in enumerate(lvl.flow.layers):
            nets[f"flow{i}_{k}_s"] = layer.scale_net
            nets[f"flow{i}_{k}_t"] = layer.shift_net
            arrays[f"flow{i}_{k}_mask"] = layer.mask
        meta["levels"].append({"side": lvl.side, "cond_dim": lvl.cond_dim, "flow_layers": len(lvl.flow.layers)})
    return save_checkpoint(path, Checkpoint("flow_hierarchy", seed, nets, arrays, meta))


def load_hierarchy(path) -> FlowHierarchy:
    from .core import load_checkpoint

    ck = load_checkpoint(path, kind="flow_hierarchy")
    levels = []
    for i, info in enumerate(ck.meta["levels"]):
        layers = [CouplingLayer(ck.arrays[f"flow{i}_{k}_mask"], ck.networks[f"flow{i}_{k}_s"],
                                ck.networks[f"flow{i}_{k}_t"]) for k in range(info["flow_layers"])]
        enc = ck.networks[f"enc{i}"]
        levels.append(HierLevel(info["side"], enc, ck.networks[f"dec{i}"], FlowStack(layers, enc.out_dim),
                                info["cond_dim"]))
    return FlowHierarchy(levels, ck.meta["ae_trained"], ck.meta["flow_trained"], ck.meta["include_encoder_jacobian"])

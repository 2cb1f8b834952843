"""Command-line entry point: ``imanifold MODULE VERB [options]``.

Configuration precedence is flag > config file > built-in default. A TOML
config may hold top-level ``seed``, ``tag`` and ``out`` plus one table per
module (``[diffusion]``) or per verb (``[diffusion.logprob]``); unknown keys
fail before any computation. Every run writes into
``<out>/<tag>-seed<seed>/`` (``<out>`` defaults to ``$IMANIFOLD_OUT`` or
``./runs``), taking a lock file for its duration, and leaves a resolved
config next to its CSV and SVG outputs.

Exit codes: 0 success, 2 configuration error, 3 runtime error. Failures
print a JSON error record on stderr and, when the output directory exists,
also write it to ``error.json``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from . import data as D
from . import diffusion as dif
from . import flow as fl
from . import gridvae as gv
from . import plotting as plot
from . import robustness as rb
from .core import Rng

ENV_OUT = "IMANIFOLD_OUT"
DEFAULT_OUT = "runs"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
TOP_LEVEL_KEYS = ("seed", "tag", "out")


class ConfigError(Exception):
    pass


class RunError(Exception):
    pass


# -- parameter schemas: (module, verb) -> {key: default} -----------------------

SCHEMAS: dict[tuple[str, str], dict] = {
    ("data", "points"): {"kind": "swiss_roll", "n": 10_000, "noise": 0.05},
    ("data", "glyphs"): {"n": 3600, "noise": 0.05},
    ("data", "patches"): {"n": 2000, "noise": 0.05},
    ("diffusion", "train"): {"data": "swiss_roll", "n": 10_000, "noise": 0.05, "T": 100, "schedule": "cosine",
                             "iters": 20_000, "batch": 256, "lr": 1e-3, "lr_final": 1e-4,
                             "hidden": (128, 128, 128)},
    ("diffusion", "sample"): {"sampler": "ddpm", "h": 1, "n": 2000, "variance": "tilde", "checkpoint": ""},
    ("diffusion", "logprob"): {"data": ("swiss_roll",), "n": 10_000, "noise": 0.05, "h": 1, "rounds": 100,
                               "variance": "beta_st", "bins": 50, "floor": -1e4, "full": False, "checkpoint": ""},
    ("flow", "train-ae"): {"n": 3600, "iters": 3000, "batch": 64, "lr": 1e-3, "latent_dims": (32, 16),
                           "hidden": 128, "flow_layers": 6, "flow_hidden": (64, 64)},
    ("flow", "train-flow"): {"n": 3600, "iters": 3000, "batch": 64, "lr": 1e-3, "checkpoint": ""},
    ("flow", "logprob"): {"n": 1800, "bins": 50, "floor": -1e4, "checkpoint": ""},
    ("flow", "generate"): {"n": 16, "temperature": 1.0, "checkpoint": ""},
    ("flow", "superres"): {"n": 8, "variants": 4, "temperature": 1.0, "checkpoint": ""},
    ("gridvae", "train"): {"mode": "unsup", "mask": (), "kl": "mog", "n": 3600, "iters": 30_000, "batch": 64,
                           "lr": 1e-3, "latent": 2, "lo": -2, "hi": 3, "sigma0": 1 / 3, "hidden": (256, 128)},
    ("gridvae", "traverse"): {"dim": 0, "values": (), "base": (), "checkpoint": ""},
    ("gridvae", "report"): {"n": 3600, "checkpoint": ""},
    ("gridvae", "attr-kl"): {"n": 3600, "attrs": 8, "planted": 3, "strength": 4.0, "dim": 16, "permutations": 200},
    ("defense", "train"): {"n": 2000, "iters": 5000, "batch": 64, "lr": 1e-3, "lam": 1.0, "latent": 8,
                           "hidden": 128},
    ("defense", "attack"): {"n": 400, "variant": "plain", "iters": 512, "step": 4 / 255, "checkpoint": ""},
    ("defense", "purify"): {"n": 400, "variant": "plain", "attack_iters": 512, "iters": 256, "step": 4 / 255,
                            "bound": "patch", "eps_th": 0.0, "checkpoint": ""},
    ("defense", "eval"): {"n": 400, "attack_iters": 512, "purify_iters": 256, "step": 4 / 255,
                          "bound": "patch", "eps_th": 0.0, "checkpoint": ""},
}
MODULES = sorted({m for m, _ in SCHEMAS})
GRID_MODES = {"unsup": "unsupervised", "guided": "guided", "partial": "partial"}


def _coerce(key: str, value, default):
    """Convert a file or flag value to the type of the default."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes"):
                    return True
                if value.lower() in ("0", "false", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, tuple):
            items = [v for v in value.split(",") if v != ""] if isinstance(value, str) else list(value)
            kind = type(default[0]) if default else _guess
            return tuple(kind(v) for v in items)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value {value!r} for {key!r}") from exc


def _guess(v):
    if isinstance(v, (int, float, bool)):
        return v
    for kind in (int, float):
        try:
            return kind(v)
        except ValueError:
            pass
    low = str(v).lower()
    if low in ("true", "false"):
        return low == "true"
    return v


@dataclass
class RunConfig:
    module: str
    verb: str
    params: dict
    seed: int
    tag: str
    out_root: Path
    config_file: str | None = None

    @property
    def out_dir(self) -> Path:
        return self.out_root / f"{self.tag}-seed{self.seed}"

    def resolved(self) -> dict:
        return {"module": self.module, "verb": self.verb, "seed": self.seed, "tag": self.tag,
                "params": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.params.items())}}


def load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def file_params(doc: dict, module: str, verb: str) -> tuple[dict, dict]:
    """Validate a whole config document; return (top-level, params for this verb)."""
    top, params = {}, {}
    module_keys = {m: set().union(*(SCHEMAS[k].keys() for k in SCHEMAS if k[0] == m)) for m in MODULES}
    for key, value in doc.items():
        if key in TOP_LEVEL_KEYS:
            top[key] = value
            continue
        if key not in MODULES or not isinstance(value, dict):
            raise ConfigError(f"unknown config key {key!r}")
        for sub, sval in value.items():
            if isinstance(sval, dict):
                if (key, sub) not in SCHEMAS:
                    raise ConfigError(f"unknown config table [{key}.{sub}]")
                for k in sval:
                    if k not in SCHEMAS[(key, sub)]:
                        raise ConfigError(f"unknown config key {k!r} in [{key}.{sub}]")
                if (key, sub) == (module, verb):
                    params.update({k: ("table", v) for k, v in sval.items()})
            elif sub not in module_keys[key]:
                raise ConfigError(f"unknown config key {sub!r} in [{key}]")
            elif key == module and sub in SCHEMAS[(module, verb)]:
                params.setdefault(sub, ("module", sval))
    return top, {k: v for k, (_, v) in params.items()}


# -- argument parsing -------------------------------------------------------------

def _global_options(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--config", default=default, help="TOML config file")
    parser.add_argument("--seed", type=int, default=default, help="run seed (default 0)")
    parser.add_argument("--tag", default=default, help="experiment tag (default: module name)")
    parser.add_argument("--out", default=default, help=f"output root (default ${ENV_OUT} or ./{DEFAULT_OUT})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imanifold", description="Density, manifold and robustness experiments.")
    _global_options(parser, None)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, argparse.SUPPRESS)
    mods = parser.add_subparsers(dest="module", required=True, metavar="MODULE")
    for module in MODULES:
        mp = mods.add_parser(module, help=f"{module} experiments")
        verbs = mp.add_subparsers(dest="verb", required=True, metavar="VERB")
        for (m, verb), schema in SCHEMAS.items():
            if m != module:
                continue
            vp = verbs.add_parser(verb, help=f"{module} {verb}", parents=[common])
            for key, default in schema.items():
                shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
                vp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="VALUE",
                                help=f"default: {shown}")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    schema = SCHEMAS[(args.module, args.verb)]
    top, from_file = {}, {}
    if args.config:
        top, from_file = file_params(load_config_file(args.config), args.module, args.verb)
    params = {}
    for key, default in schema.items():
        flag = getattr(args, key, None)
        raw = flag if flag is not None else from_file.get(key, default)
        params[key] = _coerce(key, raw, default)
    seed = args.seed if args.seed is not None else top.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    tag = args.tag or top.get("tag") or args.module
    out = args.out or top.get("out") or os.environ.get(ENV_OUT) or DEFAULT_OUT
    return RunConfig(args.module, args.verb, params, seed, str(tag), Path(out), args.config)


# -- bundle helpers -----------------------------------------------------------------

@dataclass
class Bundle:
    cfg: RunConfig
    files: list[str] = field(default_factory=list)

    def path(self, name: str) -> Path:
        p = self.cfg.out_dir / name
        self.files.append(name)
        return p

    def rng(self, component: str) -> Rng:
        return Rng(self.cfg.seed).spawn(f"{self.cfg.module}/{component}")

    def checkpoint(self, name: str, must_exist: bool = True) -> Path:
        override = self.cfg.params.get("checkpoint") or ""
        p = Path(override) if override else self.cfg.out_dir / name
        if must_exist and not p.exists():
            raise RunError(f"missing checkpoint: {p}")
        return p


def _write_csv(path: Path, header, rows) -> Path:
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _loss_csv(b: Bundle, name: str, losses) -> None:
    _write_csv(b.path(name), ("iteration", "loss"), ((i, float(v)) for i, v in enumerate(losses)))


# -- data --------------------------------------------------------------------------

def run_data(b: Bundle) -> None:
    p, verb = b.cfg.params, b.cfg.verb
    if verb == "points":
        pts = D.make_point_set(p["kind"], p["n"], noise=p["noise"], seed=b.cfg.seed).points
        D.write_points_csv(b.path(f"data_points_{p['kind']}.csv"), pts)
        plot.sample_scatter(b.path(f"data_points_{p['kind']}.svg"), {p["kind"]: pts})
    elif verb == "glyphs":
        ds = D.make_glyph_dataset(p["n"], seed=b.cfg.seed, noise=p["noise"])
        D.write_pgm(b.path("data_glyphs.pgm"), D.tile_images(ds.images[:100]))
        _write_csv(b.path("data_glyphs_factors.csv"), ("index", "left", "right"),
                   ((i, int(a), int(c)) for i, (a, c) in enumerate(ds.factors)))
    else:
        ds = D.make_patch_dataset(p["n"], seed=b.cfg.seed, noise=p["noise"])
        D.write_pgm(b.path("data_patches.pgm"), D.tile_images(ds.images[:100]))
        _write_csv(b.path("data_patches_labels.csv"), ("index", "label"), enumerate(ds.labels.tolist()))


# -- diffusion ---------------------------------------------------------------------

def _schedule(name: str, T: int):
    if name not in dif.SCHEDULES:
        raise ConfigError(f"unknown schedule {name!r}; expected one of {sorted(dif.SCHEDULES)}")
    return dif.SCHEDULES[name](T=T)


def run_diffusion(b: Bundle) -> None:
    p, verb, seed = b.cfg.params, b.cfg.verb, b.cfg.seed
    if verb == "train":
        pts = D.make_point_set(p["data"], p["n"], noise=p["noise"], seed=seed).points
        model = dif.EpsilonModel.create(2, _schedule(p["schedule"], p["T"]), hidden=p["hidden"], seed=seed)
        trace = dif.train_epsilon(model, pts, p["iters"], batch=p["batch"], lr=p["lr"], rng=b.rng("train"),
                                  lr_final=p["lr_final"])
        dif.save_model(b.checkpoint("diffusion_model.json", must_exist=False), model, seed,
                       {"data": p["data"], "n": p["n"], "noise": p["noise"]})
        b.files.append("diffusion_model.json")
        _loss_csv(b, "diffusion_train_loss.csv", trace.losses)
        return
    model = dif.load_model(b.checkpoint("diffusion_model.json"))
    if verb == "sample":
        rng = b.rng(f"sample/{p['sampler']}/h{p['h']}")
        if p["sampler"] == "rk4":
            xs = dif.rk4_sample(model, p["h"], "ddim", n=p["n"], rng=rng, variance=p["variance"])
        elif p["sampler"] in dif.MODES:
            xs = dif.sample(model, p["h"], p["sampler"], n=p["n"], rng=rng, variance=p["variance"])
        else:
            raise ConfigError(f"unknown sampler {p['sampler']!r}; expected ddpm, ddim or rk4")
        stem = f"diffusion_sample_{p['sampler']}_h{p['h']}"
        _write_csv(b.path(f"{stem}.csv"), ("x", "y"), xs.tolist())
        plot.sample_scatter(b.path(f"{stem}.svg"), {f"{p['sampler']} h={p['h']}": xs})
        return
    # logprob
    groups, means = {}, []
    for kind in p["data"]:
        pts = D.make_point_set(kind, p["n"], noise=p["noise"], seed=seed + 1).points
        rep = dif.log_prob(model, pts, h=p["h"], rounds=p["rounds"], rng=b.rng(f"logprob/{kind}"),
                           variance=p["variance"])
        rep.to_summary_csv(b.path(f"diffusion_logprob_{kind}.csv"))
        if p["full"]:
            rep.to_csv(b.path(f"diffusion_logprob_{kind}_rounds.csv"))
        plot.write_histogram_csv(b.path(f"diffusion_logprob_{kind}_hist.csv"),
                                 plot.histogram(rep.mean, p["bins"], p["floor"]))
        b.files.append(f"diffusion_logprob_{kind}_hist.json")
        groups[kind] = rep.mean
        means.append((kind, float(rep.mean.mean()), float(rep.mean.std())))
    _write_csv(b.path("diffusion_logprob_means.csv"), ("data", "mean", "std"), means)
    plot.histogram_panels(b.path("diffusion_logprob_hist.svg"), {"log-probability": groups}, p["bins"], p["floor"])
    plot.bar_chart(b.path("diffusion_logprob_means.svg"), [m[0] for m in means], [m[1] for m in means],
                   ylabel="mean log-probability")


def _glyphs(n: int, seed: int) -> D.GlyphDataset:
    """Held-out glyphs; small requests take a prefix of a class-balanced draw."""
    ds = D.make_glyph_dataset(max(n, D.N_GLYPHS**2 * D.MIN_PER_CLASS), seed=seed)
    return D.GlyphDataset(ds.images[:n], ds.factors[:n])


# -- flow --------------------------------------------------------------------------

def run_flow(b: Bundle) -> None:
    p, verb, seed = b.cfg.params, b.cfg.verb, b.cfg.seed
    if verb == "train-ae":
        images = D.make_glyph_dataset(p["n"], seed=seed).flat
        h = fl.FlowHierarchy.create(n_levels=len(p["latent_dims"]), latent_dims=p["latent_dims"], hidden=p["hidden"], flow_layers=p["flow_layers"],
                                    flow_hidden=p["flow_hidden"], seed=seed)
        mse = fl.train_autoencoders(h, images, p["iters"], batch=p["batch"], lr=p["lr"], rng=b.rng("ae"))
        fl.save_hierarchy(b.checkpoint("flow_model.json", must_exist=False), h, seed)
        b.files.append("flow_model.json")
        _write_csv(b.path("flow_train_ae_loss.csv"), ("iteration",) + tuple(f"mse_level{i}" for i in range(len(h.levels))),
                   ((i, *row) for i, row in enumerate(mse)))
        return
    h = fl.load_hierarchy(b.checkpoint("flow_model.json"))
    if verb == "train-flow":
        images = D.make_glyph_dataset(p["n"], seed=seed).flat
        losses = fl.train_flows(h, images, p["iters"], batch=p["batch"], lr=p["lr"], rng=b.rng("flow"))
        fl.save_hierarchy(b.checkpoint("flow_model.json"), h, seed)
        _write_csv(b.path("flow_train_flow_loss.csv"), ("iteration", "nll_sum_levels"), enumerate(losses))
    elif verb == "logprob":
        held = _glyphs(p["n"], seed + 1).flat
        reps = {"in-distribution": fl.hier_log_prob(h, held), "inverted": fl.hier_log_prob(h, 1.0 - held)}
        rows = []
        for name, rep in reps.items():
            for i in range(len(held)):
                for lvl in range(rep.log_px.shape[1]):
                    rows.append((name, i, lvl, rep.log_pz[i, lvl], rep.log_py[i, lvl], rep.log_px[i, lvl]))
        _write_csv(b.path("flow_logprob.csv"), ("set", "sample_id", "level", "log_pz", "log_py", "log_px"), rows)
        panels = {}
        for term in ("log_pz", "log_py", "log_px"):
            panels[term] = {f"{name} L{lvl}": getattr(rep, term)[:, lvl] for name, rep in reps.items()
                            for lvl in range(rep.log_px.shape[1])}
        plot.histogram_panels(b.path("flow_logprob_hist.svg"), panels, p["bins"], p["floor"])
    elif verb == "generate":
        imgs = fl.hier_generate(h, p["n"], temperature=p["temperature"], rng=b.rng("generate"))
        D.write_pgm(b.path("flow_generate.pgm"), D.tile_images(imgs[0].reshape(-1, 16, 16), cols=8))
        plot.image_strip(b.path("flow_generate.svg"), {"samples": imgs[0]})
    else:
        held = _glyphs(p["n"], seed + 1).flat
        low = fl.downsample(held, 16)
        out = fl.super_resolve(h, low, n_variants=p["variants"], temperature=p["temperature"], rng=b.rng("superres"))
        back = fl.downsample(out.reshape(-1, 256), 16).reshape(out.shape[0], out.shape[1], -1)
        _write_csv(b.path("flow_superres.csv"), ("sample_id", "variant", "mse_to_truth", "mse_pooled_to_input"),
                   ((i, v, float(np.mean((out[i, v] - held[i]) ** 2)), float(np.mean((back[i, v] - low[i]) ** 2)))
                    for i in range(out.shape[0]) for v in range(out.shape[1])))
        up = np.repeat(np.repeat(low.reshape(-1, 8, 8), 2, axis=1), 2, axis=2)
        rows = {"input (8x8)": up, "truth": held}
        rows.update({f"variant {v}": out[:, v] for v in range(out.shape[1])})
        plot.image_strip(b.path("flow_superres.svg"), rows)


# -- gridvae -----------------------------------------------------------------------

def _grid_from(p: dict) -> gv.GridSpec:
    if p["mode"] not in GRID_MODES:
        raise ConfigError(f"unknown mode {p['mode']!r}; expected one of {sorted(GRID_MODES)}")
    mask = tuple(bool(v) for v in p["mask"]) if p["mode"] == "partial" else None
    try:
        return gv.GridSpec.uniform(p["latent"], p["lo"], p["hi"], p["sigma0"], GRID_MODES[p["mode"]], mask)
    except gv.GridError as exc:
        raise ConfigError(str(exc)) from exc


def run_gridvae(b: Bundle) -> None:
    p, verb, seed = b.cfg.params, b.cfg.verb, b.cfg.seed
    if verb == "attr-kl":
        images = D.make_glyph_dataset(p["n"], seed=seed).flat
        emb, attrs = gv.planted_embedding(images, n_attrs=p["attrs"], planted=p["planted"], dim=p["dim"],
                                          strength=p["strength"], seed=seed)
        res = gv.manifold_attr_kl(emb, attrs)
        null = gv.permutation_null(emb, attrs, n_perm=p["permutations"], rng=b.rng("null"))
        inside = null.within(res)
        _write_csv(b.path("gridvae_attr_kl.csv"), ("attribute", "kl", "p", "p_cond", "null_mean", "null_std",
                                                   "within_null_3sd", "flag"),
                   ((n, s, pp, pc, null.mean[attrs.names.index(n)], null.std[attrs.names.index(n)],
                     int(inside[n]), f) for n, s, pp, pc, f in zip(res.names, res.scores, res.p, res.p_cond, res.flags)))
        plot.bar_chart(b.path("gridvae_attr_kl.svg"), res.names, res.scores, ylabel="KL")
        return
    if verb == "train":
        ds = D.make_glyph_dataset(p["n"], seed=seed)
        grid = _grid_from(p)
        model = gv.GridVaeModel.create(256, grid, hidden=p["hidden"], seed=seed)
        targets = gv.factor_targets(ds.factors, grid) if grid.guided.any() else None
        losses = gv.train(model, ds.flat, gv.TrainSettings(p["iters"], p["batch"], p["lr"], p["kl"]), targets=targets,
                          rng=b.rng("train"))
        gv.save_model(b.checkpoint("gridvae_model.json", must_exist=False), model, seed)
        b.files.append("gridvae_model.json")
        _loss_csv(b, "gridvae_train_loss.csv", losses)
        test = D.make_glyph_dataset(p["n"], seed=seed + 1)
        mu, _ = model.encode(test.flat)
        _write_csv(b.path("gridvae_latents.csv"), ("sample_id", "left", "right") + tuple(f"z{i}" for i in range(mu.shape[1])),
                   ((i, int(f[0]), int(f[1]), *m) for i, (f, m) in enumerate(zip(test.factors, mu))))
        plot.latent_scatter(b.path("gridvae_latents.svg"), mu, test.class_ids, grid.centers)
        return
    model = gv.load_model(b.checkpoint("gridvae_model.json"))
    ds = D.make_glyph_dataset(p.get("n", 3600), seed=seed)
    probe = gv.FactorProbe.fit(ds.flat, ds.factors)
    if verb == "traverse":
        dim = p["dim"]
        values = p["values"] or model.grid.centers[dim]
        base = np.asarray(p["base"] or [0.0] * model.latent_dim, dtype=np.float64)
        if len(base) != model.latent_dim:
            raise ConfigError(f"base needs {model.latent_dim} coordinates")
        imgs = gv.latent_traverse(model, base, dim, values)
        preds = probe.predict(imgs) if len(imgs) else np.zeros((0, 2), dtype=int)
        _write_csv(b.path(f"gridvae_traverse_dim{dim}.csv"), ("step", "value", "left_probe", "right_probe"),
                   ((i, float(v), int(a), int(c)) for i, (v, (a, c)) in enumerate(zip(values, preds))))
        plot.image_strip(b.path(f"gridvae_traverse_dim{dim}.svg"), {f"dim {dim}": imgs},
                         captions={f"dim {dim}": [f"{a}{c}" for a, c in preds]})
    else:
        test = D.make_glyph_dataset(p["n"], seed=seed + 1)
        rep = gv.disentanglement_report(model, test.flat, test.factors)
        purity = gv.cluster_purity(model, test.flat, test.class_ids)
        rate, steps = gv.traversal_single_factor_rate(model, probe)
        _write_csv(b.path("gridvae_report.csv"), ("latent_dim", "factor", "mi", "normalized_mi", "share"), rep.rows())
        _write_csv(b.path("gridvae_summary.csv"), ("metric", "value"),
                   (("cluster_purity", purity), ("traversal_single_factor_rate", rate), ("traversal_steps", steps)))


# -- defense -----------------------------------------------------------------------

def run_defense(b: Bundle) -> None:
    p, verb, seed = b.cfg.params, b.cfg.verb, b.cfg.seed
    if verb == "train":
        ds = D.make_patch_dataset(p["n"], seed=seed)
        model = rb.VaeClassifier.create(256, latent_dim=p["latent"], hidden=p["hidden"], lam=p["lam"], seed=seed)
        trace = rb.train_joint(model, ds.flat, ds.labels, p["iters"], batch=p["batch"], lr=p["lr"], rng=b.rng("train"))
        rb.save_model(b.checkpoint("defense_model.json", must_exist=False), model, seed)
        b.files.append("defense_model.json")
        _write_csv(b.path("defense_train_loss.csv"), ("iteration", "elbo", "cross_entropy"),
                   ((i, e, c) for i, (e, c) in enumerate(zip(trace.elbo, trace.ce))))
        return
    model = rb.load_model(b.checkpoint("defense_model.json"))
    test = D.make_patch_dataset(max(p["n"], 100), seed=seed + 1)
    x, y = test.flat[: p["n"]], test.labels[: p["n"]]
    bound = p.get("eps_th") or None
    if verb == "eval":
        spec_a = rb.AttackSpec(iters=p["attack_iters"], step=p["step"])
        spec_p = rb.PurifySpec(iters=p["purify_iters"], step=p["step"], bound=p["bound"], eps_th=bound)
        rep = rb.evaluate_defense(model, x, y, spec_a, spec_p, seed=seed)
        rep.to_csv(b.path("defense_table.csv"))
        s = rep.samples["plain"]
        k = min(8, len(x))
        rows = {name: s[key][:k] for name, key in (("clean", "clean"), ("clean recon", "recon_clean"),
                                                     ("adversarial", "adversarial"), ("adv recon", "recon_adversarial"),
                                                     ("purified", "purified"), ("purified recon", "recon_purified"))}
        preds = {"clean": s["pred_clean"][:k], "adversarial": s["pred_adversarial"][:k], "purified": s["pred_purified"][:k]}
        plot.image_strip(b.path("defense_examples.svg"), rows, captions={n: v.tolist() for n, v in preds.items()},
                         correct={n: (v == y[:k]).tolist() for n, v in preds.items()})
        return
    if p["variant"] not in rb.MOMENTUM:
        raise ConfigError(f"unknown variant {p['variant']!r}; expected one of {rb.MOMENTUM}")
    iters = p["iters"] if verb == "attack" else p["attack_iters"]
    x_adv = rb.attack(model, x, y, rb.AttackSpec(iters=iters, step=p["step"], momentum=p["variant"]), seed=seed)
    if verb == "attack":
        pred = model.predict(x_adv)
        _write_csv(b.path(f"defense_attack_{p['variant']}.csv"), ("sample_id", "label", "clean_pred", "adv_pred"),
                   zip(range(len(x)), y.tolist(), model.predict(x).tolist(), pred.tolist()))
        D.write_pgm(b.path(f"defense_attack_{p['variant']}.pgm"), D.tile_images(x_adv[:100].reshape(-1, 16, 16)))
        return
    res = rb.purify(model, x_adv, rb.PurifySpec(iters=p["iters"], step=p["step"], bound=p["bound"], eps_th=bound),
                    seed=seed)
    _write_csv(b.path(f"defense_purify_{p['variant']}.csv"),
               ("sample_id", "label", "adv_pred", "purified_pred", "elbo_adv", "elbo_purified"),
               zip(range(len(x)), y.tolist(), model.predict(x_adv).tolist(), model.predict(res.x).tolist(),
                   res.best_elbo[0].tolist(), res.best_elbo[-1].tolist()))
    if model.latent_dim >= 2:
        path = res.latent_path
        plot.sample_scatter(b.path(f"defense_purify_{p['variant']}_latents.svg"),
                            {"clean": model.encode(x)[0][:, :2], "adversarial": path[0][:, :2],
                             "purified": path[-1][:, :2]})


RUNNERS = {"data": run_data, "diffusion": run_diffusion, "flow": run_flow, "gridvae": run_gridvae,
           "defense": run_defense}


# -- orchestration -------------------------------------------------------------------

class _Lock:
    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def _stale(self) -> bool:
        """True when the lock names a process that no longer exists."""
        try:
            pid = int(self.path.read_text().strip())
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except (OSError, ValueError):
            return False
        return False

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists() and self._stale():
            self.path.unlink(missing_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunError(f"output directory is locked by another run: {self.path}") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def execute(cfg: RunConfig) -> Bundle:
    bundle = Bundle(cfg)
    with _Lock(cfg.out_dir):
        start = time.time()
        (cfg.out_dir / "error.json").unlink(missing_ok=True)
        stem = f"{cfg.module}_{cfg.verb}"
        (cfg.out_dir / f"{stem}_config.json").write_text(json.dumps(cfg.resolved(), indent=1, sort_keys=True))
        RUNNERS[cfg.module](bundle)
        meta = {"wall_clock_seconds": round(time.time() - start, 3), "files": sorted(set(bundle.files)),
                "config": f"{stem}_config.json"}
        (cfg.out_dir / f"{stem}_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return bundle


def _fail(code: int, kind: str, message: str, out_dir: Path | None) -> int:
    record = {"status": "error", "exit_code": code, "kind": kind, "message": message}
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None and out_dir.exists():
        (out_dir / "error.json").write_text(text)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, usage errors exit 2
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), None)
    try:
        execute(cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), cfg.out_dir)
    except (RunError, fl.FlowError, gv.GridError, rb.DefenseError, dif.DiffusionError, ValueError, RuntimeError,
            OSError) as exc:
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc), cfg.out_dir)
    print(json.dumps({"status": "ok", "out_dir": str(cfg.out_dir)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

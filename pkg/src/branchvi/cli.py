"""Command-line harness: generate, train, eval, convert, check.

Config values resolve in three layers: built-in defaults, then a flat
``key = value`` config file (--config), then command-line flags. Every run
writes a manifest (config echo, seed, content hashes of the input dataset)
sufficient to reproduce its outputs bitwise.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .amortize import AmortNet, AmortParams, MlpWeights, amort_to_tree, init_amortized
from .checks import run_checks
from .data import BranchDataset, load_dataset, save_dataset, split
from .errors import InvalidDataError, MalformedParamsError
from .families import (
    BranchParams,
    JointFamily,
    branch_to_tree,
    init_branch,
    init_joint,
    joint_to_branch,
    joint_to_tree,
)
from .gaussmath import GaussianSpec, UnconstrainedChol, mvn_logpdf
from .metrics import evaluate, write_report
from .models import (
    HbdModel,
    PreferenceConfig,
    SyntheticConfig,
    preference_forward_sample,
    preference_global_dim,
    preference_model,
    synthetic_forward_sample,
    synthetic_model,
    synthetic_oracle,
)
from .optim import AdamState, LrSchedule
from .rng import RngStream
from .training import params_from_tree, params_to_tree, train

_KIND_CODES = {"joint": 0, "branch": 1, "amortized": 2}
_STRUCT_CODES = {"dense": 0, "block": 1, "diag": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_STRUCT_NAMES = {v: k for k, v in _STRUCT_CODES.items()}

TRACE_COLUMNS = ("iter", "wall_seconds", "lr", "elbo", "ema_elbo")


@dataclass
class RunConfig:
    model: str = "synthetic"        # synthetic | preference
    family: str = "branch"          # joint | branch | amortized
    structure: str = "dense"        # dense | block | diag
    dim: int = 2                    # covariate / local dimension D
    n_branches: int = 10
    obs_per_branch: int = 100
    seed: int = 0
    iters: int = 20_000
    batch_size: int = 0             # 0 = full batch
    n_mc: int = 10
    lr: float = 1e-3
    drop_every: int = 50_000
    drop_factor: float = 0.1
    max_drops: int = 3
    trace_every: int = 100
    k_samples: int = 10_000
    test_fraction: float = 0.0
    workers: int = 1
    gamma: float = 1.0
    data: str = ""
    out_dir: str = "run"
    checkpoint: str = ""
    resume: str = ""

    def validate(self) -> None:
        if self.model not in ("synthetic", "preference"):
            raise InvalidDataError(f"unknown model {self.model!r}")
        if self.family not in _KIND_CODES:
            raise InvalidDataError(f"unknown family {self.family!r}")
        if self.structure not in _STRUCT_CODES:
            raise InvalidDataError(f"unknown structure {self.structure!r}")
        if self.family == "joint" and self.batch_size not in (0, self.n_branches):
            raise InvalidDataError("joint families cannot be subsampled; "
                                   "batch_size must be 0 (full) or equal to n_branches")
        if self.workers < 1:
            raise InvalidDataError("workers must be >= 1")


def parse_config_file(path: str) -> dict:
    """Flat grammar: one `key = value` per line, '#' comments, blanks ignored."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidDataError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key = key.strip().replace("-", "_")
            raw = raw.strip()
            if key not in fields:
                raise InvalidDataError(f"{path}:{lineno}: unknown key {key!r}")
            ftype = fields[key].type
            if ftype in ("int", int):
                values[key] = int(raw)
            elif ftype in ("float", float):
                values[key] = float(raw)
            else:
                values[key] = raw
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for f in dataclasses.fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Model / parameter construction shared by the subcommands.


def build_model(cfg: RunConfig, data: BranchDataset) -> HbdModel:
    n = tuple(max(b.n, 1) for b in data.branches)
    if cfg.model == "synthetic":
        if data.covariate_dim != cfg.dim:
            raise InvalidDataError(
                f"dataset covariate dim {data.covariate_dim} != configured dim {cfg.dim}")
        return synthetic_model(cfg.dim, data.n_branches, n)
    return preference_model(cfg.dim, data.n_branches, n, gamma=cfg.gamma)


def init_params(cfg: RunConfig, model: HbdModel, data: BranchDataset, rng: RngStream):
    N = data.n_branches
    if cfg.family == "joint":
        return init_joint(cfg.structure, model.global_dim, model.local_dim, N, cfg.gamma)
    if cfg.family == "branch":
        return init_branch(cfg.structure, model.global_dim, model.local_dim, N, cfg.gamma)
    return init_amortized(cfg.structure, model.global_dim, model.local_dim,
                          data.covariate_dim, rng, gamma=cfg.gamma)


# ---------------------------------------------------------------------------
# Checkpoints: parameter tree plus enough metadata to rebuild the container.


def save_checkpoint(path: str, params, *, it: int = 0, ema: float = float("nan"),
                    adam: AdamState | None = None) -> None:
    tree = {f"params.{k}": v for k, v in params_to_tree(params).items()}
    if isinstance(params, JointFamily):
        kind, structure = "joint", params.structure
        dims = [params.global_dim, params.local_dim, params.n_branches, 0]
        gamma = _joint_gamma(params)
    elif isinstance(params, BranchParams):
        kind, structure = "branch", params.structure
        dims = [params.global_dim, params.local_dim, params.n_branches, 0]
        gamma = _branch_gamma(params)
    elif isinstance(params, AmortParams):
        kind, structure = "amortized", params.structure
        dims = [params.global_dim, params.local_dim, 0, params.net.x_dim]
        gamma = params.net.gamma
    else:
        raise MalformedParamsError(f"cannot checkpoint {type(params).__name__}")
    tree["meta.kind"] = np.array([_KIND_CODES[kind]], dtype=float)
    tree["meta.structure"] = np.array([_STRUCT_CODES[structure]], dtype=float)
    tree["meta.dims"] = np.asarray(dims, dtype=float)
    tree["meta.gamma"] = np.array([gamma])
    tree["train.iter"] = np.array([float(it)])
    tree["train.ema"] = np.array([ema])
    if adam is not None:
        tree["opt.m"] = adam.m
        tree["opt.s"] = adam.s
        tree["opt.t"] = np.array([float(adam.t)])
    ckpt.save_tensors(path, tree)


def _joint_gamma(fam: JointFamily) -> float:
    if fam.structure == "dense":
        return fam.spec.chol.gamma
    if fam.structure == "block":
        return fam.theta_spec.chol.gamma
    return fam.diag.gamma


def _branch_gamma(params: BranchParams) -> float:
    from .families import DiagGaussian

    return params.v.gamma if isinstance(params.v, DiagGaussian) else params.v.chol.gamma


def load_checkpoint(path: str):
    """Returns (params, iter, ema, adam-or-None)."""
    tree = ckpt.load_tensors(path)
    kind = _KIND_NAMES[int(tree["meta.kind"][0])]
    structure = _STRUCT_NAMES[int(tree["meta.structure"][0])]
    gdim, ldim, nb, x_dim = (int(v) for v in tree["meta.dims"])
    gamma = float(tree["meta.gamma"][0])
    ptree = {k[len("params."):]: v for k, v in tree.items() if k.startswith("params.")}
    if kind == "joint":
        params = params_from_tree(init_joint(structure, gdim, ldim, nb, gamma), ptree)
    elif kind == "branch":
        params = params_from_tree(init_branch(structure, gdim, ldim, nb, gamma), ptree)
    else:
        params = AmortParams(_load_factor(structure, gdim, gamma, ptree),
                             _load_net(structure, gdim, ldim, x_dim, gamma, ptree))
    it = int(tree["train.iter"][0])
    ema = float(tree["train.ema"][0])
    adam = None
    if "opt.m" in tree:
        adam = AdamState(tree["opt.m"], tree["opt.s"], int(tree["opt.t"][0]))
    return params, it, ema, adam


def _load_factor(structure, gdim, gamma, ptree):
    from .families import DiagGaussian

    if structure == "diag":
        return DiagGaussian(ptree["v.mean"], ptree["v.scale_raw"], gamma)
    return GaussianSpec(ptree["v.mean"], UnconstrainedChol(ptree["v.raw"], gdim, gamma))


def _load_net(structure, gdim, ldim, x_dim, gamma, ptree):
    def layers(prefix):
        Ws, bs, l = [], [], 0
        while f"net.{prefix}.{l}.W" in ptree:
            Ws.append(ptree[f"net.{prefix}.{l}.W"])
            bs.append(ptree[f"net.{prefix}.{l}.b"])
            l += 1
        return MlpWeights(Ws, bs)

    return AmortNet(layers("feat"), layers("param"), structure, gdim, ldim, x_dim, gamma)


# ---------------------------------------------------------------------------
# Manifest.


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: RunConfig, out_dir: str, command: str, inputs: list) -> None:
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w") as fh:
        fh.write(f"command = {command}\n")
        for f in dataclasses.fields(RunConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")
        for p in inputs:
            if os.path.exists(p):
                fh.write(f"sha256.{os.path.basename(p)} = {_sha256(p)}\n")


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_generate(cfg: RunConfig) -> int:
    if cfg.n_branches < 1:
        print("error: n_branches must be at least 1", file=sys.stderr)
        return 2
    os.makedirs(cfg.out_dir, exist_ok=True)
    obs = (cfg.obs_per_branch,) * cfg.n_branches
    if cfg.model == "synthetic":
        gen_cfg = SyntheticConfig(cfg.dim, cfg.n_branches, obs)
        data, latents = synthetic_forward_sample(gen_cfg, RngStream(cfg.seed, 0))
    else:
        gen_cfg = PreferenceConfig(cfg.dim, cfg.n_branches, obs, cfg.gamma)
        data, latents = preference_forward_sample(gen_cfg, RngStream(cfg.seed, 0))
    base = os.path.join(cfg.out_dir, "data")
    save_dataset(data, base)
    ckpt.save_tensors(os.path.join(cfg.out_dir, "latents.nt"),
                      {"theta": latents.theta, "z": latents.z})
    if cfg.test_fraction > 0:
        parts = split(data, cfg.test_fraction, RngStream(cfg.seed, 1))
        save_dataset(parts.train, base + "_train")
        save_dataset(parts.test, base + "_test")
    if cfg.model == "synthetic":
        oracle = synthetic_oracle(data)
        with open(os.path.join(cfg.out_dir, "oracle.txt"), "w") as fh:
            fh.write(f"log_marginal = {oracle.log_marginal!r}\n")
        ckpt.save_tensors(os.path.join(cfg.out_dir, "oracle.nt"),
                          {"posterior_mean": oracle.posterior_global.mean,
                           "posterior_cov": oracle.posterior_global.cov()})
    write_manifest(cfg, cfg.out_dir, "generate", [base + ".bin", base + ".meta"])
    print(f"wrote dataset with {data.n_branches} branches, {data.n_obs} observations "
          f"to {cfg.out_dir}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.data:
        print("error: --data is required for train", file=sys.stderr)
        return 2
    data = load_dataset(cfg.data)
    model = build_model(cfg, data)
    os.makedirs(cfg.out_dir, exist_ok=True)
    start_iter, ema, adam = 0, None, None
    if cfg.resume:
        params, start_iter, ema, adam = load_checkpoint(cfg.resume)
        if np.isnan(ema):
            ema = None
    else:
        params = init_params(cfg, model, data, RngStream(cfg.seed, 2))
    if start_iter >= cfg.iters:
        print(f"error: checkpoint is already at iteration {start_iter} >= --iters "
              f"{cfg.iters}; nothing to do", file=sys.stderr)
        return 2
    sched = LrSchedule(cfg.lr, cfg.drop_every, cfg.drop_factor, cfg.max_drops)
    trace_path = os.path.join(cfg.out_dir, "trace.csv")
    mode = "a" if (cfg.resume and os.path.exists(trace_path)) else "w"
    with open(trace_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(TRACE_COLUMNS)

        def on_record(rec):
            writer.writerow([rec.iter, f"{rec.wall_seconds:.6f}", f"{rec.lr:.10g}",
                             f"{rec.elbo!r}", f"{rec.ema_elbo!r}"])

        result = train(model, params, data, kind=cfg.family, schedule=sched,
                       iters=cfg.iters, rng=RngStream(cfg.seed, 1),
                       batch_size=cfg.batch_size, n_mc=cfg.n_mc,
                       trace_every=cfg.trace_every, start_iter=start_iter,
                       adam=adam, ema=ema, on_record=on_record,
                       workers=cfg.workers)
    save_checkpoint(os.path.join(cfg.out_dir, "checkpoint.nt"), result.params,
                    it=cfg.iters, ema=result.ema, adam=result.adam)
    write_manifest(cfg, cfg.out_dir, "train", [cfg.data + ".bin", cfg.data + ".meta"])
    print(f"trained {cfg.iters - start_iter} iterations; final EMA ELBO {result.ema:.4f}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint or not cfg.data:
        print("error: --checkpoint and --data are required for eval", file=sys.stderr)
        return 2
    if not os.path.exists(cfg.checkpoint):
        print(f"error: checkpoint {cfg.checkpoint} not found", file=sys.stderr)
        return 2
    train_data = load_dataset(cfg.data)
    test_path = cfg.data.replace("_train", "_test")
    if test_path != cfg.data and os.path.exists(test_path + ".meta"):
        test_data = load_dataset(test_path)
    else:
        from .data import BranchData

        empty = [BranchData(np.zeros((0, train_data.covariate_dim)), np.zeros(0))
                 for _ in range(train_data.n_branches)]
        test_data = BranchDataset(empty, train_data.covariate_dim,
                                  train_data.has_covariates)
    from .data import SplitDataset

    split_ds = SplitDataset(train_data, test_data)
    model = build_model(cfg, train_data)
    params, _, _, _ = load_checkpoint(cfg.checkpoint)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report = evaluate(model, params, split_ds, cfg.k_samples, RngStream(cfg.seed, 3))
    write_report(report, os.path.join(cfg.out_dir, "report.txt"),
                 os.path.join(cfg.out_dir, "report.json"))
    write_manifest(cfg, cfg.out_dir, "eval", [cfg.data + ".bin", cfg.checkpoint])
    print(f"test_ll {report.test_ll:.4f}  train_ll {report.train_ll:.4f}  "
          f"train_elbo {report.train_elbo:.4f}  (K={report.k})")
    return 0


def cmd_convert(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        print("error: --checkpoint is required for convert", file=sys.stderr)
        return 2
    params, it, ema, _ = load_checkpoint(cfg.checkpoint)
    if not isinstance(params, JointFamily):
        print("error: convert expects a joint-family checkpoint", file=sys.stderr)
        return 2
    branch = joint_to_branch(params)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, "checkpoint_branch.nt")
    # Iteration resets: the converted params warm-start a fresh branch run.
    save_checkpoint(out_path, branch, it=0, ema=ema)
    # Spot check: theta marginal must be preserved exactly; conditional
    # densities agree up to any cross-branch coupling the joint carried.
    if params.structure == "dense":
        from .families import assemble_joint

        mean_b, cov_b = assemble_joint(branch)
        Lj = params.spec.cov()
        theta_err = max(float(np.max(np.abs(mean_b[:params.global_dim]
                                            - params.spec.mean[:params.global_dim]))),
                        float(np.max(np.abs(cov_b[:params.global_dim, :params.global_dim]
                                            - Lj[:params.global_dim, :params.global_dim]))))
        gen = RngStream(cfg.seed, 4).generator()
        worst = 0.0
        for _ in range(20):
            x = params.spec.mean + gen.standard_normal(params.total_dim)
            lq_joint = mvn_logpdf(params.spec, x)
            lq_branch = _branch_logq_at(branch, x)
            worst = max(worst, abs(lq_joint - lq_branch))
        print(f"theta-marginal max abs err {theta_err:.3e}; "
              f"density spot-check max |delta| {worst:.3e} "
              "(nonzero when the joint couples branches beyond theta)")
    print(f"wrote {out_path}")
    return 0


def _branch_logq_at(branch: BranchParams, x: np.ndarray) -> float:
    # Only reached for dense conversions (v is a GaussianSpec there).
    D, dz = branch.global_dim, branch.local_dim
    theta = x[:D]
    logq = mvn_logpdf(GaussianSpec(branch.v.mean, branch.v.chol), theta)
    for i, w in enumerate(branch.w):
        z = x[D + i * dz:D + (i + 1) * dz]
        mean = w.mu + (w.A @ theta if w.A is not None else 0.0)
        logq += mvn_logpdf(GaussianSpec(mean, w.chol), z)
    return logq


def cmd_check(_cfg: RunConfig) -> int:
    failures = run_checks()
    if failures:
        print(f"{failures} check(s) failed")
        return 1
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing.


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--family", choices=("joint", "branch", "amortized"))
    p.add_argument("--structure", choices=("dense", "block", "diag"))
    p.add_argument("--model", choices=("synthetic", "preference"))
    p.add_argument("--k-samples", dest="k_samples", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--branches", dest="n_branches", type=int)
    p.add_argument("--obs", dest="obs_per_branch", type=int)
    p.add_argument("--n-mc", dest="n_mc", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--drop-every", dest="drop_every", type=int)
    p.add_argument("--drop-factor", dest="drop_factor", type=float)
    p.add_argument("--max-drops", dest="max_drops", type=int)
    p.add_argument("--trace-every", dest="trace_every", type=int)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--resume")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="branchvi",
        description="Structured variational inference for two-level hierarchical models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "forward-sample a dataset (plus oracle for synthetic models)"),
        ("train", "optimize a variational family against a dataset"),
        ("eval", "compute sample-based metrics from a checkpoint"),
        ("convert", "re-express a dense joint checkpoint in branch form"),
        ("check", "run the fast self-diagnostic suite"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common_flags(p)
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (InvalidDataError, MalformedParamsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    handler = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
               "convert": cmd_convert, "check": cmd_check}[args.command]
    try:
        return handler(cfg)
    except (InvalidDataError, MalformedParamsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

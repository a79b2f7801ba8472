"""Fast self-diagnostic suite behind the ``check`` subcommand.

Each check prints one PASS/FAIL line; the suite is meant to finish in well
under a minute and to catch corrupted math (a flipped gamma, a broken
gradient) rather than to re-run the full test suite.
"""

from __future__ import annotations

import numpy as np

from . import gaussmath
from .amortize import AmortArch, init_amortized, net_forward
from .data import BranchData
from .estimators import MinibatchSampler, branch_elbo, subsampled_branch_elbo
from .families import branch_from_tree, branch_to_tree, init_branch
from .models import SyntheticConfig, synthetic_forward_sample, synthetic_model
from .optim import LrSchedule, lr_at
from .rng import RngStream
from .trees import tree_flatten, tree_unflatten


def _check_diag_transform():
    gen = RngStream(101).generator()
    x = gen.uniform(-50, 50, size=2000)
    for gamma in (0.5, 1.0, 2.0):
        y = gaussmath.diag_transform(x, gamma)
        if not np.all(y > 0):
            return False
        if not np.allclose(y * gaussmath.diag_transform(-x, gamma), gamma,
                           rtol=1e-9, atol=1e-12):
            return False
    xs = np.sort(x)
    return bool(np.all(np.diff(gaussmath.diag_transform(xs, 1.0)) > 0))


def _check_diag_transform_grad():
    xs = np.array([-5.0, -1.0, 0.0, 1.0, 5.0])
    h = 1e-6
    fd = (gaussmath.diag_transform(xs + h, 1.0) - gaussmath.diag_transform(xs - h, 1.0)) / (2 * h)
    return bool(np.allclose(fd, gaussmath.diag_transform_grad(xs, 1.0), rtol=1e-5))


def _check_tril_roundtrip():
    gen = RngStream(102).generator()
    for d in (1, 3, 5):
        raw = gen.standard_normal(d * (d + 1) // 2)
        u = gaussmath.UnconstrainedChol(raw, d)
        L = gaussmath.tril_map(u)
        if np.any(np.diag(L) <= 0):
            return False
        back = gaussmath.tril_unmap(L, 1.0)
        if not np.allclose(back.raw, raw, atol=1e-12):
            return False
    return True


def _check_sample_density_consistency():
    gen = RngStream(103).generator()
    d = 4
    spec = gaussmath.GaussianSpec(
        gen.standard_normal(d),
        gaussmath.UnconstrainedChol(gen.standard_normal(d * (d + 1) // 2), d))
    for k in range(50):
        x, lq = gaussmath.mvn_sample(spec, RngStream(103, k))
        if abs(lq - gaussmath.mvn_logpdf(spec, x)) > 1e-10:
            return False
    return True


def _small_problem():
    cfg = SyntheticConfig(2, 4, (3, 3, 3, 3))
    data, _ = synthetic_forward_sample(cfg, RngStream(104))
    model = synthetic_model(2, 4, (3, 3, 3, 3))
    return model, data


def _check_estimator_gradients():
    model, data = _small_problem()
    params = init_branch("dense", 2, 2, 4)
    template = branch_to_tree(params)
    flat = tree_flatten(template) + RngStream(105).generator().standard_normal(
        tree_flatten(template).size) * 0.2
    params = branch_from_tree(params, tree_unflatten(template, flat))
    est, grads = branch_elbo(model, params, data, RngStream(106), n_mc=2)
    gflat = np.concatenate([grads[k].ravel() for k in template])
    h = 1e-5
    base = tree_flatten(branch_to_tree(params))
    gen = RngStream(107).generator()
    for j in gen.choice(base.size, size=min(12, base.size), replace=False):
        fp = base.copy(); fp[j] += h
        fm = base.copy(); fm[j] -= h
        vp, _ = branch_elbo(model, branch_from_tree(params, tree_unflatten(template, fp)),
                            data, RngStream(106), n_mc=2, want_grad=False)
        vm, _ = branch_elbo(model, branch_from_tree(params, tree_unflatten(template, fm)),
                            data, RngStream(106), n_mc=2, want_grad=False)
        fd = (vp.value - vm.value) / (2 * h)
        if abs(fd - gflat[j]) / max(abs(fd), 1e-6) > 1e-3:
            return False
    return True


def _check_full_batch_bitwise():
    model, data = _small_problem()
    params = init_branch("dense", 2, 2, 4)
    e1, g1 = branch_elbo(model, params, data, RngStream(108), n_mc=3)
    e2, g2 = subsampled_branch_elbo(model, params, data, MinibatchSampler(4, 4),
                                    RngStream(108), n_mc=3)
    return e1.value == e2.value and all(np.array_equal(g1[k], g2[k]) for k in g1)


def _check_subsampling_unbiased():
    model, data = _small_problem()
    params = init_branch("dense", 2, 2, 4)
    sampler = MinibatchSampler(4, 2)
    full = np.array([branch_elbo(model, params, data, RngStream(109, k), n_mc=1,
                                 want_grad=False)[0].value for k in range(1500)])
    sub = np.array([subsampled_branch_elbo(model, params, data, sampler,
                                           RngStream(110, k), n_mc=1,
                                           want_grad=False)[0].value for k in range(1500)])
    se = np.sqrt(full.var() / full.size + sub.var() / sub.size)
    return abs(full.mean() - sub.mean()) < 4.0 * se


def _check_net_invariance():
    ap = init_amortized("dense", 2, 2, 2, RngStream(111), AmortArch((4, 4), (5, 5)))
    gen = RngStream(112).generator()
    b = BranchData(gen.standard_normal((6, 2)), gen.standard_normal(6))
    w1, _ = net_forward(ap.net, b)
    perm = gen.permutation(6)
    w2, _ = net_forward(ap.net, BranchData(b.x[perm], b.y[perm]))
    return (np.array_equal(w1.mu, w2.mu) and np.array_equal(w1.A, w2.A)
            and np.array_equal(w1.chol.raw, w2.chol.raw))


def _check_schedule():
    sched = LrSchedule(1e-3, 50_000, 0.1, 3)
    return (lr_at(sched, 0) == 1e-3 and abs(lr_at(sched, 50_000) - 1e-4) < 1e-18
            and abs(lr_at(sched, 150_000) - 1e-6) < 1e-20)


CHECKS = [
    ("diag-transform identities", _check_diag_transform),
    ("diag-transform gradient", _check_diag_transform_grad),
    ("tril round-trip", _check_tril_roundtrip),
    ("sample/density consistency", _check_sample_density_consistency),
    ("branch estimator gradient", _check_estimator_gradients),
    ("full-batch bitwise equality", _check_full_batch_bitwise),
    ("subsampling unbiasedness", _check_subsampling_unbiased),
    ("net permutation invariance", _check_net_invariance),
    ("step-drop schedule", _check_schedule),
]


def run_checks(out=print) -> int:
    """Run the suite; returns the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        try:
            ok = fn()
        except Exception as exc:  # a crash is a failure with context
            ok = False
            out(f"FAIL {name} (exception: {exc})")
            failures += 1
            continue
        if ok:
            out(f"PASS {name}")
        else:
            out(f"FAIL {name}")
            failures += 1
    return failures

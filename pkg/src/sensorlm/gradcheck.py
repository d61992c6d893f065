"""Finite-difference verification of every differentiable operation and of
the full merged-model loss.

Each check compares analytic gradients against central differences at
h=1e-3 and must stay under 1e-3 relative error. The merged-model check
subsamples coordinates per parameter to keep the run under a minute.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .adapter import AdapterConfig, build_merged_model, merged_forward, trainable_params
from .data import gen_task_data
from .encoders import EncoderConfig
from .lm import LM_PRESETS
from .tasks import registry_by_name, registry_default, task_loss

TOL = 1e-3
H = 1e-3


def _rand(rng, shape):
    return ad.Tensor(rng.normal(0.0, 1.0, size=shape).astype(np.float32),
                     requires_grad=True)


def op_checks(seed: int = 0):
    """(name, params, scalar-builder) triples for every differentiable op."""
    rng = np.random.default_rng(seed)
    checks = []

    a = _rand(rng, (3, 4))
    b = _rand(rng, (3, 4))
    mix = ad.Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    for tag in ("add", "sub", "mul"):
        checks.append((f"elementwise_{tag}",
                       [a, b],
                       lambda tag=tag: ad.reduce(ad.mul(ad.elementwise(tag, a, b), mix), "sum")))
    for tag in ("relu", "gelu", "tanh", "exp"):
        x = _rand(rng, (6,))
        checks.append((f"elementwise_{tag}",
                       [x],
                       lambda tag=tag, x=x: ad.reduce(ad.elementwise(tag, x), "sum")))
    x = _rand(rng, (5,))
    checks.append(("elementwise_scale", [x],
                   lambda x=x: ad.reduce(ad.elementwise("scale", x, 1.7), "sum")))

    m1 = _rand(rng, (3, 4))
    m2 = _rand(rng, (4, 2))
    checks.append(("matmul", [m1, m2],
                   lambda: ad.reduce(ad.mul(ad.matmul(m1, m2), ad.matmul(m1, m2)), "sum")))

    sx = _rand(rng, (4, 5))
    smix = ad.Tensor(rng.normal(size=(4, 5)).astype(np.float32))
    checks.append(("softmax", [sx],
                   lambda: ad.reduce(ad.mul(ad.softmax(sx, axis=1), smix), "sum")))

    lx = _rand(rng, (3, 6))
    gain = _rand(rng, (6,))
    bias = _rand(rng, (6,))
    lmix = ad.Tensor(rng.normal(size=(3, 6)).astype(np.float32))
    checks.append(("layer_norm", [lx, gain, bias],
                   lambda: ad.reduce(ad.mul(ad.layer_norm(lx, gain, bias), lmix), "sum")))

    c1 = _rand(rng, (2, 3))
    c2 = _rand(rng, (4, 3))
    cmix = ad.Tensor(rng.normal(size=(6, 3)).astype(np.float32))
    checks.append(("concat_tokens", [c1, c2],
                   lambda: ad.reduce(ad.mul(ad.concat_tokens([c1, c2]), cmix), "sum")))

    table = _rand(rng, (5, 3))
    gmix = ad.Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    checks.append(("gather_rows", [table],
                   lambda: ad.reduce(ad.mul(ad.gather_rows(table, [0, 2, 2, 4]), gmix), "sum")))

    rx = _rand(rng, (3, 4))
    rmix = ad.Tensor(rng.normal(size=(3,)).astype(np.float32))
    checks.append(("reduce_sum_axis", [rx],
                   lambda: ad.reduce(ad.mul(ad.reduce(rx, "sum", axis=1), rmix), "sum")))
    checks.append(("reduce_mean", [rx], lambda: ad.reduce(rx, "mean")))

    q = _rand(rng, (5, 8))
    k = _rand(rng, (5, 8))
    v = _rand(rng, (5, 8))
    amix = ad.Tensor(rng.normal(size=(5, 8)).astype(np.float32))
    checks.append(("attention_causal", [q, k, v],
                   lambda: ad.reduce(ad.mul(nn.attention_apply(q, k, v, 2, True), amix), "sum")))

    ax = _rand(rng, (4, 3))
    aw = _rand(rng, (3, 2))
    ab = _rand(rng, (2,))
    fmix = ad.Tensor(rng.normal(size=(4, 2)).astype(np.float32))
    checks.append(("affine", [ax, aw, ab],
                   lambda: ad.reduce(ad.mul(ad.affine(ax, aw, ab), fmix), "sum")))

    logits = _rand(rng, (4, 6))
    checks.append(("cross_entropy", [logits],
                   lambda: nn.cross_entropy(logits, [1, 5, -1, 0])))

    pred = _rand(rng, (2, 5))
    tgt = ad.Tensor(rng.normal(size=(2, 5)).astype(np.float32))
    checks.append(("mse_loss", [pred], lambda: nn.mse_loss(pred, tgt)))

    bp = nn.ParamSet()
    nn.init_transformer_block(bp, "blk", 8, rng)
    bx = _rand(rng, (3, 8))
    bmix = ad.Tensor(rng.normal(size=(3, 8)).astype(np.float32))
    block_params = [bp[p] for p in bp.paths()]
    checks.append(("transformer_block", [bx] + block_params,
                   lambda: ad.reduce(ad.mul(nn.transformer_block_apply(bp, "blk", bx, 2), bmix), "sum")))
    return checks


def merged_model_check(seed: int = 0, insertion_mode: str = "input_prefix",
                       max_coords: int = 6):
    """Finite differences through the complete merged-model loss on two
    random samples, coordinate-subsampled per parameter."""
    registry = registry_default()
    model = build_merged_model(LM_PRESETS["tiny"], EncoderConfig(d=64),
                               AdapterConfig(prefix_len=24, insertion_mode=insertion_mode),
                               registry, seed=seed)
    gaze = registry_by_name(registry)["gaze"]
    event = registry_by_name(registry)["event"]
    s1 = gen_task_data("gaze", 1, seed=seed + 10)[0]
    s2 = gen_task_data("event", 1, seed=seed + 11)[0]
    # move the zero-initialized parameters off their saddle so the check
    # exercises real gradient paths
    rng = np.random.default_rng(seed + 5)
    view = trainable_params(model)
    for path in view.trainable_paths():
        t = view[path]
        t.data = t.data + rng.normal(0.0, 0.05, size=t.data.shape).astype(np.float32)

    def f():
        out1 = merged_forward(model, s1, gaze.task_id)
        out2 = merged_forward(model, s2, event.task_id, text_ids=[257, 72, 105, 258])
        l1 = task_loss(gaze, out1.head_output, s1.label)
        l2 = task_loss(event, out2.head_output, s2.label)
        l3 = nn.cross_entropy(out2.logits, [72, 105, 258, -1])
        return ad.add(ad.add(l1, l2), l3)

    params = [view[p] for p in view.trainable_paths()]
    return ad.finite_diff_check(f, params, h=H, tol=TOL,
                                max_coords_per_param=max_coords, seed=seed)


def run_gradcheck(seed: int = 0, out=print) -> bool:
    ok = True
    for name, params, f in op_checks(seed):
        report = ad.finite_diff_check(f, params, h=H, tol=TOL)
        status = "pass" if report.passed else "FAIL"
        out(f"[{status}] {name}: max_rel_err={report.max_rel_err:.3e} "
            f"({report.n_coords} coords)")
        ok = ok and report.passed
    for mode in ("input_prefix", "per_layer_prefix"):
        report = merged_model_check(seed=seed, insertion_mode=mode)
        status = "pass" if report.passed else "FAIL"
        out(f"[{status}] merged_model[{mode}]: max_rel_err={report.max_rel_err:.3e} "
            f"({report.n_coords} coords)")
        ok = ok and report.passed
    return ok

"""Finite-difference verification of the autodiff engine.

The checker treats central differences as ground truth: for every input
element it perturbs by +/-h, recomputes a scalar projection of the output,
and compares the quotient against the reverse-mode gradient.  The op table
below drives both the test suite and the `gradcheck` CLI subcommand; a case
fails loudly with the op name so a planted wrong vjp is attributable.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def numeric_grad(fn, inputs, h=1e-5):
    """Central-difference gradients of scalar-valued fn at `inputs`.

    fn maps a list of numpy arrays to a float.  Returns one array per input.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    grads = []
    for k, x in enumerate(inputs):
        g = np.zeros_like(x)
        flat, gflat = x.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(inputs)
            flat[i] = orig - h
            fm = fn(inputs)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grad(build, inputs):
    """Reverse-mode gradients of the same scalar graph.

    build maps a list of Tensors to a scalar Tensor.
    """
    ts = [ad.Tensor(x, requires_grad=True) for x in inputs]
    out = build(ts)
    ad.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad)
            for t in ts]


def max_rel_error(build, inputs, h=1e-5):
    """Worst-case relative disagreement between reverse mode and differences."""
    ana = analytic_grad(build, [np.array(x, dtype=np.float64) for x in inputs])

    def as_scalar(arrs):
        with ad.no_grad():
            return float(build([ad.Tensor(a) for a in arrs]).data)

    num = numeric_grad(as_scalar, inputs, h=h)
    worst = 0.0
    for a, n in zip(ana, num):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@dataclass
class Case:
    """One op under test: a graph builder plus an input sampler."""

    name: str
    build: callable
    sample: callable
    tol: float = 1e-4


def _proj(t, rng):
    """Random fixed projection to a scalar so every output element matters."""
    w = ad.Tensor(rng.normal(size=t.shape))
    return ad.sum_(t * w)


def _mk_elementwise(opname, op, low=-2.0, high=2.0, shape=(3, 4), signed_gap=False):
    def build_factory(rng):
        with ad.no_grad():
            out_shape = op(ad.Tensor(np.ones(shape))).shape
        w = rng.normal(size=out_shape)

        def build(ts):
            return ad.sum_(op(ts[0]) * ad.Tensor(w))

        return build

    def sample(rng):
        x = rng.uniform(low, high, size=shape)
        if signed_gap:  # both signs, but keep |x| >= low away from the kink at 0
            x *= rng.choice([-1.0, 1.0], size=shape)
        return [x]

    return Case(opname, build_factory, sample)


def _binary(opname, op, shape=(3, 4), low=-2.0, high=2.0):
    def build_factory(rng):
        with ad.no_grad():
            out_shape = op(ad.Tensor(np.ones(shape)), ad.Tensor(np.ones(shape))).shape
        w = rng.normal(size=out_shape)

        def build(ts):
            return ad.sum_(op(ts[0], ts[1]) * ad.Tensor(w))

        return build

    def sample(rng):
        return [rng.uniform(low, high, size=shape),
                rng.uniform(low, high, size=shape)]

    return Case(opname, build_factory, sample)


def _conv_case():
    def build_factory(rng):
        def build(ts):
            y = ad.conv2d(ts[0], ts[1], ts[2], stride=2, padding=1)
            return _proj(y, np.random.default_rng(7))

        return build

    def sample(rng):
        return [rng.normal(size=(2, 2, 5, 6)), rng.normal(size=(3, 2, 3, 3)),
                rng.normal(size=(3,))]

    return Case("conv2d", build_factory, sample)


def _grouped_conv_case():
    def build_factory(rng):
        def build(ts):
            y = ad.conv2d(ts[0], ts[1], stride=1, padding=1, groups=2)
            return _proj(y, np.random.default_rng(8))

        return build

    def sample(rng):
        return [rng.normal(size=(1, 4, 4, 4)), rng.normal(size=(4, 2, 3, 3))]

    return Case("conv2d_groups", build_factory, sample)


def _matmul_case():
    def build_factory(rng):
        def build(ts):
            return _proj(ad.matmul(ts[0], ts[1]), np.random.default_rng(9))

        return build

    def sample(rng):
        return [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))]

    return Case("matmul", build_factory, sample)


def _take_case():
    idx = None

    def build_factory(rng):
        nonlocal idx
        idx = rng.integers(0, 12, size=(2, 9))

        def build(ts):
            return _proj(ad.take(ts[0], idx), np.random.default_rng(10))

        return build

    def sample(rng):
        return [rng.normal(size=(3, 4))]

    return Case("take", build_factory, sample)


def _upsample_case(mode):
    def build_factory(rng):
        def build(ts):
            return _proj(ad.upsample(ts[0], 2, mode), np.random.default_rng(11))

        return build

    def sample(rng):
        return [rng.normal(size=(1, 2, 3, 4))]

    return Case(f"upsample_{mode}", build_factory, sample)


def _softmax_case():
    def build_factory(rng):
        def build(ts):
            return _proj(ad.softmax(ts[0], axis=-1), np.random.default_rng(12))

        return build

    def sample(rng):
        return [rng.normal(size=(3, 5))]

    return Case("softmax", build_factory, sample)


def _layernorm_case():
    def build_factory(rng):
        def build(ts):
            return _proj(ad.layernorm(ts[0], -1, ts[1], ts[2]),
                         np.random.default_rng(13))

        return build

    def sample(rng):
        return [rng.normal(size=(4, 6)), rng.uniform(0.5, 1.5, size=6),
                rng.normal(size=6)]

    return Case("layernorm", build_factory, sample)


def _reflect_case():
    def build_factory(rng):
        def build(ts):
            return _proj(ad.reflect_pad2d(ts[0], 1), np.random.default_rng(14))

        return build

    def sample(rng):
        return [rng.normal(size=(1, 2, 4, 5))]

    return Case("reflect_pad2d", build_factory, sample)


def _minimum_case():
    """Pairs kept > 1e-2 apart so differences never straddle the branch point."""

    def build_factory(rng):
        w = rng.normal(size=(3, 4))

        def build(ts):
            return ad.sum_(ad.minimum(ts[0], ts[1]) * ad.Tensor(w))

        return build

    def sample(rng):
        a = rng.uniform(-2.0, 2.0, size=(3, 4))
        gap = rng.uniform(0.01, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
        return [a, a + gap]

    return Case("minimum", build_factory, sample)


def _clamp_case():
    """Inputs nudged off the clamp edges at +/-1 for the same reason."""

    def build_factory(rng):
        w = rng.normal(size=(3, 4))

        def build(ts):
            return ad.sum_(ad.clamp(ts[0], -1.0, 1.0) * ad.Tensor(w))

        return build

    def sample(rng):
        x = rng.uniform(-3.0, 3.0, size=(3, 4))
        near = np.abs(np.abs(x) - 1.0) < 1e-3
        return [np.where(near, x + 5e-3, x)]

    return Case("clamp", build_factory, sample)


def _composed_case():
    """conv -> gelu -> upsample -> sigmoid -> mean: several records deep.

    All pieces are smooth, so differences stay trustworthy end to end.
    """

    def build_factory(rng):
        def build(ts):
            x, w, b = ts
            y = ad.conv2d(x, w, b, stride=2, padding=1)
            y = ad.gelu(y)
            y = ad.upsample(y, 2, "bilinear")
            y = ad.sigmoid(y)
            return ad.mean(y * y)

        return build

    def sample(rng):
        return [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)),
                rng.normal(size=(3,))]

    return Case("composed_chain", build_factory, sample, tol=1e-3)


def _depth_warp_chain_case():
    """Raw logits -> disparity -> depth -> project -> warp -> photometric.

    The full differentiable path a training step takes from decoder output
    and source image to the scalar loss, under a fixed small camera motion.
    Bilinear sampling kinks at integer pixel coordinates, so the sampler
    redraws until every sample position sits clear of them (the +/-h probes
    move positions by ~1e-6 px, far less than the 1e-3 px guard band).
    """
    from .geometry import (DepthRange, Intrinsics, backproject,
                           disp_to_depth, project, warp)
    from .losses import photometric
    from .posenet import Pose6DoF, se3_exp

    hh, ww = 5, 5
    k = Intrinsics(fx=5.0, fy=5.0, cx=(ww - 1) / 2.0, cy=(hh - 1) / 2.0)
    drange = DepthRange(1.0, 10.0)
    # positive t_z pushes points away from the source camera, so the
    # projected grid contracts toward the image center and every sample
    # position stays strictly inside the frame
    vec = np.array([0.01, -0.015, 0.02, 0.01, -0.01, 0.2])
    with ad.no_grad():
        pose = se3_exp(Pose6DoF(ad.Tensor(vec[None, :3]),
                                ad.Tensor(vec[None, 3:])))

    def fwd_grid(logits):
        with ad.no_grad():
            depth = disp_to_depth(ad.sigmoid(ad.Tensor(logits)), drange)
            return project(backproject(depth, k), pose, k)

    def build_factory(rng):
        tgt = rng.uniform(0.2, 0.8, size=(1, 3, hh, ww))

        def build(ts):
            depth = disp_to_depth(ad.sigmoid(ts[0]), drange)
            grid, _ = project(backproject(depth, k), pose, k)
            recon = warp(ts[1], grid)
            return ad.mean(photometric(recon, ad.Tensor(tgt)))

        return build

    def sample(rng):
        while True:
            logits = rng.normal(0.0, 0.4, size=(1, 1, hh, ww))
            src = rng.uniform(0.2, 0.8, size=(1, 3, hh, ww))
            grid, valid = fwd_grid(logits)
            frac = grid.data - np.round(grid.data)
            if valid.all() and np.abs(frac).min() > 1e-3:
                return [logits, src]
            # redraw: some position hit the frame border or a pixel kink

    return Case("depth_warp_chain", build_factory, sample, tol=1e-3)


# inputs for log/sqrt/div keep clear of the singular point at 0
DEFAULT_CASES = [
    _binary("add", ad.add),
    _binary("sub", ad.sub),
    _binary("mul", ad.mul),
    _binary("div", ad.div, low=0.5, high=2.0),
    _mk_elementwise("neg", ad.neg),
    _mk_elementwise("abs", ad.abs_, low=0.2, high=2.0, signed_gap=True),
    _mk_elementwise("exp", ad.exp),
    _mk_elementwise("sin", ad.sin),
    _mk_elementwise("cos", ad.cos),
    _mk_elementwise("log", ad.log, low=0.3, high=3.0),
    _mk_elementwise("sqrt", ad.sqrt, low=0.3, high=3.0),
    _mk_elementwise("relu", ad.relu, low=0.2, high=2.0, signed_gap=True),
    _mk_elementwise("sigmoid", ad.sigmoid),
    _mk_elementwise("gelu", ad.gelu),
    _minimum_case(),
    _clamp_case(),
    _mk_elementwise("sum_axis", lambda t: ad.sum_(t, axis=1, keepdims=True)),
    _mk_elementwise("mean_axis", lambda t: ad.mean(t, axis=0, keepdims=True)),
    _mk_elementwise("reshape", lambda t: ad.reshape(t, (4, 3))),
    _mk_elementwise("permute", lambda t: ad.permute(t, (1, 0))),
    _binary("concat", lambda a, b: ad.concat([a, b], axis=1)),
    _mk_elementwise("slice", lambda t: t[:, 1:3]),
    _matmul_case(),
    _conv_case(),
    _grouped_conv_case(),
    _take_case(),
    _upsample_case("nearest"),
    _upsample_case("bilinear"),
    _softmax_case(),
    _layernorm_case(),
    _reflect_case(),
    _composed_case(),
    _depth_warp_chain_case(),
]


def run_cases(cases=None, trials=3, seed=0, h=1e-5):
    """Run every case `trials` times; return list of (name, worst_err, tol, ok)."""
    cases = DEFAULT_CASES if cases is None else cases
    results = []
    for case in cases:
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            build = case.build(rng)
            inputs = case.sample(rng)
            worst = max(worst, max_rel_error(build, inputs, h=h))
        results.append((case.name, worst, case.tol, worst < case.tol))
    return results

"""Shared fixture builders for the test suite."""

import numpy as np

from lirls.irls import Problem, wiener_init
from lirls.operators import BlurOperator, CfaOperator, FilterBank, SrOperator
from lirls.priors import PriorSpec


def gaussian_kernel(size, sigma):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def smooth_image(shape, seed):
    """Synthetic piecewise-smooth test image in [0, 1]: low-frequency blobs,
    hard edges, and fine texture, deterministic per seed."""
    c, h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = np.zeros((h, w))
    for _ in range(5):
        cy, cx = rng.random(2)
        rad = rng.uniform(0.08, 0.3)
        base += rng.uniform(0.2, 0.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2))
    for _ in range(6):
        fy, fx = rng.uniform(3, 14, 2)
        base += rng.uniform(0.03, 0.09) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 6.28))
    base[:, rng.integers(w // 4, 3 * w // 4):] += rng.uniform(0.2, 0.45)
    base[rng.integers(h // 4, 3 * h // 4):, :] += rng.uniform(0.15, 0.3)
    sz = max(min(h, w) // 4, 2)
    cy0, cx0 = rng.integers(0, h - sz), rng.integers(0, w - sz)
    base[cy0 : cy0 + sz, cx0 : cx0 + sz] += (np.indices((sz, sz)).sum(axis=0) % 2) * rng.uniform(0.1, 0.2)
    img = np.zeros((c, h, w))
    for ch in range(c):
        img[ch] = base * rng.uniform(0.7, 1.0) + 0.1 * rng.random()
    img -= img.min()
    img /= img.max()
    return img


def gradient_filters(channels, mode="sparse", scale=1.0):
    from lirls.operators import builtin_filter_bank

    return builtin_filter_bank("grad", channels, mode=mode, scale=scale)


def make_problem(
    seed,
    shape=(3, 24, 24),
    task="deblur",
    family="sparse",
    p=1.0,
    gamma=1e-4,
    weight_scale=1.0,
    noise=0.01,
    kernel_size=5,
    kernel_sigma=1.0,
    filters=None,
    filter_scale=1.0,
    sr_scale=2,
    x0="wiener",
):
    rng = np.random.default_rng(seed)
    gt = smooth_image(shape, seed)
    if task == "deblur":
        op = BlurOperator(gaussian_kernel(kernel_size, kernel_sigma), shape)
    elif task == "sr":
        op = SrOperator(gaussian_kernel(kernel_size, kernel_sigma), sr_scale, shape)
    elif task == "demosaick":
        op = CfaOperator(shape)
    else:
        raise ValueError(task)
    y = op.apply(gt) + noise * rng.standard_normal(op.out_shape)
    mode = "sparse" if family == "sparse" else "low_rank"
    if filters is None:
        filters = gradient_filters(shape[0], mode=mode, scale=filter_scale)
    bank = FilterBank(filters, shape, mode=mode)
    size = bank.num_filters if family == "sparse" else shape[0]
    prior = PriorSpec.fixed(family, size, p=p, gamma=gamma, scale=weight_scale)
    problem = Problem(op, y, max(noise, 1e-4), bank, prior, np.zeros(shape))
    if isinstance(x0, str) and x0 == "wiener":
        problem.x0 = wiener_init(problem)
    else:
        problem.x0 = np.asarray(x0, dtype=np.float64)
    return problem, gt

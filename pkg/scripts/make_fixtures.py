"""Generate the committed test fixtures: degraded images, kernels, dataset
images for training, and baseline metrics produced by the in-repo initializer
oracles (Wiener, bicubic). The quality margins asserted by the acceptance
suite are measured against these committed baselines.

Run from the repository root:  python3 scripts/make_fixtures.py
"""

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

from util import gaussian_kernel, smooth_image  # noqa: E402

from lirls.image import psnr, save_pfm  # noqa: E402
from lirls.irls import (  # noqa: E402
    Problem,
    _bicubic_resize,
    _replicate_pad,
    inference_limits,
    irls_solve,
    wiener_init,
)
from lirls.operators import BlurOperator, FilterBank, SrOperator, builtin_filter_bank, save_kernel  # noqa: E402
from lirls.priors import PriorSpec  # noqa: E402

FIXTURES = ROOT / "tests" / "fixtures"


def l1_problem(op, y, sigma, shape, weight):
    bank = FilterBank(builtin_filter_bank("grad_color", shape[0]), shape)
    prior = PriorSpec.fixed("sparse", bank.num_filters, p=1.0, gamma=1e-4, scale=weight)
    problem = Problem(op, y, sigma, bank, prior, np.zeros(shape))
    problem.x0 = wiener_init(problem)
    return problem


def tune_weight(op, y, sigma, shape, gt, candidates):
    best = None
    for weight in candidates:
        problem = l1_problem(op, y, sigma, shape, weight)
        x, state = irls_solve(problem, inference_limits(extended=True))
        score = psnr(x, gt)
        print(f"  w={weight:g}: psnr {score:.3f} (converged={state.converged}, steps={state.k})")
        if best is None or score > best[1]:
            best = (weight, score)
    return best


def make_deblur():
    out = FIXTURES / "deblur64"
    out.mkdir(parents=True, exist_ok=True)
    shape = (3, 64, 64)
    gt = smooth_image(shape, 2024)
    kernel = gaussian_kernel(9, 1.6)
    op = BlurOperator(kernel, shape)
    rng = np.random.default_rng(77)
    sigma = 0.01
    y = op.apply(gt) + sigma * rng.standard_normal(op.out_shape)
    save_pfm(out / "gt.pfm", gt)
    save_pfm(out / "y.pfm", y)
    save_kernel(out / "kernel.txt", kernel)
    problem = Problem(op, y, sigma, None, None, np.zeros(shape))
    x0 = wiener_init(problem)
    wiener_psnr = psnr(x0, gt)
    padded_psnr = psnr(_replicate_pad(y, 9, 9), gt)
    print(f"deblur64: wiener {wiener_psnr:.3f} dB, padded input {padded_psnr:.3f} dB")
    weight, best = tune_weight(op, y, sigma, shape, gt, [0.5, 1.0, 2.0, 3.0])
    print(f"deblur64: best l1 weight {weight} -> {best:.3f} dB")
    meta = {
        "sigma": sigma,
        "wiener_psnr": wiener_psnr,
        "padded_psnr": padded_psnr,
        "l1_weight": weight,
        "l1_psnr_at_generation": best,
    }
    (out / "baselines.json").write_text(json.dumps(meta, indent=2))


def make_sr():
    out = FIXTURES / "sr2"
    out.mkdir(parents=True, exist_ok=True)
    shape = (3, 64, 64)
    gt = smooth_image(shape, 4096)
    kernel = gaussian_kernel(7, 1.2)
    op = SrOperator(kernel, 2, shape)
    rng = np.random.default_rng(78)
    sigma = 0.01
    y = op.apply(gt) + sigma * rng.standard_normal(op.out_shape)
    save_pfm(out / "gt.pfm", gt)
    save_pfm(out / "y.pfm", y)
    save_kernel(out / "kernel.txt", kernel)
    up = _bicubic_resize(y, op.blur.out_shape[1:])
    bicubic = _replicate_pad(up, 7, 7)
    bicubic_psnr = psnr(bicubic, gt)
    print(f"sr2: bicubic {bicubic_psnr:.3f} dB")
    weight, best = tune_weight(op, y, sigma, shape, gt, [1.0, 2.0, 3.0, 5.0])
    print(f"sr2: best l1 weight {weight} -> {best:.3f} dB")
    meta = {
        "sigma": sigma,
        "bicubic_psnr": bicubic_psnr,
        "l1_weight": weight,
        "l1_psnr_at_generation": best,
    }
    (out / "baselines.json").write_text(json.dumps(meta, indent=2))


def make_dataset():
    out = FIXTURES / "dataset"
    out.mkdir(parents=True, exist_ok=True)
    for i in range(8):
        save_pfm(out / f"img{i:02d}.pfm", smooth_image((3, 96, 96), 7000 + i))
    print(f"dataset: 8 images in {out}")


if __name__ == "__main__":
    make_deblur()
    make_sr()
    make_dataset()

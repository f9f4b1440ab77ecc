#!/usr/bin/env python3
"""Compare the compiled convolution kernels against the numpy fallback.

Each backend runs in its own subprocess (the backend is chosen at import
time), measures the unfold/fold kernels on the encoder- and decoder-shaped
workloads plus one full optimizer step, and reports medians. The parent
checks that both backends produced bit-identical numerics before printing
the table.

    python3 benchmarks/bench_kernels.py [--batch 64] [--reps 20]
"""

import argparse
import hashlib
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

# padded input shapes seen by im2col during an extent-32 forward pass, and
# the matching column shapes col2im folds during the backward/deconv pass
KERNEL_CASES = [
    # (label, channels, padded extent)
    ("conv  1x34x34 k4 s2", 1, 34),
    ("conv 32x18x18 k4 s2", 32, 18),
    ("conv 64x10x10 k4 s2", 64, 10),
]


def _time(fn, reps: int) -> float:
    fn()  # warm up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(times)


def run_worker(batch: int, reps: int) -> None:
    from discondvae import backend
    from discondvae.cli import RunConfig
    from discondvae.models import DiscondVAE
    from discondvae.objective import discond_loss
    from discondvae.optim import Adam
    from discondvae.rng import RandomSource
    from discondvae.tensor import Tensor, backward as tensor_backward

    digest = hashlib.sha256()
    result = {"backend": backend.backend_name(), "kernels": {}}

    rs = np.random.RandomState(0)
    for label, channels, extent in KERNEL_CASES:
        xp = rs.rand(batch, channels, extent, extent).astype(np.float32)
        cols = backend.im2col(xp, 4, 4, 2, 2)
        digest.update(cols.tobytes())
        folded = backend.col2im(cols, extent, extent, 4, 4, 2, 2)
        digest.update(folded.tobytes())
        result["kernels"][label] = {
            "im2col_ms": _time(lambda: backend.im2col(xp, 4, 4, 2, 2), reps),
            "col2im_ms": _time(lambda: backend.col2im(cols, extent, extent, 4, 4, 2, 2), reps),
        }

    cfg = RunConfig.from_dict(dict(
        name="bench", dataset="condsprites", variant="exact", public_dim=5,
        private_dim=3, num_classes=2, image_extent=32, beta_z=30.0, beta_w=30.0,
        beta_c=30.0, cap_z=30.0, cap_w=30.0, cap_c=5.0, ramp_iters=25000,
        learning_rate=5e-4, epochs=1, batch_size=batch, seed=0,
        prior_policy="fixed_zero", temperature=0.67,
    ))
    rng = RandomSource(cfg.seed)
    model = DiscondVAE(cfg.model_config(), rng)
    opt = Adam(model.params, lr=cfg.learning_rate)
    weights = cfg.loss_weights()
    x = Tensor((np.random.RandomState(1).rand(batch, 1, 32, 32) < 0.5)
               .astype(np.float32))

    def step(it=[0]):
        it[0] += 1
        out, sample, logits = model.forward(x, rng)
        loss = discond_loss(x, out, logits, model.prior_mu, weights, it[0])
        opt.zero_grad()
        tensor_backward(loss.total)
        opt.step()
        return loss.total.item()

    result["step_ms"] = _time(step, max(5, reps // 2))
    digest.update(np.float64(step()).tobytes())
    result["digest"] = digest.hexdigest()
    json.dump(result, sys.stdout)


def launch(batch: int, reps: int, pure_py: bool) -> dict:
    env = dict(os.environ)
    if pure_py:
        env["DISCONDVAE_PURE_PY"] = "1"
    else:
        env.pop("DISCONDVAE_PURE_PY", None)
    proc = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--worker",
         "--batch", str(batch), "--reps", str(reps)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(proc.stdout)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        run_worker(args.batch, args.reps)
        return 0

    compiled = launch(args.batch, args.reps, pure_py=False)
    fallback = launch(args.batch, args.reps, pure_py=True)
    if compiled["backend"] == fallback["backend"]:
        print("compiled extension unavailable; both runs used the numpy fallback")
    if compiled["digest"] != fallback["digest"]:
        print("ERROR: backends disagree numerically", file=sys.stderr)
        return 1

    print(f"batch={args.batch}, reps={args.reps}, medians in ms "
          f"({compiled['backend']} vs {fallback['backend']}); "
          "identical numerics verified\n")
    header = f"{'case':<26} {'op':<7} {compiled['backend']:>9} {fallback['backend']:>9} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label in compiled["kernels"]:
        for op in ("im2col_ms", "col2im_ms"):
            a = compiled["kernels"][label][op]
            b = fallback["kernels"][label][op]
            print(f"{label:<26} {op[:-3]:<7} {a:>9.3f} {b:>9.3f} {b / a:>7.2f}x")
    a, b = compiled["step_ms"], fallback["step_ms"]
    print(f"{'full optimizer step':<26} {'':<7} {a:>9.3f} {b:>9.3f} {b / a:>7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

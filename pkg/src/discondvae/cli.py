"""Experiment driver: train / eval / traverse / make-condsprites / selftest.

Runs are reproducible end to end: one counter-based random source covers
parameter init, per-step noise, and epoch shuffling, and its state rides in
every checkpoint, so identical config+seed gives bit-identical artifacts
and a resumed run continues the exact stream of an uninterrupted one.

Exit codes: 0 success, 2 validation error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from discondvae import backend, checkpoint as ckpt, objective
from discondvae.data import (
    DataError,
    batches,
    load_condsprites,
    load_condsprites_cache,
    load_dsprites,
    load_mnist,
    save_condsprites_cache,
)
from discondvae.metrics import (
    MetricReport,
    extract_representations,
    factorvae_metric,
    conditional_metric,
    iwae_nll,
    mig,
    unsupervised_accuracy,
    write_metric_csv,
)
from discondvae.models import DiscondVAE, ModelConfig
from discondvae.objective import CapacitySchedule, LossWeights
from discondvae.optim import Adam
from discondvae.prior import PriorUpdatePolicy, apply_policy, initialize_prior
from discondvae.rng import RandomSource
from discondvae.tensor import NumericsError, Tensor, backward

DATASETS = ("condsprites", "dsprites", "mnist")


class ValidationError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    pass


@dataclass
class RunConfig:
    name: str
    dataset: str
    variant: str
    public_dim: int
    private_dim: int
    num_classes: int
    image_extent: int
    beta_z: float
    beta_w: float
    beta_c: float
    cap_z: float
    cap_w: float
    cap_c: float
    ramp_iters: int
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int
    prior_policy: str
    temperature: float

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValidationError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValidationError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        # delegate the latent-dimension invariants
        self.model_config()
        PriorUpdatePolicy(self.prior_policy)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                variant=self.variant,
                public_dim=self.public_dim,
                private_dim=self.private_dim,
                num_classes=self.num_classes,
                image_extent=self.image_extent,
                temperature=self.temperature,
            )
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc

    def loss_weights(self) -> LossWeights:
        joint = self.variant == "joint"
        return LossWeights(
            beta_z=self.beta_z,
            beta_w=0.0 if joint else self.beta_w,
            beta_c=self.beta_c,
            c_z=CapacitySchedule(self.cap_z, self.ramp_iters),
            c_w=CapacitySchedule(0.0 if joint else self.cap_w, self.ramp_iters),
            c_c=CapacitySchedule(self.cap_c, self.ramp_iters),
        )

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        fields = set(RunConfig.__dataclass_fields__)
        unknown = set(d) - fields
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        missing = fields - set(d)
        if missing:
            raise ValidationError(f"missing config keys: {sorted(missing)}")
        return RunConfig(**d)


def preset_dir() -> str:
    return os.path.join(os.path.dirname(__file__), "presets")


def list_presets() -> list[str]:
    return sorted(p[:-5] for p in os.listdir(preset_dir()) if p.endswith(".json"))


def load_config(args) -> RunConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise ValidationError("pass either --config or --preset, not both")
    if getattr(args, "preset", None):
        path = os.path.join(preset_dir(), args.preset + ".json")
        if not os.path.exists(path):
            raise ValidationError(
                f"unknown preset {args.preset!r}; available: {', '.join(list_presets())}"
            )
    elif getattr(args, "config", None):
        path = args.config
        if not os.path.exists(path):
            raise ValidationError(f"config file not found: {path}")
    else:
        raise ValidationError("one of --config or --preset is required")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    cfg = RunConfig.from_dict(raw)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def load_run_dataset(cfg: RunConfig, args, split: str = "train"):
    if cfg.dataset == "condsprites":
        if getattr(args, "condsprites_cache", None):
            return load_condsprites_cache(args.condsprites_cache)
        if not getattr(args, "dsprites", None):
            raise ValidationError("condsprites needs --dsprites <archive> or --condsprites-cache")
        return load_condsprites(args.dsprites, image_extent=cfg.image_extent)
    if cfg.dataset == "dsprites":
        if not getattr(args, "dsprites", None):
            raise ValidationError("dsprites needs --dsprites <archive>")
        return load_dsprites(args.dsprites, image_extent=cfg.image_extent)
    if not getattr(args, "mnist_dir", None):
        raise ValidationError("mnist needs --mnist-dir <dir>")
    return load_mnist(args.mnist_dir, split=split)


def _subset(dataset, n: int | None):
    if n is None or n >= len(dataset):
        return dataset
    if n <= 0:
        raise ValidationError(f"--subset must be positive, got {n}")
    from discondvae.data import ImageDataset

    return ImageDataset(
        images=dataset.images[:n],
        factors=None if dataset.factors is None else dataset.factors.subset(slice(0, n)),
        labels=None if dataset.labels is None else dataset.labels[:n],
    )


# -- checkpoint assembly ------------------------------------------------

def save_run_checkpoint(path, model: DiscondVAE, opt: Adam, rng: RandomSource,
                        epoch: int, iteration: int) -> None:
    entries = model.state_entries()
    for k in model.params:
        entries[f"opt.m.{k}"] = opt.m[k]
        entries[f"opt.v.{k}"] = opt.v[k]
    entries["state.adam_t"] = ckpt.encode_u64(opt.t)
    entries["state.rng_seed"] = ckpt.encode_u64(rng.seed)
    entries["state.rng_counter"] = ckpt.encode_u64(rng.counter)
    entries["state.epoch"] = ckpt.encode_u64(epoch)
    entries["state.iter"] = ckpt.encode_u64(iteration)
    ckpt.save_checkpoint(path, entries)


def load_run_checkpoint(path, model: DiscondVAE, opt: Adam | None = None,
                        rng: RandomSource | None = None) -> tuple[int, int]:
    try:
        entries = ckpt.load_checkpoint(path)
    except (OSError, ckpt.CheckpointError) as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        model.load_state(entries)
    except (KeyError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    if opt is not None:
        m = {k: entries[f"opt.m.{k}"] for k in model.params}
        v = {k: entries[f"opt.v.{k}"] for k in model.params}
        opt.load_state(m, v, ckpt.decode_u64(entries["state.adam_t"]))
    if rng is not None:
        rng.set_state(
            ckpt.decode_u64(entries["state.rng_seed"]),
            ckpt.decode_u64(entries["state.rng_counter"]),
        )
    return ckpt.decode_u64(entries["state.epoch"]), ckpt.decode_u64(entries["state.iter"])


# -- train ---------------------------------------------------------------

def run_train(cfg: RunConfig, args) -> dict:
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(asdict(cfg), fh, indent=2)
        fh.write("\n")

    dataset = _subset(load_run_dataset(cfg, args, split="train"), args.subset)
    if cfg.batch_size > len(dataset):
        raise ValidationError(
            f"batch_size {cfg.batch_size} exceeds dataset size {len(dataset)}"
        )

    rng = RandomSource(cfg.seed)
    model = DiscondVAE(cfg.model_config(), rng)
    policy = PriorUpdatePolicy(cfg.prior_policy)
    if cfg.variant != "joint":
        model.prior_mu = initialize_prior(policy, model.prior_mu.shape, rng)
    opt = Adam(model.params, lr=cfg.learning_rate)
    weights = cfg.loss_weights()

    start_epoch, iteration = 0, 0
    if getattr(args, "resume", None):
        start_epoch, iteration = load_run_checkpoint(args.resume, model, opt, rng)
        print(f"resumed from {args.resume} at epoch {start_epoch}, iter {iteration}")

    max_iters = args.max_iters
    cadence = max(1, math.ceil(cfg.epochs / 10))
    loss_path = os.path.join(out_dir, "loss.csv")
    last_good = os.path.join(out_dir, "ckpt_final.dcvk") if getattr(args, "resume", None) else None

    mode = "a" if start_epoch > 0 else "w"
    log = open(loss_path, mode)
    if mode == "w":
        log.write(objective.CSV_HEADER + "\n")

    def checkpoint(tag: str) -> str:
        path = os.path.join(out_dir, f"ckpt_{tag}.dcvk")
        save_run_checkpoint(path, model, opt, rng, epoch, iteration)
        return path

    epoch = start_epoch
    stop = False
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            for xb in batches(dataset.images, cfg.batch_size, rng):
                if max_iters is not None and iteration >= max_iters:
                    stop = True
                    break
                iteration += 1
                x = Tensor(xb)
                out, sample, logits = model.forward(x, rng)
                if cfg.variant == "joint":
                    loss = objective.jointvae_loss(x, out, logits, weights, iteration)
                else:
                    loss = objective.discond_loss(
                        x, out, logits, model.prior_mu, weights, iteration
                    )
                total = loss.total.item()
                if not np.isfinite(total):
                    raise NumericalAbort(f"non-finite loss {total} at iteration {iteration}")
                opt.zero_grad()
                backward(loss.total)
                opt.step()
                log.write(loss.csv_row(iteration) + "\n")
            if stop:
                break
            if cfg.variant != "joint":
                apply_policy(policy, epoch, cfg.epochs, model, dataset.images)
            if epoch % cadence == 0 and epoch < cfg.epochs:
                last_good = checkpoint(f"epoch_{epoch:04d}")
        final = checkpoint("final")
    except (NumericalAbort, NumericsError) as exc:
        log.close()
        print(f"numerical abort: {exc}", file=sys.stderr)
        if last_good:
            print(f"last good checkpoint: {last_good}", file=sys.stderr)
        raise NumericalAbort(str(exc)) from exc
    log.close()

    dump = extract_representations(model, dataset.images)
    dump_path = os.path.join(out_dir, "reps_final.dcvk")
    dump.save(dump_path)
    print(f"trained {iteration} iterations over {epoch} epochs -> {final}")
    return {"checkpoint": final, "iterations": iteration, "reps": dump_path}


# -- eval -----------------------------------------------------------------

def run_eval(cfg: RunConfig, args) -> list[MetricReport]:
    dataset = _subset(load_run_dataset(cfg, args, split="test"), args.subset)
    model = DiscondVAE(cfg.model_config(), RandomSource(cfg.seed))
    load_run_checkpoint(args.checkpoint, model)

    dump = extract_representations(model, dataset.images)
    n = len(dataset)
    reports: list[MetricReport] = []
    preds = np.argmax(dump.alpha, axis=1)

    def aggregate(name: str, values: list[float], count: int):
        arr = np.asarray(values, dtype=np.float64)
        reports.append(MetricReport(f"{name}/mean", float(arr.mean()), "", -1, count))
        reports.append(MetricReport(f"{name}/std", float(arr.std()), "", -1, count))
        reports.append(MetricReport(f"{name}/best", float(arr.max()), "", -1, count))

    if dataset.labels is not None:
        acc = unsupervised_accuracy(preds, dataset.labels)
        reports.append(MetricReport("accuracy", acc, "", cfg.seed, n))

    if dataset.factors is not None:
        conditional = cfg.dataset == "condsprites"
        fv_name = "cond_factorvae" if conditional else "factorvae"
        mig_name = "cond_mig" if conditional else "mig"
        fv_values = []
        for k in range(args.eval_seeds):
            seed = cfg.seed + k
            vote_rng = RandomSource(seed)
            if conditional:
                fv = lambda reps, table: factorvae_metric(reps, table, vote_rng)
                value, per_class = conditional_metric(fv, dump.cont, dataset.factors, dataset.labels)
                for c, v in per_class.items():
                    reports.append(MetricReport(fv_name, v, str(c), seed, n))
            else:
                value = factorvae_metric(dump.cont, dataset.factors, vote_rng)
            reports.append(MetricReport(fv_name, value, "", seed, n))
            fv_values.append(value)
        aggregate(fv_name, fv_values, n)

        if conditional:
            mig_value, mig_per_class = conditional_metric(
                mig, dump.cont, dataset.factors, dataset.labels
            )
            for c, v in mig_per_class.items():
                reports.append(MetricReport(mig_name, v, str(c), cfg.seed, n))
        else:
            mig_value = mig(dump.cont, dataset.factors)
        reports.append(MetricReport(mig_name, mig_value, "", cfg.seed, n))

    if cfg.dataset == "mnist":
        nll_values = []
        limit = min(n, args.nll_examples)
        for k in range(args.eval_seeds):
            seed = cfg.seed + k
            nll = iwae_nll(model, dataset.images[:limit], args.iwae_k, RandomSource(seed))
            reports.append(MetricReport("nll", nll, "", seed, limit))
            nll_values.append(nll)
        aggregate("nll", nll_values, limit)

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "metrics.csv")
    write_metric_csv(csv_path, reports)
    for r in reports:
        suffix = f" class={r.class_label}" if r.class_label else ""
        print(f"{r.metric}: {r.value:.4f}{suffix} (seed {r.seed}, n {r.n})")
    print(f"wrote {csv_path}")
    return reports


# -- traverse ---------------------------------------------------------------

def _write_grid_png(path, grid: np.ndarray) -> None:
    """grid: [rows, cols, H, W] in [0,1] -> one grayscale PNG."""
    from PIL import Image

    rows, cols, h, w = grid.shape
    sheet = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            sheet[r * h : (r + 1) * h, c * w : (c + 1) * w] = np.clip(
                grid[r, c] * 255.0, 0, 255
            ).astype(np.uint8)
    Image.fromarray(sheet, mode="L").save(path)


def run_traverse(cfg: RunConfig, args) -> list[str]:
    if args.steps < 1:
        raise ValidationError(f"--steps must be >= 1, got {args.steps}")
    dataset = load_run_dataset(cfg, args, split="test")
    try:
        indices = [int(s) for s in args.examples.split(",") if s]
    except ValueError as exc:
        raise ValidationError(f"bad --examples list {args.examples!r}") from exc
    if not indices:
        raise ValidationError("--examples selected nothing")
    for i in indices:
        if not 0 <= i < len(dataset):
            raise ValidationError(f"example index {i} out of range [0, {len(dataset)})")

    model = DiscondVAE(cfg.model_config(), RandomSource(cfg.seed))
    load_run_checkpoint(args.checkpoint, model)
    x = Tensor(np.ascontiguousarray(dataset.images[indices], dtype=np.float32))

    os.makedirs(args.out, exist_ok=True)
    written = []
    from discondvae.tensor import no_grad

    with no_grad():
        for axis in range(cfg.public_dim):
            grid = model.traverse(x, "public", axis, span=args.span, steps=args.steps)
            path = os.path.join(args.out, f"public_{axis}.png")
            _write_grid_png(path, grid)
            written.append(path)
        if cfg.variant != "joint":
            for axis in range(cfg.private_dim):
                grid = model.traverse(x, "private", axis, span=args.span, steps=args.steps)
                path = os.path.join(args.out, f"private_{axis}.png")
                _write_grid_png(path, grid)
                written.append(path)
        grid = model.traverse(x, "discrete")
        path = os.path.join(args.out, "discrete_0.png")
        _write_grid_png(path, grid)
        written.append(path)
    for p in written:
        print(p)
    return written


# -- make-condsprites ---------------------------------------------------------

def run_make_condsprites(args) -> None:
    if not os.path.exists(args.dsprites):
        raise ValidationError(f"archive not found: {args.dsprites}")
    os.makedirs(args.out, exist_ok=True)
    dataset = load_condsprites(args.dsprites, image_extent=args.extent)
    container = os.path.join(args.out, "condsprites.dcvk")
    table = os.path.join(args.out, "condsprites_factors.csv")
    save_condsprites_cache(dataset, container, table)
    counts = np.bincount(dataset.labels)
    print(f"examples: {len(dataset)}")
    print(f"per-class: {counts.tolist()}")
    print(f"wrote {container}")
    print(f"wrote {table}")


# -- selftest -----------------------------------------------------------------

def run_selftest() -> int:
    """Quick invariant checks that need no datasets; returns failure count."""
    failures = 0

    def check(name: str, ok: bool):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1

    print(f"kernel backend: {backend.backend_name()}")

    # conv kernels agree with a direct nested-loop computation
    rng = RandomSource(7)
    x = rng.normal((2, 3, 8, 8), dtype=np.float64)
    k = rng.normal((4, 3, 3, 3), dtype=np.float64)
    cols = backend.im2col(x, 3, 3, 2, 2)
    got = np.matmul(k.reshape(4, -1), cols).reshape(2, 4, 3, 3)
    want = np.zeros_like(got)
    for b in range(2):
        for co in range(4):
            for i in range(3):
                for j in range(3):
                    patch = x[b, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    want[b, co, i, j] = (patch * k[co]).sum()
    check("conv via im2col matches nested loops", np.allclose(got, want, atol=1e-10))

    # autodiff on a tiny composite matches finite differences
    w = Tensor(rng.normal((3, 2), dtype=np.float64), requires_grad=True, dtype=np.float64)
    xb = rng.normal((4, 3), dtype=np.float64)
    tgt = (rng.uniform((4, 2), dtype=np.float64) > 0.5).astype(np.float64)

    def f(wdata):
        from discondvae import tensor as T

        wt = Tensor(wdata, dtype=np.float64)
        return T.mean(T.bce_with_logits(T.relu(T.matmul(Tensor(xb, dtype=np.float64), wt)), tgt)).item()

    from discondvae import tensor as T

    loss = T.mean(T.bce_with_logits(T.relu(T.matmul(Tensor(xb, dtype=np.float64), w)), tgt))
    backward(loss)
    eps = 1e-6
    ok = True
    for idx in [(0, 0), (1, 1), (2, 0)]:
        wp = w.data.copy(); wp[idx] += eps
        wm = w.data.copy(); wm[idx] -= eps
        fd = (f(wp) - f(wm)) / (2 * eps)
        ok = ok and abs(fd - w.grad[idx]) < 1e-5 * max(1.0, abs(fd))
    check("gradients match finite differences", ok)

    # random source: deterministic replay and counter serialization
    a = RandomSource(123)
    first = a.normal(8, dtype=np.float64)
    state = a.state()
    second = a.normal(8, dtype=np.float64)
    b = RandomSource(0)
    b.set_state(*state)
    check("rng replay from serialized state", np.array_equal(second, b.normal(8, dtype=np.float64)))
    check("rng streams differ across seeds",
          not np.array_equal(first, RandomSource(124).normal(8, dtype=np.float64)))

    # checkpoint container round-trip
    import tempfile

    with tempfile.TemporaryDirectory() as td:
        path = os.path.join(td, "t.dcvk")
        entries = {"a": rng.normal((3, 4)), "state": ckpt.encode_u64(987654321)}
        ckpt.save_checkpoint(path, entries)
        back = ckpt.load_checkpoint(path)
        check("checkpoint round-trip",
              np.array_equal(back["a"], entries["a"].astype(np.float32))
              and ckpt.decode_u64(back["state"]) == 987654321)

    # tempered softmax sampling tracks the target distribution
    from discondvae.distributions import gumbel_softmax_sample

    logits = Tensor(np.log(np.array([[0.7, 0.2, 0.1]], dtype=np.float32)))
    counts = np.zeros(3)
    g = RandomSource(5)
    for _ in range(2000):
        pi = gumbel_softmax_sample(logits, g.gumbel((1, 3)), 0.1)
        counts[int(np.argmax(pi.data))] += 1
    freqs = counts / counts.sum()
    check("tempered categorical sampling", np.abs(freqs - [0.7, 0.2, 0.1]).max() < 0.05)

    return failures


# -- entry point ---------------------------------------------------------------

def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dsprites", help="sprites archive (zip of .npy members)")
    p.add_argument("--condsprites-cache", help="prebuilt condsprites container")
    p.add_argument("--mnist-dir", help="directory with the four IDX files")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--preset", help="named preset (see the list-presets command)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="discondvae")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config or preset")
    _add_config_flags(p)
    _add_dataset_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--max-iters", type=int, default=None, help="stop after N optimizer steps")
    p.add_argument("--subset", type=int, default=None, help="train on the first N examples")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    _add_config_flags(p)
    _add_dataset_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-seeds", type=int, default=10)
    p.add_argument("--iwae-k", type=int, default=100)
    p.add_argument("--nll-examples", type=int, default=256,
                   help="cap on examples scored by the importance estimator")
    p.add_argument("--subset", type=int, default=None)

    p = sub.add_parser("traverse", help="write latent-traversal grids")
    _add_config_flags(p)
    _add_dataset_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--examples", default="0,1,2", help="comma-separated dataset indices")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--span", type=float, default=3.0)

    p = sub.add_parser("make-condsprites", help="derive the conditioned sprites subset")
    p.add_argument("--dsprites", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extent", type=int, default=32, choices=(32, 64))

    sub.add_parser("list-presets", help="print the bundled preset names")

    sub.add_parser("selftest", help="run dataset-free internal checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        if args.command == "train":
            run_train(load_config(args), args)
        elif args.command == "eval":
            run_eval(load_config(args), args)
        elif args.command == "traverse":
            run_traverse(load_config(args), args)
        elif args.command == "make-condsprites":
            run_make_condsprites(args)
        elif args.command == "list-presets":
            print("\n".join(list_presets()))
        elif args.command == "selftest":
            return 2 if run_selftest() else 0
    except (ValidationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

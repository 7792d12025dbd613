"""DP-SGD on synthetic logistic regression, with any protocol variant as the
private gradient-mean subroutine.

Each example in a batch acts as its own client: its gradient is clipped to
the unit ball, lifted onto the unit sphere in d+1 dimensions (the randomizers
expect exactly unit norm), privatized, and the aggregated estimate is lowered
back before the momentum step.

Privacy accounting surface: the trainer reports the per-step eps and the step
count only. It does NOT compose these into an end-to-end guarantee; treat the
reported eps as the budget of one gradient-mean release.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import protocol
from .baselines import GaussianMechanismConfig, gaussian_randomize
from .rng import as_seed, derive_seed, generator
from .transforms import next_pow2

TRAIN_VARIANTS = ("direct", "srht", "corr", "rot", "gaussian", "nonprivate")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d: int = 128
    eps: float = 10.0
    variant: str = "srht"
    k: int | None = None          # default: lifted-and-padded dim / 4
    clip_norm: float = 1.0
    batch_size: int = 600
    lr: float = 0.1
    momentum: float = 0.5
    epochs: int = 10
    seed: int | bytes = 0
    n_train: int = 2000
    n_test: int = 500

    def __post_init__(self):
        if self.variant not in TRAIN_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {TRAIN_VARIANTS}")
        if self.clip_norm <= 0 or self.lr <= 0:
            raise ValueError("clip norm and learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.seed = as_seed(self.seed)


def clip_and_lift(g: np.ndarray, bound: float) -> np.ndarray:
    """Clip to norm <= bound, scale into the unit ball, lift to the unit
    sphere in d+1 dims by appending sqrt(1 - ||.||^2)."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise TrainingDivergedError("non-finite gradient")
    norm = float(np.linalg.norm(g))
    if norm > bound:
        g = g * (bound / norm)
    w = g / bound
    tail = math.sqrt(max(0.0, 1.0 - float(np.dot(w, w))))
    return np.append(w, tail)


def inverse_lift(u: np.ndarray, bound: float) -> np.ndarray:
    """Drop the lift coordinate and undo the clip scaling."""
    return bound * np.asarray(u, dtype=np.float64)[:-1]


def make_dataset(d: int, n_train: int, n_test: int, seed: int | bytes,
                 separation: float = 2.0):
    """Two Gaussian class clouds at +-(separation/sqrt(d)) u with
    per-coordinate noise 1/d. The margin-to-noise ratio along the separating
    direction u is ``separation`` sigmas, i.e. a Bayes accuracy of
    Phi(separation): high but not saturating, so noisier optimizers are
    visibly worse."""
    g = generator(seed, "dataset")
    direction = g.standard_normal(d)
    direction /= np.linalg.norm(direction)
    n = n_train + n_test
    y = np.where(g.random(n) < 0.5, 1.0, -1.0)
    shift = separation / math.sqrt(d)
    x = shift * y[:, None] * direction[None, :] + g.standard_normal((n, d)) / math.sqrt(d)
    return (x[:n_train], y[:n_train]), (x[n_train:], y[n_train:])


def _logistic_loss_and_grads(w, x, y):
    margins = y * (x @ w)
    loss = float(np.mean(np.logaddexp(0.0, -margins)))
    coeff = -y / (1.0 + np.exp(margins))
    return loss, coeff[:, None] * x


def private_grad_mean(per_example_grads: np.ndarray, config: TrainConfig,
                      step_seed: bytes) -> np.ndarray:
    """Clip+lift each gradient, privatize per example, aggregate, lower back."""
    if per_example_grads.shape[0] == 0:
        raise ValueError("empty batch")
    lifted = np.stack([clip_and_lift(g, config.clip_norm) for g in per_example_grads])
    b, d_lift = lifted.shape

    if config.variant == "nonprivate":
        return inverse_lift(lifted.mean(axis=0), config.clip_norm)

    if config.variant == "gaussian":
        mech = GaussianMechanismConfig(eps=config.eps)
        noisy = [gaussian_randomize(lifted[i], mech, derive_seed(step_seed, "ex", i))
                 for i in range(b)]
        return inverse_lift(np.mean(noisy, axis=0), config.clip_norm)

    if config.variant == "direct":
        messages = [protocol.direct_privunitg_client(lifted[i], config.eps,
                                                     derive_seed(step_seed, "ex", i))
                    for i in range(b)]
        est = protocol.projunit_server(messages)
        return inverse_lift(est.mu_hat, config.clip_norm)

    # SRHT-family variants need a power-of-two dimension: pad the lift.
    d_pad = next_pow2(d_lift)
    padded = np.zeros((b, d_pad))
    padded[:, :d_lift] = lifted
    k = config.k if config.k is not None else max(1, d_pad // 4)
    if config.variant == "rot":
        messages = [protocol.projunit_client(padded[i], k, config.eps,
                                             derive_seed(step_seed, "ex", i),
                                             ensemble="rotation")
                    for i in range(b)]
        est = protocol.projunit_server(messages)
    elif config.variant == "srht":
        messages = [protocol.projunit_client(padded[i], k, config.eps,
                                             derive_seed(step_seed, "ex", i),
                                             ensemble="srht")
                    for i in range(b)]
        est = protocol.projunit_server(messages)
    else:  # corr
        shared = protocol.CorrelatedConfig(derive_seed(step_seed, "shared"))
        messages = [protocol.correlated_client(padded[i], k, config.eps, shared,
                                               derive_seed(step_seed, "ex", i))
                    for i in range(b)]
        est = protocol.correlated_server(messages, shared)
    return inverse_lift(est.mu_hat[:d_lift], config.clip_norm)


def private_step(w: np.ndarray, velocity: np.ndarray, per_example_grads: np.ndarray,
                 config: TrainConfig, step_seed: bytes):
    """One momentum-SGD update on the privately estimated gradient mean."""
    g_hat = private_grad_mean(per_example_grads, config, step_seed)
    velocity = config.momentum * velocity + g_hat
    return w - config.lr * velocity, velocity


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float


def train(config: TrainConfig) -> list[EpochRecord]:
    """Logistic regression via DP-SGD; one record per epoch (epoch 0 = init)."""
    (x_train, y_train), (x_test, y_test) = make_dataset(
        config.d, config.n_train, config.n_test, derive_seed(config.seed, "data"))
    w = np.zeros(config.d)
    velocity = np.zeros(config.d)
    order_rng = generator(config.seed, "order")

    def evaluate(epoch: int) -> EpochRecord:
        loss, _ = _logistic_loss_and_grads(w, x_train, y_train)
        acc = float(np.mean(np.sign(x_test @ w) == y_test)) if np.any(w) else 0.5
        return EpochRecord(epoch=epoch, train_loss=loss, test_accuracy=acc)

    records = [evaluate(0)]
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(config.n_train)
        for lo in range(0, config.n_train, config.batch_size):
            batch = order[lo:lo + config.batch_size]
            loss, grads = _logistic_loss_and_grads(w, x_train[batch], y_train[batch])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss diverged at step {step}: {loss}")
            w, velocity = private_step(w, velocity, grads, config,
                                       derive_seed(config.seed, "step", step))
            step += 1
        records.append(evaluate(epoch))
    return records


def write_curve_csv(records_by_run, path: str | Path) -> None:
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a") as fh:
        if fresh:
            fh.write("variant,eps,epoch,train_loss,test_accuracy\n")
        for (variant, eps), records in records_by_run:
            for rec in records:
                fh.write(f"{variant},{eps!r},{rec.epoch},{rec.train_loss!r},"
                         f"{rec.test_accuracy!r}\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dpsgd",
                                     description="DP-SGD demo on synthetic data")
    parser.add_argument("--d", type=int, default=128)
    parser.add_argument("--eps", type=str, default="10")
    parser.add_argument("--variant", type=str, default="srht")
    parser.add_argument("--k", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--batch-size", type=int, default=600)
    parser.add_argument("--lr", type=float, default=0.1)
    parser.add_argument("--momentum", type=float, default=0.5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args(argv)

    runs = []
    for eps in (float(part) for part in args.eps.split(",")):
        config = TrainConfig(d=args.d, eps=eps, variant=args.variant, k=args.k,
                             epochs=args.epochs, batch_size=args.batch_size,
                             lr=args.lr, momentum=args.momentum, seed=args.seed)
        records = train(config)
        runs.append(((args.variant, eps), records))
        steps = args.epochs * math.ceil(config.n_train / config.batch_size)
        print(f"# variant={args.variant} per-step eps={eps} steps={steps} "
              "(per-release budget; no composition accounting)")
        for rec in records:
            print(f"{args.variant},{eps!r},{rec.epoch},{rec.train_loss!r},"
                  f"{rec.test_accuracy!r}")
    if args.out is not None:
        write_curve_csv(runs, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Benchmark harness: error sweeps, timing sweeps, CSV output.

Cells (variant, d, k, eps) are independent; every cell derives its own seed
from the master seed, so results do not depend on execution order and a rerun
with the same spec reproduces the same CSV byte for byte (timing columns
excepted). Set LDP_THREADS to run error cells on a small worker pool; CSV
writing stays single-threaded and ordered.

CLI::

    bench error --d 4096 --k 32,64,128 --n 50 --eps 10 \
        --variants srht,rot,corr,direct --reps 30 --seed 42 --out results.csv
    bench timing --d 4096..65536 --eps 10,16 --budget-secs 3600
    bench constants --d 128 --eps 8

Exit code 0 on success, 2 when any cell was cut off by its time budget.
"""

from __future__ import annotations

import argparse
import math
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.stats

from . import protocol
from .baselines import GaussianMechanismConfig, gaussian_randomize
from .privunitg import estimate_error_constant
from .rng import as_seed, derive_seed, generator

VARIANTS = ("rot", "srht", "gauss", "corr", "unbrot", "nusrht", "direct", "gaussian")

CSV_HEADER = "variant,d,k,n,eps,rep_count,mse,ci90,client_ns,server_ns,bits"


@dataclass
class ExperimentSpec:
    """Declarative benchmark configuration. ``ks=None`` means the timing
    default k = d/4 per dimension."""

    d: int | tuple[int, ...]
    n: int
    eps: float | tuple[float, ...]
    variants: tuple[str, ...]
    reps: int
    seed: int | bytes = 0
    ks: int | tuple[int, ...] | None = None
    out: Path | None = None
    time_budget_s: float | None = None
    groups: int = 1

    def __post_init__(self):
        self.d = _as_tuple(self.d, int)
        self.eps = _as_tuple(self.eps, float)
        if self.ks is not None:
            self.ks = _as_tuple(self.ks, int)
        self.variants = tuple(self.variants)
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}; choose from {VARIANTS}")
        if any(x < 1 for x in self.d) or self.n < 1:
            raise ValueError("dimensions must be positive")
        if self.reps < 2:
            raise ValueError("need at least 2 repetitions for confidence intervals")
        self.seed = as_seed(self.seed)

    def cells(self) -> list["Cell"]:
        out = []
        for variant in self.variants:
            for d in self.d:
                ks = self.ks if self.ks is not None else (max(1, d // 4),)
                for k in ks:
                    if k > d:
                        continue
                    for eps in self.eps:
                        out.append(Cell(variant, d, k, self.n, eps))
        return out


def _as_tuple(value, typ):
    if isinstance(value, (list, tuple)):
        return tuple(typ(x) for x in value)
    return (typ(value),)


@dataclass(frozen=True)
class Cell:
    variant: str
    d: int
    k: int
    n: int
    eps: float


@dataclass
class CellResult:
    cell: Cell
    rep_count: int
    mse: float
    ci90: float
    client_ns: float
    server_ns: float
    bits: int
    complete: bool


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    cells: list[CellResult] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return all(c.complete for c in self.cells)


def generate_inputs(d: int, n: int, seed: int | bytes) -> np.ndarray:
    """n unit vectors: a random unit mean mu plus N(0, I/d) noise, normalized."""
    g = generator(seed, "inputs")
    mu = g.standard_normal(d)
    mu /= np.linalg.norm(mu)
    x = mu + g.standard_normal((n, d)) / math.sqrt(d)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def student_t_ci90(samples) -> float:
    """Half-width of the two-sided 90% Student-t interval for the mean."""
    m = len(samples)
    if m < 2:
        return float("nan")
    return float(scipy.stats.t.ppf(0.95, m - 1) * statistics.stdev(samples) / math.sqrt(m))


def _run_rep(cell: Cell, inputs: np.ndarray, rep: int, seed: bytes,
             groups: int) -> tuple[np.ndarray, float, int, int]:
    """One protocol execution; returns (mu_hat, client_ns/client, server_ns, bits)."""
    n, d = inputs.shape
    k, eps = cell.k, cell.eps
    cseed = lambda i: derive_seed(seed, "rep", rep, "client", i)

    if cell.variant == "gaussian":
        config = GaussianMechanismConfig(eps=eps)
        t0 = time.perf_counter_ns()
        noisy = [gaussian_randomize(inputs[i], config, cseed(i)) for i in range(n)]
        t1 = time.perf_counter_ns()
        mu = np.mean(noisy, axis=0)
        t2 = time.perf_counter_ns()
        return mu, (t1 - t0) / n, t2 - t1, 32 * d

    shared = None
    if cell.variant in ("corr", "nusrht"):
        shared = protocol.CorrelatedConfig(derive_seed(seed, "shared"), groups=groups)
    delta = protocol.default_bias_delta(d, k, n) if cell.variant == "nusrht" else None

    def client(i: int) -> protocol.ClientMessage:
        v, s = inputs[i], cseed(i)
        if cell.variant == "rot":
            return protocol.projunit_client(v, k, eps, s, ensemble="rotation")
        if cell.variant == "srht":
            return protocol.projunit_client(v, k, eps, s, ensemble="srht")
        if cell.variant == "gauss":
            return protocol.projunit_client(v, k, eps, s, ensemble="gaussian")
        if cell.variant == "corr":
            return protocol.correlated_client(v, k, eps, shared, s, group=i % groups)
        if cell.variant == "unbrot":
            return protocol.unbiased_rotation_client(v, k, eps, s)
        if cell.variant == "nusrht":
            return protocol.nearly_unbiased_client(v, k, eps, delta, shared, s,
                                                   group=i % groups)
        if cell.variant == "direct":
            return protocol.direct_privunitg_client(v, eps, s)
        raise AssertionError(cell.variant)

    t0 = time.perf_counter_ns()
    messages = [client(i) for i in range(n)]
    t1 = time.perf_counter_ns()
    if cell.variant == "corr":
        est = protocol.correlated_server(messages, shared)
    elif cell.variant == "nusrht":
        est = protocol.nearly_unbiased_server(messages, shared)
    else:
        est = protocol.projunit_server(messages)
    return est.mu_hat, (t1 - t0) / n, est.server_nanos, est.total_bits // n


def _cell_seed(spec: ExperimentSpec, cell: Cell) -> bytes:
    return derive_seed(spec.seed, "cell", cell.variant, cell.d, cell.k, repr(cell.eps))


def _run_cell_error(spec: ExperimentSpec, cell: Cell) -> CellResult:
    seed = _cell_seed(spec, cell)
    inputs = generate_inputs(cell.d, spec.n, derive_seed(spec.seed, "inputs", cell.d, spec.n))
    target = inputs.mean(axis=0)
    start = time.monotonic()
    errors, client_ts, server_ts, bits = [], [], [], 0
    for rep in range(spec.reps):
        if spec.time_budget_s is not None and time.monotonic() - start > spec.time_budget_s:
            break
        mu, client_ns, server_ns, bits = _run_rep(cell, inputs, rep, seed, spec.groups)
        errors.append(float(np.sum((mu - target) ** 2)))
        client_ts.append(client_ns)
        server_ts.append(server_ns)
    done = len(errors)
    return CellResult(
        cell=cell, rep_count=done,
        mse=float(np.mean(errors)) if done else float("nan"),
        ci90=student_t_ci90(errors),
        client_ns=float(np.mean(client_ts)) if done else float("nan"),
        server_ns=float(np.mean(server_ts)) if done else float("nan"),
        bits=bits, complete=done == spec.reps,
    )


def run_error_experiment(spec: ExperimentSpec) -> ExperimentResult:
    cells = spec.cells()
    workers = max(1, int(os.environ.get("LDP_THREADS", "1")))
    if workers == 1:
        results = [_run_cell_error(spec, cell) for cell in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _run_cell_error(spec, c), cells))
    return ExperimentResult(spec=spec, cells=results)


_WARMUP = 2
_TIMED = 5


def _run_cell_timing(spec: ExperimentSpec, cell: Cell) -> CellResult:
    seed = _cell_seed(spec, cell)
    inputs = generate_inputs(cell.d, spec.n, derive_seed(spec.seed, "inputs", cell.d, spec.n))
    target = inputs.mean(axis=0)
    start = time.monotonic()
    over = lambda: spec.time_budget_s is not None and time.monotonic() - start > spec.time_budget_s
    errors, client_ts, server_ts, bits = [], [], [], 0
    for rep in range(_WARMUP + _TIMED):
        if over():
            break
        mu, client_ns, server_ns, bits = _run_rep(cell, inputs, rep, seed, spec.groups)
        if rep >= _WARMUP:
            errors.append(float(np.sum((mu - target) ** 2)))
            client_ts.append(client_ns)
            server_ts.append(server_ns)
    done = len(errors)
    return CellResult(
        cell=cell, rep_count=done,
        mse=float(np.mean(errors)) if done else float("nan"),
        ci90=student_t_ci90(errors),
        client_ns=float(np.median(client_ts)) if done else float("nan"),
        server_ns=float(np.median(server_ts)) if done else float("nan"),
        bits=bits, complete=done == _TIMED,
    )


def run_timing_experiment(spec: ExperimentSpec) -> ExperimentResult:
    # wall-clock measurements: always sequential
    return ExperimentResult(spec=spec, cells=[_run_cell_timing(spec, c) for c in spec.cells()])


def write_csv(result: ExperimentResult, path: str | Path) -> None:
    """Append rows; writes the header only when the file is new or empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a") as fh:
        if fresh:
            fh.write(CSV_HEADER + "\n")
        for res in result.cells:
            c = res.cell
            fh.write(",".join([
                c.variant, str(c.d), str(c.k), str(c.n), repr(c.eps),
                str(res.rep_count), repr(res.mse), repr(res.ci90),
                repr(res.client_ns), repr(res.server_ns), str(res.bits),
            ]) + "\n")


# --- CLI ----------------------------------------------------------------------

def _parse_int_list(text: str) -> tuple[int, ...]:
    """Accept "4096", "32,64,128", or a doubling range "4096..65536"."""
    if ".." in text:
        lo, hi = text.split("..")
        lo, hi = int(lo), int(hi)
        out = []
        while lo <= hi:
            out.append(lo)
            lo *= 2
        return tuple(out)
    return tuple(int(part) for part in text.split(",") if part)


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench",
                                     description="private mean estimation benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    err = sub.add_parser("error", help="mean squared error sweep")
    err.add_argument("--d", type=_parse_int_list, required=True)
    err.add_argument("--k", type=_parse_int_list, default=None)
    err.add_argument("--n", type=int, default=50)
    err.add_argument("--eps", type=_parse_float_list, required=True)
    err.add_argument("--variants", type=str, default="srht,rot,corr,direct")
    err.add_argument("--reps", type=int, default=30)
    err.add_argument("--seed", type=int, default=0)
    err.add_argument("--out", type=Path, default=None)
    err.add_argument("--budget-secs", type=float, default=None)
    err.add_argument("--groups", type=int, default=1)

    tim = sub.add_parser("timing", help="client/server runtime sweep")
    tim.add_argument("--d", type=_parse_int_list, required=True)
    tim.add_argument("--k", type=_parse_int_list, default=None,
                     help="default: d/4 per dimension")
    tim.add_argument("--n", type=int, default=1)
    tim.add_argument("--eps", type=_parse_float_list, default=(10.0,))
    tim.add_argument("--variants", type=str, default="srht,rot,direct")
    tim.add_argument("--seed", type=int, default=0)
    tim.add_argument("--out", type=Path, default=None)
    tim.add_argument("--budget-secs", type=float, default=3600.0)
    tim.add_argument("--groups", type=int, default=1)

    con = sub.add_parser("constants", help="empirical error constant of the direct protocol")
    con.add_argument("--d", type=int, required=True)
    con.add_argument("--eps", type=float, required=True)
    con.add_argument("--n", type=int, default=1)
    con.add_argument("--trials", type=int, default=100)
    con.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "constants":
        est = estimate_error_constant(args.d, args.eps, args.n, args.trials, args.seed)
        print(f"d={est.d} eps={est.eps} n={est.n} trials={est.trials} "
              f"c_hat={est.c_hat:.6f} stderr={est.stderr:.6f}")
        return 0

    spec = ExperimentSpec(
        d=args.d, n=args.n, eps=args.eps,
        variants=tuple(args.variants.split(",")),
        reps=args.reps if args.command == "error" else _WARMUP + _TIMED,
        seed=args.seed, ks=args.k, out=args.out,
        time_budget_s=args.budget_secs, groups=args.groups,
    )
    runner = run_error_experiment if args.command == "error" else run_timing_experiment
    result = runner(spec)
    if args.out is not None:
        write_csv(result, args.out)
    else:
        print(CSV_HEADER)
        for res in result.cells:
            c = res.cell
            print(f"{c.variant},{c.d},{c.k},{c.n},{c.eps!r},{res.rep_count},"
                  f"{res.mse!r},{res.ci90!r},{res.client_ns!r},{res.server_ns!r},{res.bits}")
    if not result.complete:
        print("warning: some cells hit the time budget and are incomplete",
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

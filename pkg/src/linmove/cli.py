"""Command-line entry point: ``linmove {adjoint-test,halo,verify,train}``.

Every command prints one comma-separated line per result and exits non-zero
if any check fails.  ``--config FILE`` reads ``key = value`` defaults; flags
given on the command line take precedence.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import catalog
from . import comm as comm_mod
from .data import DatasetError, load_mnist, synthetic_dataset
from .halo import KernelSpec, compute_halo
from .memory_ops import DEFAULT_EPSILON, REPORT_HEADER, adjoint_test
from .network import (LAYER_SHAPES, METRICS_HEADER, train, verify_equivalence)
from .partition import decompose, parse_grid
from .tensor import ContractError

log = logging.getLogger("linmove")


def _ints(text: str) -> tuple[int, ...]:
    """Comma-separated non-negative integers."""
    try:
        vals = tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise ContractError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 0:
        raise ContractError(f"expected comma-separated non-negative integers, got {text!r}")
    return vals


def _dtype(name: str):
    return {"float64": np.float64, "float32": np.float32}[name]


# -- commands -----------------------------------------------------------------


def cmd_adjoint_test(args) -> int:
    dtype = _dtype(args.dtype)
    eps = DEFAULT_EPSILON[np.dtype(dtype)] if args.epsilon is None else args.epsilon
    shape = _ints(args.shape)
    if args.all:
        ops = catalog.standard_suite(args.workers, shape[0], args.seed)
    elif args.op:
        ops = [catalog.named_op(args.op, args.workers, shape, args.seed)]
    else:
        raise ContractError("pass --op NAME or --all")
    print(REPORT_HEADER)
    ok = True
    for op in ops:
        rep = adjoint_test(op, trials=args.trials, epsilon=eps, seed=args.seed, dtype=dtype)
        print(rep.line())
        ok &= rep.passed
    return 0 if ok else 1


def halo_table(shape, size, stride, dilation, padding, pad_right, grid) -> list[str]:
    shape = tuple(shape)

    def per_dim(v):
        return None if v is None else (v[0] if len(v) == 1 else tuple(v))

    kernel = KernelSpec.make(len(shape), per_dim(size), per_dim(stride), per_dim(dilation),
                             per_dim(padding), per_dim(pad_right))
    part = decompose(shape, grid)
    out_part = part.with_shape(kernel.output_shape(shape))

    rows = ["worker, dim, bulk_range, left_halo, right_halo, left_trim, right_trim"]
    for rank, bulk in part.items():
        h = compute_halo(shape, kernel, part, out_part, rank)
        for d in range(len(shape)):
            rows.append(f"{rank}, {d}, [{bulk.start[d]},{bulk.stop[d]}), {h.left_halo[d]}, "
                        f"{h.right_halo[d]}, {h.left_trim[d]}, {h.right_trim[d]}")
    return rows


def cmd_halo(args) -> int:
    pad_right = None if args.pad_right is None else _ints(args.pad_right)
    rows = halo_table(_ints(args.shape), _ints(args.kernel), _ints(args.stride),
                      _ints(args.dilation), _ints(args.padding), pad_right, parse_grid(args.grid))
    print("\n".join(rows))
    return 0


def cmd_verify(args) -> int:
    rep = verify_equivalence(args.seed, batch=args.batch, perturb=args.perturb)
    print("\n".join(rep.lines()))
    return 0 if rep.passed else 1


def _datasets(args):
    if args.dataset:
        return load_mnist(args.dataset)
    n = args.synthetic or 1024
    return (synthetic_dataset(n, seed=args.seed + 1),
            synthetic_dataset(max(n // 4, args.batch), seed=args.seed + 2))


def cmd_train(args) -> int:
    train_set, test_set = _datasets(args)
    modes = ["sequential", "distributed"] if args.mode == "both" else [args.mode]
    sink = open(args.metrics, "w") if args.metrics else None
    results = {}
    try:
        for mode in modes:
            header = f"# mode={mode}"
            print(header)
            print(METRICS_HEADER)
            if sink:
                sink.write(header + "\n" + METRICS_HEADER + "\n")

            def emit(row):
                print(row.line(), flush=True)
                if sink:
                    sink.write(row.line() + "\n")
                    sink.flush()

            results[mode] = train(mode, train_set, test_set, epochs=args.epochs, batch=args.batch,
                                  lr=args.lr, seed=args.seed, max_steps=args.max_steps, emit=emit,
                                  dtype=_dtype(args.dtype))
    finally:
        if sink:
            sink.close()
    code = 0
    if len(results) == 2:
        a, b = results["sequential"].losses, results["distributed"].losses
        diff = float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300))) if a.size else 0.0
        tol = 1e-10 if args.dtype == "float64" else 1e-4
        ok = a.shape == b.shape and diff < tol
        print(f"loss-curve, {a.size}, {diff:.3e}, {tol:g}, {'PASS' if ok else 'FAIL'}")
        code = 0 if ok else 1
    if args.params_out:
        last = results[modes[-1]].params
        np.savez(args.params_out, **{f"{n}.{k}": v for n, d in last.items() for k, v in d.items()})
    return code


# -- parsing ------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    p = argparse.ArgumentParser(prog="linmove", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key = value file of default options")
    p.add_argument("--watchdog", type=float, default=30.0,
                   help="seconds a worker may wait on a message before the run is aborted")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    subs = {}

    s = sub.add_parser("adjoint-test", help="relative adjoint test of named operators")
    s.add_argument("--op", choices=catalog.OP_NAMES)
    s.add_argument("--all", action="store_true", help="every primitive and layer composition")
    s.add_argument("--workers", type=int, default=4)
    s.add_argument("--shape", default="7", help="comma-separated tensor shape")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epsilon", type=float, default=None)
    s.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    s.set_defaults(func=cmd_adjoint_test)
    subs["adjoint-test"] = s

    s = sub.add_parser("halo", help="per-worker halo and trim table")
    s.add_argument("--shape", required=True)
    s.add_argument("--kernel", required=True, help="kernel size per dimension")
    s.add_argument("--stride", default="1")
    s.add_argument("--dilation", default="1")
    s.add_argument("--padding", default="0", help="left padding (and right unless --pad-right)")
    s.add_argument("--pad-right", default=None)
    s.add_argument("--grid", required=True, help="workers per dimension, e.g. 3 or 2,2")
    s.set_defaults(func=cmd_halo)
    subs["halo"] = s

    s = sub.add_parser("verify", help="distributed vs sequential Lenet-5, layer by layer")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--perturb", choices=tuple(LAYER_SHAPES), default=None,
                   help="corrupt one distributed weight block (fault injection)")
    s.set_defaults(func=cmd_verify)
    subs["verify"] = s

    s = sub.add_parser("train", help="train Lenet-5 and emit metrics")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--dataset", help="directory holding the four MNIST IDX files")
    src.add_argument("--synthetic", type=int, nargs="?", const=1024, default=None,
                     help="use N synthetic samples (default 1024)")
    s.add_argument("--mode", choices=("sequential", "distributed", "both"), default="both")
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-steps", type=int, default=None)
    s.add_argument("--metrics", help="append metrics lines to this file")
    s.add_argument("--params-out", help="write final parameters to an .npz file")
    s.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    s.set_defaults(func=cmd_train)
    subs["train"] = s
    return p, subs


def read_config(path: str) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{n}: expected key = value")
            k, v = (t.strip() for t in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _apply_config(parser, subs, config: dict[str, str]):
    for sp in [parser, *subs.values()]:
        found = {}
        for action in sp._actions:
            if action.dest in config:
                v = config[action.dest]
                if isinstance(action, argparse._StoreTrueAction):
                    v = v.lower() in ("1", "true", "yes", "on")
                elif action.type is not None:
                    v = action.type(v)
                found[action.dest] = v
        sp.set_defaults(**found)


def main(argv=None) -> int:
    parser, subs = build_parser()
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    pre, _ = probe.parse_known_args(argv)
    if pre.config:
        _apply_config(parser, subs, read_config(pre.config))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.watchdog <= 0:
        parser.error("--watchdog must be positive")
    comm_mod.DEFAULT_TIMEOUT = args.watchdog
    try:
        return args.func(args)
    except (ContractError, DatasetError, comm_mod.SPMDError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end: compile spline JSON to encoder weights,
evaluate, verify, estimate degrees, and tabulate activation smoothing.

Exit codes: 0 success/pass, 1 verification failure, 2 input error,
3 resource or contract error.  All output is deterministic under a fixed
seed; reports go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

from .compiler import (CompileOptions, NotAutoregressiveError,
                       ResourceLimitError, compile_autoregressive, compile_spline)
from .spline import grid_from_json
from .tensor import BackendError, ShapeError, mat_from_json, mat_to_json
from .transformer import (Activation, EncoderModel, blocks_from_json,
                          blocks_to_float, blocks_to_json)
from .verifier import (estimate_degree, oracle_equiv, random_rational_mat,
                       smooth_convergence_table, smooth_swap,
                       softmax_probability_check, trial_rng)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_RESOURCE_ERROR = 3


def _default_seed() -> int:
    env = os.environ.get("SPLINEFORMER_SEED")
    return int(env) if env else 42


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _fail(code: int, message: str) -> int:
    sys.stderr.write(message.rstrip() + "\n")
    return code


def _load_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _layout_path(out_path: str) -> str:
    if out_path.endswith(".json"):
        return out_path[: -len(".json")] + ".layout.json"
    return out_path + ".layout.json"


def cmd_compile(args) -> int:
    try:
        spline = grid_from_json(_load_json(args.spline))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(EXIT_INPUT_ERROR, f"cannot read spline: {exc}")
    opts = CompileOptions(mode=args.mode, masked=args.masked)
    try:
        if args.masked:
            compiled = compile_autoregressive(spline, opts)
        else:
            compiled = compile_spline(spline, opts)
    except NotAutoregressiveError as exc:
        return _fail(EXIT_RESOURCE_ERROR, f"masked compile rejected: {exc}")
    except ResourceLimitError as exc:
        return _fail(EXIT_RESOURCE_ERROR, str(exc))
    payload = json.dumps(blocks_to_json(compiled.blocks), sort_keys=True) + "\n"
    sidecar = json.dumps(compiled.sidecar_json(), sort_keys=True) + "\n"
    try:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(payload)
        with open(_layout_path(args.output), "w", encoding="utf-8") as fh:
            fh.write(sidecar)
    except OSError as exc:
        return _fail(EXIT_INPUT_ERROR, f"cannot write output: {exc}")
    _emit({"kind": "compile", "mode": compiled.mode, "stages": compiled.stages,
           "blocks": compiled.stats["blocks"],
           "heads_per_block": compiled.stats["heads_per_block"],
           "rows": compiled.stats["rows"], "depth": compiled.stats["depth"],
           "output": args.output})
    return EXIT_OK


def _load_model(path: str):
    blocks = blocks_from_json(_load_json(path))
    return EncoderModel(blocks)


def cmd_eval(args) -> int:
    try:
        model = _load_model(args.weights)
        x = mat_from_json(_load_json(args.input))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(EXIT_INPUT_ERROR, f"cannot read inputs: {exc}")
    if args.backend == "float":
        model = EncoderModel(blocks_to_float(model.blocks))
        x = x.to_float()
    elif args.backend == "rational" and x.backend != "rational":
        return _fail(EXIT_INPUT_ERROR, "rational backend requested but input is float")
    try:
        out = model(x)
    except (ShapeError, BackendError) as exc:
        return _fail(EXIT_INPUT_ERROR, f"evaluation failed: {exc}")
    _emit(mat_to_json(out))
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        model = _load_model(args.weights)
        spline = grid_from_json(_load_json(args.spline))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(EXIT_INPUT_ERROR, f"cannot read inputs: {exc}")
    try:
        report = oracle_equiv(model, spline, args.samples, args.seed)
    except (ShapeError, BackendError, ValueError) as exc:
        return _fail(EXIT_INPUT_ERROR, f"verification could not run: {exc}")
    _emit(report.to_json())
    return EXIT_OK if report.exact else EXIT_VERIFY_FAILED


def cmd_degree(args) -> int:
    try:
        model = _load_model(args.weights)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(EXIT_INPUT_ERROR, f"cannot read weights: {exc}")
    bound = args.bound if args.bound is not None else 3 ** len(model.blocks)
    max_deg = args.max_deg if args.max_deg is not None else bound + 2
    report = estimate_degree(model, max_deg=max_deg, trials=args.trials,
                             seed=args.seed, bound=bound)
    _emit(report.to_json())
    return EXIT_OK


def cmd_smooth(args) -> int:
    try:
        model = _load_model(args.weights)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(EXIT_INPUT_ERROR, f"cannot read weights: {exc}")
    xs = [random_rational_mat(trial_rng(args.seed, t), model.n, model.p)
          for t in range(args.samples)]
    if args.activation == "softmax":
        swapped = smooth_swap(model.blocks, Activation("softmax"))
        finite = True
        for x in xs:
            out = swapped(x)
            if any(not math.isfinite(v) for row in out.data for v in row):
                finite = False
        checks = softmax_probability_check(model.blocks, xs)
        _emit({"kind": "smooth", "activation": "softmax", "samples": len(xs),
               "finite_outputs": finite, **checks})
        return EXIT_OK
    betas = [float(b) for b in args.betas.split(",") if b.strip()] if args.betas else []
    rows = smooth_convergence_table(model.blocks, xs, betas)
    _emit({"kind": "smooth", "activation": "softplus", "samples": len(xs),
           "rows": rows})
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="splineformer",
        description="compile max-min splines to encoder weights and verify them")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a spline JSON file to weights")
    c.add_argument("spline")
    c.add_argument("--mode", choices=["auto", "faithful", "pruned"], default="auto")
    c.add_argument("--masked", action="store_true",
                   help="emit masked heads (input must be autoregressive)")
    c.add_argument("-o", "--output", default="weights.json")
    c.set_defaults(fn=cmd_compile)

    e = sub.add_parser("eval", help="evaluate weights on a matrix JSON file")
    e.add_argument("weights")
    e.add_argument("input")
    e.add_argument("--backend", choices=["rational", "float"], default=None,
                   help="force a scalar backend (default: infer from the input)")
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("verify", help="exact oracle equivalence check")
    v.add_argument("weights")
    v.add_argument("spline")
    v.add_argument("--samples", type=int, default=1000)
    v.add_argument("--seed", type=int, default=_default_seed())
    v.set_defaults(fn=cmd_verify)

    d = sub.add_parser("degree", help="finite-difference degree estimate")
    d.add_argument("weights")
    d.add_argument("--trials", type=int, default=25)
    d.add_argument("--bound", type=int, default=None,
                   help="degree bound (default 3^blocks)")
    d.add_argument("--max-deg", type=int, default=None, dest="max_deg")
    d.add_argument("--seed", type=int, default=_default_seed())
    d.set_defaults(fn=cmd_degree)

    s = sub.add_parser("smooth", help="activation swap and convergence table")
    s.add_argument("weights")
    s.add_argument("--activation", choices=["softplus", "softmax"], default="softplus")
    s.add_argument("--betas", default="10,100,1000")
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--seed", type=int, default=_default_seed())
    s.set_defaults(fn=cmd_smooth)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

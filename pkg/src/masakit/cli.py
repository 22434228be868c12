"""Command-line surface: train-toy, compress, eval, inspect, grad-check.

Exit codes: 0 success, 1 validation error (bad flags, malformed files,
contract violations), 2 numerical failure (divergence, factorization
failure, gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import report
from .compress import GroupSpec, compress_model, materialize_compressed
from .errors import NumericalError, ValidationError
from .masa import (
    PROJECTION_ORDER,
    SharingMode,
    attention_module_cr,
    projection_compression_ratio,
    similarity_matrix,
)
from .model import (
    ModelParams,
    ToyConfig,
    attention_param_count,
    bake_params,
    params_to_tensors,
    perplexity,
    shared_projection_set,
    tensors_to_params,
)
from .train import GRAD_CHECK_CONFIG, OptimizerSettings, gradient_check, train

GRAD_TOLERANCE = 1e-4


def _read_bytes(path) -> bytes:
    if not os.path.exists(path):
        raise ValidationError(f"file not found: {path}")
    with open(path, "rb") as f:
        return f.read()


def load_model(path) -> tuple[ModelParams, dict]:
    data = ckpt.load_checkpoint(path)
    if data.meta.get("groups"):
        return materialize_compressed(data.tensors, data.meta), data.meta
    return tensors_to_params(data.tensors, data.meta), data.meta


def _parse_groups(raw: str):
    if raw.startswith("auto:"):
        return ("auto", int(raw.split(":", 1)[1]))
    if raw.isdigit():
        return ("uniform", int(raw))
    if os.path.exists(raw):
        import json

        with open(raw) as f:
            spec = json.load(f)
        if "ranges" not in spec:
            raise ValidationError(f"group file {raw} missing 'ranges'")
        ranges = [tuple(r) for r in spec["ranges"]]
        basis = spec.get("basis", [1] * len(ranges))
        return GroupSpec(ranges, basis)
    raise ValidationError(f"--groups expects auto:K, an integer, or a JSON file; got {raw!r}")


def _parse_basis(raw: str):
    if "," in raw:
        return [int(x) for x in raw.split(",")]
    return int(raw)


# ------------------------------------------------------------- subcommands


def cmd_train_toy(args) -> int:
    config = ToyConfig(
        num_layers=args.layers,
        model_dim=args.dim,
        num_heads=args.heads,
        mode=SharingMode(args.mode),
        num_atoms=args.atoms,
        seed=args.seed,
        direct_coeff=args.direct_coeff,
    )
    settings = OptimizerSettings(lr=args.lr, batch_size=args.batch, window=args.window)
    corpus = _read_bytes(args.corpus)
    params, metrics = train(config, corpus, args.steps, settings)
    baked = bake_params(params)
    tensors, meta = params_to_tensors(baked)
    ckpt.save_checkpoint(args.out, tensors, meta)
    print(f"saved {args.out} ({len(tensors)} tensors)")
    if metrics:
        print(f"final loss {metrics[-1][1]:.6f} at step {metrics[-1][0]}")
    if args.report:
        fig = report.write_metrics(args.report, metrics)
        print(f"wrote {args.report} and {fig}")
    return 0


def cmd_compress(args) -> int:
    data = ckpt.load_checkpoint(args.ckpt)
    if data.meta.get("groups"):
        raise ValidationError("checkpoint is already compressed")
    params = tensors_to_params(data.tensors, data.meta)
    calibration = _read_bytes(args.calib) if args.calib else None
    result = compress_model(
        params,
        alpha=args.alpha,
        groups=_parse_groups(args.groups),
        basis=_parse_basis(args.basis),
        calibration=calibration,
        pairing=args.pairing,
        window=args.window,
        max_calib_sequences=args.calib_size,
    )
    ckpt.save_checkpoint(args.out, result.tensors, result.meta)
    ranges = result.groups.ranges
    print(f"saved {args.out} with {len(ranges)} groups: {ranges}")
    mean_cr = float(np.mean([r.cr_achieved for r in result.rows]))
    print(f"mean attention cr {mean_cr:.4f}")
    if args.report:
        fig = report.write_compression_report(args.report, result.rows)
        print(f"wrote {args.report} and {fig}")
    return 0


def cmd_eval(args) -> int:
    params, _meta = load_model(args.ckpt)
    corpus = _read_bytes(args.corpus)
    ppl = perplexity(params, corpus, window=args.window)
    print(f"perplexity {ppl:.6f}")
    return 0


def cmd_inspect(args) -> int:
    data = ckpt.load_checkpoint(args.ckpt)
    meta = data.meta
    print(f"checkpoint {args.ckpt}")
    print(
        f"mode {meta['mode']} layers {meta['L']} dim {meta['d']} "
        f"heads {meta['heads']} atoms {meta['S']}"
    )
    if meta.get("groups"):
        print(f"groups {meta['groups']['ranges']} basis {meta['groups']['basis']}")
    print(f"tensors {len(data.tensors)}")
    for name in sorted(data.tensors):
        print(f"tensor,{name},{'x'.join(str(n) for n in data.tensors[name].shape)}")

    blocks = {}
    if meta.get("groups"):
        L, d = meta["L"], meta["d"]
        dense = L * d * d
        spec = GroupSpec(
            [tuple(r) for r in meta["groups"]["ranges"]], meta["groups"]["basis"]
        )
        for kind in PROJECTION_ORDER:
            kept = 0
            for g, (a, b) in enumerate(spec.ranges):
                coeff = data.tensors[ckpt.group_coeff_name(kind.tag, g)]
                kept += coeff.size
                for s in range(coeff.shape[0]):
                    kept += data.tensors[ckpt.group_dict_atom_name(kind.tag, g, s)].size
            for l in range(L):
                name = ckpt.resid_factor_name(kind.tag, l, "left")
                if name in data.tensors:
                    kept += data.tensors[name].size
                    kept += data.tensors[ckpt.resid_factor_name(kind.tag, l, "right")].size
            print(f"cr,projection={kind.tag},{1.0 - kept / dense:.6f}")
    else:
        params = tensors_to_params(data.tensors, data.meta)
        pset = shared_projection_set(params)
        mode = params.config.mode
        cfg = params.config
        module_r = None
        for kind in PROJECTION_ORDER:
            entry = pset.entries[kind]
            if entry.is_shared:
                r = projection_compression_ratio(
                    entry.dictionary.num_atoms, cfg.num_layers, cfg.model_dim, cfg.model_dim
                )
                module_r = r
                blocks[kind.tag] = similarity_matrix(entry.dictionary)
            else:
                r = 0.0
            print(f"cr,projection={kind.tag},{r:.6f}")
        if module_r is not None:
            print(f"cr,module,{attention_module_cr(mode, module_r):.6f}")
        print(f"attention-params,{attention_param_count(params)}")
        for tag, matrix in blocks.items():
            print(report.similarity_csv_block(tag, matrix))

    if args.report:
        if not blocks:
            raise ValidationError("similarity report needs a shared (uncompressed) checkpoint")
        fig = report.write_similarity(args.report, blocks)
        print(f"wrote {args.report} and {fig}")
    return 0


def cmd_grad_check(args) -> int:
    config = ToyConfig(
        num_layers=args.layers,
        model_dim=args.dim,
        num_heads=args.heads,
        mode=SharingMode(args.mode),
        num_atoms=args.atoms,
        seed=args.seed,
    )
    worst, per_tensor = gradient_check(config, samples=args.samples, seed=args.seed)
    for name, dev in per_tensor:
        print(f"grad,{name},{dev:.3e}")
    print(f"max relative deviation {worst:.3e} over {args.samples} samples")
    if worst > GRAD_TOLERANCE:
        raise NumericalError(
            f"gradient check failed: {worst:.3e} exceeds {GRAD_TOLERANCE:.0e}"
        )
    print("gradient check passed")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="masakit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-toy", help="train the byte-level toy transformer")
    t.add_argument("--layers", type=int, default=6)
    t.add_argument("--dim", type=int, default=64)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--mode", choices=["dense", "qkv", "qkvo"], default="dense")
    t.add_argument("--atoms", type=int, default=0)
    t.add_argument("--corpus", required=True)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--report", default=None, help="metrics CSV path (PNG rendered beside it)")
    t.add_argument("--window", type=int, default=128)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--direct-coeff", action="store_true", help="train C directly, no MLP")
    t.set_defaults(func=cmd_train_toy)

    c = sub.add_parser("compress", help="training-free compression of a checkpoint")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--alpha", type=float, default=None,
                   help="kept parameter fraction target; omit for pure basis reconstruction")
    c.add_argument("--groups", default="1", help="auto:K, an integer, or a JSON file")
    c.add_argument("--basis", default="1", help="basis count, or comma list per group")
    c.add_argument("--calib", default=None, help="calibration byte file")
    c.add_argument("--report", default=None, help="report CSV path (PNG rendered beside it)")
    c.add_argument("--window", type=int, default=128)
    c.add_argument("--calib-size", type=int, default=1024)
    c.add_argument("--pairing", choices=["qk-vo", "none"], default="qk-vo")
    c.set_defaults(func=cmd_compress)

    e = sub.add_parser("eval", help="perplexity of a checkpoint on a byte corpus")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--window", type=int, default=128)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="shapes, compression ratios, atom similarities")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--report", default=None, help="similarity CSV path (PNG rendered beside it)")
    i.set_defaults(func=cmd_inspect)

    g = sub.add_parser("grad-check", help="finite-difference gradient verification")
    g.add_argument("--layers", type=int, default=GRAD_CHECK_CONFIG["num_layers"])
    g.add_argument("--dim", type=int, default=GRAD_CHECK_CONFIG["model_dim"])
    g.add_argument("--heads", type=int, default=GRAD_CHECK_CONFIG["num_heads"])
    g.add_argument("--atoms", type=int, default=GRAD_CHECK_CONFIG["num_atoms"])
    g.add_argument("--mode", choices=["dense", "qkv", "qkvo"], default="qkvo")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=200)
    g.set_defaults(func=cmd_grad_check)
    return p


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

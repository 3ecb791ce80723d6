"""Command-line interface.

Exit codes: 0 success, 1 failed check, 2 domain error, 3 usage or parse error.
Machine-readable output goes to stdout as JSON or CSV; summaries go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ParseError, RegistrationError
from .geom import RigidTransform

EXIT_OK, EXIT_CHECK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2, 3


class UsageError(Exception):
    def __init__(self, message: str, reported: bool = False):
        super().__init__(message)
        self.reported = reported


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message, reported=True)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _load_config(path):
    from .pipeline import ModelConfig

    return ModelConfig.load(path) if path else ModelConfig()


def cmd_register(args) -> int:
    from .io_data import read_points, read_transform
    from .pipeline import init_model, load_params

    src, tgt = read_points(args.src), read_points(args.tgt)
    config = _load_config(args.config)
    if args.params:
        params, config = load_params(args.params, config if args.config else None)
    else:
        params = init_model(config, args.seed)
    oracle = None
    if args.oracle_features:
        oracle = read_transform(args.gt) if args.gt else RigidTransform.identity()
    from .pipeline import register_pair

    T, diag = register_pair(src, tgt, params, config, oracle)
    print(json.dumps({**T.to_json(), "diagnostics": diag}, indent=2))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .io_data import PRESETS, synth_pair, write_points, write_transform

    settings = dict(PRESETS[args.preset])
    for key in ("n_points", "overlap_fraction", "rot_max_deg", "trans_max", "noise_sigma"):
        if getattr(args, key) is not None:
            settings[key] = getattr(args, key)
    pair = synth_pair(**settings, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_points(out / "src.xyz", pair.src)
    write_points(out / "tgt.xyz", pair.tgt)
    write_transform(out / "gt.json", pair.T_gt)
    print(f"wrote {out}/src.xyz, tgt.xyz, gt.json (overlap {pair.overlap:.3f})", file=sys.stderr)
    return EXIT_OK


def cmd_serialize(args) -> int:
    from .io_data import read_points
    from .serialize import serialize

    cloud = read_points(args.input)
    code = serialize(cloud, args.curve, args.depth)
    lines = ["rank,index,code,x,y,z"]
    for rank, i in enumerate(code.order):
        x, y, z = cloud.points[i]
        lines.append(f"{rank},{i},{int(code.codes[i])},{x:.17g},{y:.17g},{z:.17g}")
    print("\n".join(lines))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import PATHS, scaling_study, summarize, to_csv

    unknown = set(args.paths) - set(PATHS)
    if unknown:
        raise UsageError(f"unknown bench paths {sorted(unknown)}")
    rows = scaling_study(args.lengths, args.paths, d_model=args.d_model, n_blocks=args.blocks, seed=args.seed)
    text = to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(json.dumps(summarize(rows), indent=2), file=sys.stderr)
    return EXIT_OK


def gradcheck_suite(module: str, seed: int = 0) -> list[tuple[str, float, bool]]:
    from .gradchecks import SUITES

    names = list(SUITES) if module == "all" else [module]
    rows = []
    for name in names:
        for label, fn in SUITES[name](seed):
            report = fn()
            rows.append((f"{name}.{label}", report.worst, report.passed))
    return rows


def cmd_gradcheck(args) -> int:
    rows = gradcheck_suite(args.module, args.seed)
    width = max(len(r[0]) for r in rows)
    for name, err, ok in rows:
        print(f"{name.ljust(width)}  {err:.3e}  {'pass' if ok else 'FAIL'}")
    return EXIT_OK if all(r[2] for r in rows) else EXIT_CHECK


def cmd_train_toy(args) -> int:
    from .pipeline import save_params, smooth, toy_config, toy_dataset, train_toy

    config = _load_config(args.config) if args.config else toy_config()
    config = config.replace(seed=args.seed)
    data = toy_dataset(args.pairs, args.seed)
    params, trace = train_toy(data, config, args.steps)
    sm = smooth(trace)
    lines = ["step,loss,smoothed"] + [f"{i},{v:.17g},{s:.17g}" for i, (v, s) in enumerate(zip(trace, sm))]
    text = "\n".join(lines) + "\n"
    if args.trace:
        Path(args.trace).write_text(text)
    else:
        sys.stdout.write(text)
    if args.out:
        save_params(args.out, params, config)
    if len(sm):
        window = min(20, len(sm))
        print(f"smoothed loss {sm[window - 1]:.4f} -> {sm[-1]:.4f}", file=sys.stderr)
    return EXIT_OK


def _pair_dirs(root: Path) -> list[Path]:
    if (root / "src.xyz").exists():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "src.xyz").exists())


def cmd_eval(args) -> int:
    from .io_data import SynthPair, read_points, read_transform
    from .pipeline import evaluate, init_model, load_params

    config = _load_config(args.config)
    if args.params:
        params, config = load_params(args.params, config if args.config else None)
    else:
        params = init_model(config, args.seed)
    dirs = _pair_dirs(Path(args.pairs))
    if not dirs:
        raise UsageError(f"no pair directories with src.xyz under {args.pairs}")
    pairs = [SynthPair(read_points(d / "src.xyz"), read_points(d / "tgt.xyz"), read_transform(d / "gt.json"), float("nan"))
             for d in dirs]
    summary = evaluate(pairs, params, config, args.oracle_features, args.rot_thresh, args.trans_thresh)
    for d, row in zip(dirs, summary["per_pair"]):
        row["pair"] = d.name
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import format_table, run_ablation, toy_config, toy_dataset

    data = toy_dataset(args.pairs, args.seed)
    held_out = toy_dataset(args.eval_pairs, args.seed + 1)
    table = run_ablation(data, toy_config(seed=args.seed), args.steps, held_out)
    print(json.dumps(table, indent=2))
    print(format_table(table), file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridreg", description="Point cloud registration toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="register two point files")
    r.add_argument("--src", required=True)
    r.add_argument("--tgt", required=True)
    r.add_argument("--config")
    r.add_argument("--params")
    r.add_argument("--oracle-features", action="store_true")
    r.add_argument("--gt", help="ground-truth transform JSON for oracle features (default: identity)")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_register)

    s = sub.add_parser("synth", help="write a synthetic pair")
    s.add_argument("--preset", default="highoverlap", choices=["highoverlap", "lowoverlap"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--n-points", dest="n_points", type=int)
    s.add_argument("--overlap", dest="overlap_fraction", type=float)
    s.add_argument("--rot-max", dest="rot_max_deg", type=float)
    s.add_argument("--trans-max", dest="trans_max", type=float)
    s.add_argument("--noise", dest="noise_sigma", type=float)
    s.set_defaults(func=cmd_synth)

    z = sub.add_parser("serialize", help="print per-point serial codes")
    z.add_argument("--in", dest="input", required=True)
    z.add_argument("--curve", default="zorder",
                   choices=["zorder", "trans_zorder", "hilbert", "trans_hilbert", "xyz", "trans_xyz"])
    z.add_argument("--depth", type=int, default=16)
    z.set_defaults(func=cmd_serialize)

    b = sub.add_parser("bench", help="FLOPs and memory scaling study (CSV)")
    b.add_argument("--lengths", type=_int_list, default=[256, 512, 1024, 1536])
    b.add_argument("--paths", type=_str_list, default=["ssm", "attn", "hybrid"])
    b.add_argument("--d-model", type=int, default=16)
    b.add_argument("--blocks", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--module", default="all", choices=["losses", "ssm", "attention", "backbone", "matching", "all"])
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train-toy", help="train on small synthetic pairs")
    t.add_argument("--pairs", type=int, default=20)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--trace", help="write the loss trace CSV here instead of stdout")
    t.set_defaults(func=cmd_train_toy)

    e = sub.add_parser("eval", help="RRE/RTE/RR over a directory of pairs")
    e.add_argument("--pairs", required=True)
    e.add_argument("--params")
    e.add_argument("--config")
    e.add_argument("--oracle-features", action="store_true")
    e.add_argument("--rot-thresh", type=float, default=5.0)
    e.add_argument("--trans-thresh", type=float, default=2.0)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="variant / curve / order-indicator comparison on toy pairs")
    a.add_argument("--pairs", type=int, default=20)
    a.add_argument("--eval-pairs", type=int, default=5)
    a.add_argument("--steps", type=int, default=40)
    a.add_argument("--seed", type=int, default=1)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        if not e.reported:
            print(f"hybridreg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as e:
        print(f"hybridreg: parse error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RegistrationError, np.linalg.LinAlgError) as e:
        print(f"hybridreg: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except (OSError, ValueError) as e:
        # unreadable inputs, malformed JSON and invalid configuration values
        print(f"hybridreg: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command line: oracle curves, training, alpha sweeps, attacks and reports.

Exit codes: 0 success, 2 usage or I/O error, 3 alphabet too large for the
exact oracle, 4 training diverged (or every sweep point failed).
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .data import binary_mixture, gen_discrete, gen_mixture, load_embeddings, train_test_split
from .errors import CapacityError, DivergenceError, DVPFError, NumericError, ParseError, ValidationError
from .info_measures import mutual_information
from .model import load_checkpoint, save_checkpoint
from .pf_oracle import DEFAULT_ALPHA_GRID, pf_curve, read_joint
from .report import (
    plot_curve,
    plot_tradeoff,
    read_curve_csv,
    read_tradeoff_csv,
    render_run,
    write_curve_csv,
    write_tradeoff_csv,
)
from .trainer import LR_SCHEDULES, TrainConfig, fit, sweep_alpha

log = logging.getLogger("dvpf")

EXIT_OK, EXIT_USAGE, EXIT_CAPACITY, EXIT_DIVERGED = 0, 2, 3, 4

# training options that may come from flags, a config file, or defaults
TRAIN_DEFAULTS = {
    "variant": "P1",
    "alpha": 1.0,
    "steps": 1000,
    "batch_size": 128,
    "adversary_inner_steps": 5,
    "d_z": 256,
    "hidden": [256, 256],
    "xi_hidden": None,
    "explicit_prior": False,
    "regularizer_weight": 1.0,
    "betas": [0.9, 0.999],
    "lr_schedule": "constant",
    "xi_printed_sign": False,
    "snapshot_every": 0,
    "divergence_factor": 10.0,
    "divergence_patience": 100,
    "step_sizes": {},
    "test_fraction": 0.2,
    "synthetic": None,
}


class UsageError(Exception):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _floats(text, what):
    try:
        vals = [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"{what}: expected a comma-separated list of numbers, got {text!r}") from None
    return vals


def _default_seed():
    env = os.environ.get("DVPF_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"DVPF_SEED must be an integer, got {env!r}") from None


def write_manifest(out_dir, command, config, seeds, inputs, artifacts):
    """Written last: its presence marks a complete run."""
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {p: _sha256(p) for p in inputs},
        "artifacts": {os.path.basename(p): _sha256(p) for p in artifacts},
        "tool_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


# ------------------------------------------------------------------ oracle


def cmd_oracle(args):
    if not os.path.exists(args.joint):
        raise FileNotFoundError(args.joint)
    joint = read_joint(args.joint)
    grid = _floats(args.alpha_grid, "--alpha-grid") if args.alpha_grid else DEFAULT_ALPHA_GRID
    if args.budgets:
        budgets = _floats(args.budgets, "--budgets")
    else:
        budgets = list(np.linspace(0.0, mutual_information(joint), 11))
    seed = _default_seed() if args.seed is None else args.seed
    curve = pf_curve(joint, budgets, args.z_card, alpha_grid=grid, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "curve.csv")
    svg_path = os.path.join(args.out, "curve.svg")
    write_curve_csv(curve, csv_path)
    plot_curve(read_curve_csv(csv_path), svg_path)
    write_manifest(args.out, "oracle",
                   {"alpha_grid": [float(a) for a in grid], "budgets": [float(b) for b in budgets],
                    "z_card": args.z_card},
                   {"seed": seed}, [args.joint], [csv_path, svg_path])
    print(f"wrote {csv_path}")
    return EXIT_OK


# --------------------------------------------------------------- training


def _parse_synthetic(text):
    """``mixture[:k=v,...]`` or ``discrete:joint=PATH[,k=v,...]``."""
    kind, _, rest = text.partition(":")
    opts = {}
    for item in filter(None, rest.split(",")):
        k, eq, v = item.partition("=")
        if not eq:
            raise UsageError(f"--synthetic option {item!r} is not key=value")
        opts[k.strip()] = v.strip()
    if kind not in ("mixture", "discrete"):
        raise UsageError(f"--synthetic kind must be 'mixture' or 'discrete', got {kind!r}")
    return kind, opts


def load_dataset(data_path, synthetic, seed):
    """Returns ``(full_batch, inputs, extra)``; ``extra`` holds codebook data for the oracle check."""
    if (data_path is None) == (synthetic is None):
        raise UsageError("give exactly one of a data file or --synthetic")
    if data_path is not None:
        if not os.path.exists(data_path):
            raise FileNotFoundError(data_path)
        return load_embeddings(data_path), [data_path], {}
    kind, opts = _parse_synthetic(synthetic)
    try:
        n = int(opts.pop("n", 4000))
        if kind == "mixture":
            spec = binary_mixture(d_x=int(opts.pop("d_x", 8)), separation=float(opts.pop("separation", 1.5)),
                                  informative_dims=int(opts.pop("informative_dims", 2)))
            ident = int(opts.pop("identities", 0))
            if opts:
                raise UsageError(f"unknown mixture options {sorted(opts)}")
            return gen_mixture(spec, n, seed=seed, n_identities=ident), [], {}
        if "joint" not in opts:
            raise UsageError("--synthetic discrete needs joint=PATH")
        path = opts.pop("joint")
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        joint = read_joint(path)
        embed_dim = int(opts.pop("embed_dim", 8))
        noise = float(opts.pop("noise", 0.01))
        if opts:
            raise UsageError(f"unknown discrete options {sorted(opts)}")
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise UsageError(f"bad --synthetic value: {exc}") from None
    batch, codebook, _ = gen_discrete(joint, embed_dim, n, seed=seed, noise=noise)
    return batch, [path], {"joint": joint, "codebook": codebook}


def resolve_train_options(args):
    """flags > config file > defaults; seed falls back to DVPF_SEED, then 0."""
    opts = dict(TRAIN_DEFAULTS)
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(args.config)
        with open(args.config, encoding="utf-8") as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"config {args.config}: {exc.msg}", line=exc.lineno) from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must be a flat key-value document")
        unknown = set(cfg) - set(TRAIN_DEFAULTS) - {"seed", "alphas"}
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        opts.update(cfg)
    for key in list(TRAIN_DEFAULTS) + ["seed"]:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    if opts.get("seed") is None:
        opts["seed"] = _default_seed()
    return opts


def _widths(value, flag):
    if isinstance(value, str):
        return [int(h) for h in _floats(value, flag)]
    return value


def _train_config(opts):
    hidden = _widths(opts["hidden"], "--hidden")
    xi_hidden = _widths(opts["xi_hidden"], "--xi-hidden")
    return TrainConfig(
        variant=opts["variant"], alpha=float(opts["alpha"]), steps=int(opts["steps"]),
        batch_size=int(opts["batch_size"]), step_sizes=dict(opts["step_sizes"]),
        adversary_inner_steps=int(opts["adversary_inner_steps"]), seed=int(opts["seed"]),
        d_z=int(opts["d_z"]), explicit_prior=bool(opts["explicit_prior"]), hidden=tuple(hidden),
        xi_hidden=None if xi_hidden is None else tuple(xi_hidden),
        regularizer_weight=float(opts["regularizer_weight"]), betas=tuple(opts["betas"]),
        lr_schedule=opts["lr_schedule"], xi_printed_sign=bool(opts["xi_printed_sign"]),
        snapshot_every=int(opts["snapshot_every"]), divergence_factor=float(opts["divergence_factor"]),
        divergence_patience=int(opts["divergence_patience"]),
    )


def _oracle_check(bundle, extra, seed):
    from .evaluation import channel_informations

    joint, codebook = extra["joint"], extra["codebook"]
    ix, is_, se_ix, se_is = channel_informations(bundle, codebook, joint, seed=seed)
    n_x = joint.shape[1]
    curve = pf_curve(joint, [is_], n_x + 1, seed=seed)
    best = curve.points[0].utility
    gap = best - ix
    return {"utility_bits": ix, "leakage_bits": is_, "utility_se": se_ix, "leakage_se": se_is,
            "oracle_utility_bits": best, "gap_bits": gap, "agrees_within_0.1": bool(gap <= 0.1)}


def cmd_train(args):
    opts = resolve_train_options(args)
    config = _train_config(opts)
    batch, inputs, extra = load_dataset(args.data, opts["synthetic"], config.seed)
    train, test = train_test_split(batch, seed=config.seed, test_fraction=float(opts["test_fraction"]))
    os.makedirs(args.out_dir, exist_ok=True)
    artifacts = []

    def snapshot(bundle, step):
        from .evaluation import snapshot_metrics

        p = os.path.join(args.out_dir, f"checkpoint-{step + 1:06d}.dvpf")
        save_checkpoint(bundle, p, extra={"step": step + 1, "train_config": config.to_dict()})
        artifacts.append(p)
        return snapshot_metrics(bundle, train, test, seed=config.seed)

    hist_path = os.path.join(args.out_dir, "history.ndjson")
    time_path = os.path.join(args.out_dir, "timings.ndjson")
    try:
        bundle, history = fit(train, config, evaluate=snapshot if config.snapshot_every else None)
    except DivergenceError as exc:
        exc.history.write(hist_path)
        exc.history.write_timings(time_path)
        write_manifest(args.out_dir, "train", config.to_dict(), {"seed": config.seed}, inputs,
                       artifacts + [hist_path, time_path])
        raise
    history.write(hist_path)
    history.write_timings(time_path)
    ckpt = os.path.join(args.out_dir, "checkpoint.dvpf")
    save_checkpoint(bundle, ckpt, extra={"step": config.steps, "train_config": config.to_dict()})
    cfg_path = os.path.join(args.out_dir, "config.json")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        json.dump({**config.to_dict(), "synthetic": opts["synthetic"],
                   "test_fraction": opts["test_fraction"]}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    artifacts += [hist_path, time_path, ckpt, cfg_path]
    if history.snapshots:
        snap_path = os.path.join(args.out_dir, "snapshots.ndjson")
        with open(snap_path, "w", encoding="utf-8") as fh:
            for sn in history.snapshots:
                fh.write(json.dumps(sn, sort_keys=True) + "\n")
        artifacts.append(snap_path)
    if extra:
        check = _oracle_check(bundle, extra, config.seed)
        check_path = os.path.join(args.out_dir, "oracle_check.json")
        with open(check_path, "w", encoding="utf-8") as fh:
            json.dump(check, fh, indent=1, sort_keys=True)
            fh.write("\n")
        artifacts.append(check_path)
        flag = "agrees" if check["agrees_within_0.1"] else "DISAGREES"
        print(f"oracle check: utility {check['utility_bits']:.4f} bits vs curve "
              f"{check['oracle_utility_bits']:.4f} at leakage {check['leakage_bits']:.4f} ({flag} within 0.1 bits)")
    write_manifest(args.out_dir, "train", config.to_dict(), {"seed": config.seed}, inputs, artifacts)
    first, last = history.records[0]["recon_nll"], history.records[-1]["recon_nll"]
    print(f"trained {config.steps} rounds: recon_nll {first:.4f} -> {last:.4f}")
    return EXIT_OK


def cmd_sweep(args):
    alphas = _floats(args.alphas, "--alphas")
    if not alphas:
        raise UsageError("--alphas is empty")
    if any(a < 0 for a in alphas):
        raise UsageError("every alpha must be >= 0")
    opts = resolve_train_options(args)
    config = _train_config(opts)
    batch, inputs, _ = load_dataset(args.data, opts["synthetic"], config.seed)
    train, test = train_test_split(batch, seed=config.seed, test_fraction=float(opts["test_fraction"]))
    points = sweep_alpha(train, config, alphas, test=test, jobs=args.jobs)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "tradeoff.csv")
    svg_path = os.path.join(args.out_dir, "tradeoff.svg")
    write_tradeoff_csv(points, csv_path)
    plot_tradeoff(read_tradeoff_csv(csv_path), svg_path)
    write_manifest(args.out_dir, "sweep", {**config.to_dict(), "alphas": sorted(alphas)},
                   {"seed": config.seed}, inputs, [csv_path, svg_path])
    n_ok = sum(p.ok for p in points)
    print(f"wrote {csv_path} ({n_ok}/{len(points)} points ok)")
    return EXIT_OK if n_ok else EXIT_DIVERGED


def cmd_attack(args):
    from .evaluation import attack, encode_means

    for p in (args.checkpoint, args.data):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    bundle, _ = load_checkpoint(args.checkpoint)
    batch = load_embeddings(args.data)
    if batch.d_x != bundle.d_x:
        raise UsageError(f"data has d_x={batch.d_x}, checkpoint expects {bundle.d_x}")
    seed = _default_seed() if args.seed is None else args.seed
    train, test = train_test_split(batch, seed=seed, test_fraction=args.test_fraction)
    rep = attack(encode_means(bundle, train.x), train.s, encode_means(bundle, test.x), test.s,
                 attacker=args.attacker, n_classes=batch.n_classes, seed=seed)
    text = json.dumps(rep.to_dict(), indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_report(args):
    if not os.path.isdir(args.run_dir):
        raise FileNotFoundError(args.run_dir)
    text = render_run(args.run_dir)
    if not text:
        raise UsageError(f"no reportable artifacts in {args.run_dir}")
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_train_flags(p):
    # defaults are None so the config file can fill whatever is not given
    p.add_argument("data", nargs="?", help="dvpf-emb-1 embedding file")
    p.add_argument("--synthetic", help="mixture[:n=..,d_x=..,separation=..,identities=..] or "
                                       "discrete:joint=PATH[,n=..,embed_dim=..,noise=..]")
    p.add_argument("--config", help="flat JSON key-value config file")
    p.add_argument("--variant", choices=("P1", "P2"))
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--adversary-inner-steps", dest="adversary_inner_steps", type=int)
    p.add_argument("--d-z", dest="d_z", type=int)
    p.add_argument("--hidden", help="comma-separated hidden widths")
    p.add_argument("--xi-hidden", dest="xi_hidden",
                   help="hidden widths of the sensitive decoder (default: --hidden); empty for linear")
    p.add_argument("--explicit-prior", dest="explicit_prior", action="store_true", default=None)
    p.add_argument("--regularizer-weight", dest="regularizer_weight", type=float)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=LR_SCHEDULES)
    p.add_argument("--xi-printed-sign", dest="xi_printed_sign", action="store_true", default=None)
    p.add_argument("--snapshot-every", dest="snapshot_every", type=int)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--divergence-factor", dest="divergence_factor", type=float,
                   help="stop when recon_nll exceeds this multiple of its first value ...")
    p.add_argument("--divergence-patience", dest="divergence_patience", type=int,
                   help="... for this many consecutive rounds")
    p.add_argument("--step-size", dest="step_size_items", action="append", metavar="BLOCK=LR",
                   help="per-block step size, repeatable")
    p.add_argument("--out-dir", dest="out_dir", required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="dvpf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dvpf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle", help="exact privacy funnel curve of a small joint")
    p.add_argument("joint", help="joint pmf file: one row per s, whitespace separated")
    p.add_argument("--alpha-grid", dest="alpha_grid")
    p.add_argument("--z-card", dest="z_card", type=int)
    p.add_argument("--budgets")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("train", help="fit one model")
    _add_train_flags(p)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="independent fits over a list of alphas")
    _add_train_flags(p)
    p.add_argument("--alphas", required=True, help="comma-separated alphas")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack", help="audit a checkpoint with a fresh attacker")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--attacker", choices=("margin-classifier", "logistic"), default="margin-classifier")
    p.add_argument("--seed", type=int)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="aligned-text tables for a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "step_size_items", None):
        sizes = {}
        for item in args.step_size_items:
            k, eq, v = item.partition("=")
            try:
                sizes[k] = float(v)
            except ValueError:
                eq = ""
            if not eq:
                print(f"dvpf: error: --step-size expects BLOCK=LR, got {item!r}", file=sys.stderr)
                return EXIT_USAGE
        args.step_sizes = sizes
    try:
        return args.func(args)
    except CapacityError as exc:
        print(f"dvpf: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except DivergenceError as exc:
        print(f"dvpf: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericError as exc:
        print(f"dvpf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"dvpf: no such file: {exc.filename or exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ValidationError, ParseError, OSError) as exc:
        print(f"dvpf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DVPFError as exc:
        print(f"dvpf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

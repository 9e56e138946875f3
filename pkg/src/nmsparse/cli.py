"""Command-line entry point: ``nmsparse <command> ...``.

Exit status is 0 on success, 1 on a configuration or input error, and 2 when
a grid finished but some rows failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from . import sparse_format as sf
from .criteria import CRITERIA, score
from .masks import PatternSpec, make_mask, parse_pattern
from .toylm import (
    CALIBRATED,
    SparsityPolicy,
    capture_site_inputs,
    prepare_policy,
    save_checkpoint,
)
from .transforms import TRANSFORMS

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, keeping 2 for partial grids
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _sites(text: str | None) -> frozenset:
    return frozenset(s.strip() for s in text.split(",") if s.strip()) if text else frozenset()


def _policy_from_args(args) -> SparsityPolicy:
    target = args.target
    criterion = args.criterion or ("wt" if target == "weights" else "act")
    try:
        return SparsityPolicy(
            target=target,
            pattern=parse_pattern(args.pattern),
            criterion=criterion,
            transform=args.transform,
            include_sites=_sites(args.include_sites),
            exclude_sites=_sites(args.exclude_sites),
            rank=args.rank,
        )
    except ValueError as exc:
        raise harness.ConfigError(str(exc)) from exc


def _load(args, need_grid: bool) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config, seed=args.seed, require_grid=need_grid)
    if getattr(args, "checkpoint", None):
        if not Path(args.checkpoint).is_file():
            raise harness.ConfigError(f"checkpoint not found: {args.checkpoint}")
        cfg = replace(cfg, checkpoint=Path(args.checkpoint))
    return cfg


def _print_report(report: harness.DropReport, fmt: str) -> None:
    sys.stdout.write(harness.report_csv(report) if fmt == "csv" else harness.report_markdown(report))


def cmd_train(args) -> int:
    cfg = _load(args, need_grid=False)
    train_text = cfg.splits()[0]
    model = harness.build_model(replace(cfg, checkpoint=None), train_text)
    out = Path(args.output) if args.output else cfg.output_dir / "model.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    print(f"saved {out} (train loss {model.train_loss:.4f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args, need_grid=False)
    cfg = replace(cfg, grid=[harness.DENSE_POLICY, _policy_from_args(args)])
    report = harness.run(cfg)
    _print_report(report, args.format or "markdown")
    return EXIT_PARTIAL if report.failed else EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load(args, need_grid=True)
    report = harness.run(cfg)
    formats = [args.format] if args.format else ["csv", "markdown"]
    for path in harness.emit_report(report, cfg.output_dir, formats):
        print(path)
    if report.failed:
        print(f"{len(report.failed)} of {len(report.rows)} grid rows failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_meta_table(args) -> int:
    specs = harness.STANDARD_SPECS
    if args.pattern:
        try:
            specs = [parse_pattern(p) for p in args.pattern]
        except ValueError as exc:
            raise harness.ConfigError(str(exc)) from exc
        if not all(isinstance(s, PatternSpec) for s in specs):
            raise harness.ConfigError("meta-table takes N:M patterns only")
    report = harness.DropReport([], harness.metadata_table(specs), baseline=float("nan"), model="", train_loss=None, eval_bytes=0)
    if (args.format or "markdown") == "csv":
        sys.stdout.write(harness.metadata_csv(report))
    else:
        print("| Pattern | C(M,N) | Bits per block | Bits per element |")
        print("|---|---:|---:|---:|")
        for m in report.metadata:
            print(f"| {m.spec} | {m.pattern_count} | {m.bits_per_block} | {m.bits_per_element:.4f} |")
    return EXIT_OK


def _read_matrix(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, delimiter=",", ndmin=2)


def cmd_encode(args) -> int:
    spec = parse_pattern(args.pattern)
    if not isinstance(spec, PatternSpec):
        raise harness.ConfigError("encode needs an N:M pattern")
    X = _read_matrix(Path(args.input))
    c = sf.encode(X, make_mask(score(args.criterion, X), spec))
    sf.save(c, args.output)
    print(f"{args.output}: {c.rows}x{c.cols} {spec}, {len(c.meta)} metadata bytes, {c.values.size} values")
    return EXIT_OK


def cmd_decode(args) -> int:
    X = sf.decode(sf.load(args.input))
    out = Path(args.output)
    if out.suffix == ".npy":
        np.save(out, X)
    else:
        np.savetxt(out, X, delimiter=",", fmt="%.17g")
    print(f"{out}: {X.shape[0]}x{X.shape[1]}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load(args, need_grid=False)
    policy = _policy_from_args(args)
    if policy.target != "activations" or policy.transform not in CALIBRATED | {"rsparse"}:
        raise harness.ConfigError(f"fit needs an activation policy with a calibrated transform, got {policy.transform!r}")
    train_text, calib_text, _ = cfg.splits()
    model = harness.build_model(cfg, train_text)
    calib = capture_site_inputs(model, calib_text, list(model.sites()), max_windows=cfg.calibration.batches)
    prepared = prepare_policy(model, policy, calib, steps=cfg.calibration.steps, lr=cfg.calibration.lr)
    arrays = {}
    for site, rt in prepared.sites.items():
        if rt.eta is not None:
            arrays[f"{site}.eta"] = rt.eta.values
        if rt.diag_scale is not None:
            arrays[f"{site}.diag_scale"] = rt.diag_scale
        if rt.factors is not None:
            arrays[f"{site}.A"], arrays[f"{site}.B"] = rt.factors.A, rt.factors.B
        if rt.fit_losses is not None:
            init, best = rt.fit_losses
            print(f"{site!s:<8} {rt.fit_status:<9} loss {init:.6g} -> {best:.6g}")
    out = Path(args.output) if args.output else cfg.output_dir / "fit.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, **arrays)
    print(f"saved {out} ({len(arrays)} arrays for {policy.describe()})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nmsparse", description="N:M and unstructured activation sparsity toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="TOML experiment file, or bundled:mini / bundled:default")
        sp.add_argument("--seed", type=int, help="override the config seed")

    def with_model(sp):
        sp.add_argument("--checkpoint", help="use this trained model instead of the config's model section")

    def with_policy(sp, transform_default="none"):
        sp.add_argument("--target", choices=("activations", "weights"), default="activations")
        sp.add_argument("--pattern", default="2:4", help="N:M or unstructured:S")
        sp.add_argument("--criterion", choices=CRITERIA)
        sp.add_argument("--transform", choices=TRANSFORMS, default=transform_default)
        sp.add_argument("--include-sites", help="comma list, e.g. up,down.1")
        sp.add_argument("--exclude-sites", help="comma list")
        sp.add_argument("--rank", type=int, help="R-Sparse rank (default min(out, in) // 4)")

    fmt = dict(choices=("csv", "markdown"))

    sp = sub.add_parser("train", help="train the toy LM and save a checkpoint")
    with_config(sp)
    sp.add_argument("--output", help="checkpoint path (default <output_dir>/model.ckpt)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="perplexity drop of one policy")
    with_config(sp)
    with_model(sp)
    with_policy(sp)
    sp.add_argument("--format", **fmt)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grid", help="run the config's grid and write reports")
    with_config(sp)
    with_model(sp)
    sp.add_argument("--format", help="write only this format (default both)", **fmt)
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("meta-table", help="print metadata cost per N:M pattern")
    sp.add_argument("--pattern", action="append", help="repeatable; default 2:4 4:8 8:16 16:32")
    sp.add_argument("--format", **fmt)
    sp.set_defaults(func=cmd_meta_table)

    sp = sub.add_parser("encode", help="mask a matrix (.npy or .csv) and write an NMSP file")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--pattern", default="2:4")
    sp.add_argument("--criterion", choices=("act", "clact"), default="act")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="expand an NMSP file to .npy or .csv")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("fit", help="fit calibrated transform parameters and save them as .npz")
    with_config(sp)
    with_model(sp)
    with_policy(sp, transform_default="lpts")
    sp.add_argument("--output", help="artifact path (default <output_dir>/fit.npz)")
    sp.set_defaults(func=cmd_fit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, ValueError, OSError) as exc:
        print(f"nmsparse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

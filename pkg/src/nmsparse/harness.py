"""Experiment runner: TOML config in, perplexity-drop report out.

Config schema (all sections optional except ``grid``/``sweep``)::

    seed = 0                    # model init and training stream
    output_dir = "reports"      # overridden by $NMSPARSE_OUTPUT_DIR
    eval_bytes = 32768          # truncate the eval split (0 = whole split)

    [model]                     # either a checkpoint ...
    checkpoint = "model.ckpt"
    # ... or ToyLMConfig fields plus training knobs
    dim = 64
    layers = 2
    heads = 2
    ffn_mult = 4
    ctx = 64
    train_steps = 2000
    lr = 1.0
    batch_size = 16

    [corpus]                    # omit to split the bundled corpus 90/5/5
    train = "train.txt"
    calib = "calib.txt"
    eval = "eval.txt"

    [calibration]
    batches = 8                 # calib windows captured per site
    steps = 100                 # L-PTS / LS optimizer steps
    lr = 0.01

    [[grid]]                    # one policy per table
    target = "activations"
    pattern = "2:4"
    criterion = "act"
    transform = "none"
    include_sites = ["up", "down.1"]
    exclude_sites = []
    rank = 8                    # R-Sparse only
    label = "my row"

    [[sweep]]                   # cartesian product; scalars or lists
    pattern = ["2:4", "8:16"]
    criterion = ["act", "clact"]
    transform = "none"

Report rows list every ``[[grid]]`` table in file order, then every expanded
``[[sweep]]`` in file order.

Corpus and checkpoint paths resolve against the config file's directory;
``output_dir`` resolves against the working directory.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import sparse_format as sf
from .criteria import amber_weight_stats, score, score_wt
from .masks import PatternSpec, make_mask, parse_pattern, retained_score
from .toylm import (
    CALIBRATED,
    SparsityPolicy,
    ToyLM,
    ToyLMConfig,
    capture_site_inputs,
    load_checkpoint,
    load_corpus,
    perplexity,
    prepare_policy,
    split_corpus,
    train,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "CalibrationSettings",
    "ExperimentConfig",
    "DropRow",
    "MetaRow",
    "DropReport",
    "load_config",
    "resolve_config_path",
    "run",
    "build_model",
    "DENSE_POLICY",
    "metadata_table",
    "emit_report",
    "report_csv",
    "report_markdown",
    "metadata_csv",
    "read_drops_csv",
    "OUTPUT_ENV",
]

OUTPUT_ENV = "NMSPARSE_OUTPUT_DIR"
BUNDLED_PREFIX = "bundled:"
STANDARD_SPECS = (PatternSpec(2, 4), PatternSpec(4, 8), PatternSpec(8, 16), PatternSpec(16, 32))
REPORT_HEADER = (
    "Drop (%) is the relative increase in held-out byte perplexity over the dense model, "
    "(ppl - base) / base * 100; lower is better. It is perplexity-based, not a QA accuracy average."
)
DENSE_POLICY = SparsityPolicy(pattern=PatternSpec(1, 1), label="dense")
_MODEL_KEYS = {"checkpoint", "vocab", "dim", "layers", "heads", "ffn_mult", "ctx", "train_steps", "lr", "batch_size"}
_POLICY_KEYS = {"target", "pattern", "criterion", "transform", "include_sites", "exclude_sites", "rank", "label"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationSettings:
    batches: int = 8
    steps: int = 100
    lr: float = 1e-2


@dataclass
class ExperimentConfig:
    grid: list[SparsityPolicy]
    model: ToyLMConfig = field(default_factory=ToyLMConfig)
    checkpoint: Path | None = None
    train_steps: int = 2000
    train_lr: float = 1.0
    batch_size: int = 16
    corpus: dict[str, Path] | None = None
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    seed: int = 0
    output_dir: Path = Path("reports")
    eval_bytes: int = 0

    def __post_init__(self):
        if not self.grid:
            raise ConfigError("grid is empty; add at least one [[grid]] or [[sweep]] entry")
        if self.checkpoint is not None and not Path(self.checkpoint).is_file():
            raise ConfigError(f"checkpoint not found: {self.checkpoint}")
        if self.corpus is not None:
            missing = {"train", "calib", "eval"} - set(self.corpus)
            if self.checkpoint is not None:
                missing.discard("train")
            if missing:
                raise ConfigError(f"corpus section is missing {sorted(missing)}")
            for split, path in self.corpus.items():
                if not Path(path).is_file():
                    raise ConfigError(f"{split} corpus not found: {path}")
        if self.eval_bytes < 0:
            raise ConfigError("eval_bytes must be >= 0")

    def splits(self) -> tuple[bytes, bytes, bytes]:
        if self.corpus is None:
            return split_corpus(load_corpus())
        read = lambda k: Path(self.corpus[k]).read_bytes() if k in self.corpus else b""
        return read("train"), read("calib"), read("eval")


def resolve_config_path(name) -> Path:
    """A filesystem path, or ``bundled:<name>`` for a config shipped with the package."""
    name = str(name)
    if name.startswith(BUNDLED_PREFIX):
        res = resources.files("nmsparse") / "assets" / f"{name[len(BUNDLED_PREFIX):]}.toml"
        if not res.is_file():
            raise ConfigError(f"no bundled config named {name!r}")
        return Path(str(res))
    return Path(name)


def _policy(entry: dict, where: str) -> SparsityPolicy:
    unknown = set(entry) - _POLICY_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = dict(entry)
    try:
        if "pattern" in kw:
            kw["pattern"] = parse_pattern(kw["pattern"])
        for key in ("include_sites", "exclude_sites"):
            if key in kw:
                kw[key] = frozenset(kw[key])
        if kw.get("target") == "weights":
            kw.setdefault("criterion", "wt")
        return SparsityPolicy(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _expand_sweep(entry: dict, where: str) -> list[SparsityPolicy]:
    axes = {k: v if isinstance(v, list) and k not in ("include_sites", "exclude_sites") else [v] for k, v in entry.items()}
    for k in ("include_sites", "exclude_sites"):
        # a list of lists sweeps site sets; a flat list is one set
        v = entry.get(k)
        if isinstance(v, list) and v and all(isinstance(x, list) for x in v):
            axes[k] = v
    keys = list(axes)
    return [_policy(dict(zip(keys, combo)), where) for combo in itertools.product(*(axes[k] for k in keys))]


def load_config(path, seed: int | None = None, require_grid: bool = True) -> ExperimentConfig:
    """Parse a TOML experiment file. ``require_grid=False`` allows a grid-less file (single-policy commands)."""
    path = resolve_config_path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent
    resolve = lambda p: (base / p).resolve()

    known = {"seed", "output_dir", "eval_bytes", "model", "corpus", "calibration", "grid", "sweep"}
    if set(raw) - known:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(set(raw) - known)}")
    seed = int(raw.get("seed", 0)) if seed is None else seed

    model = dict(raw.get("model", {}))
    if set(model) - _MODEL_KEYS:
        raise ConfigError(f"[model]: unknown keys {sorted(set(model) - _MODEL_KEYS)}")
    checkpoint = resolve(model.pop("checkpoint")) if "checkpoint" in model else None
    train_steps = int(model.pop("train_steps", 2000))
    train_lr = float(model.pop("lr", 1.0))
    batch_size = int(model.pop("batch_size", 16))
    try:
        model_cfg = ToyLMConfig(**model, seed=seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from exc

    corpus = raw.get("corpus")
    if corpus is not None:
        corpus = {k: resolve(v) for k, v in corpus.items()}

    try:
        calibration = CalibrationSettings(**raw.get("calibration", {}))
    except TypeError as exc:
        raise ConfigError(f"[calibration]: {exc}") from exc
    if calibration.batches < 1 or calibration.steps < 1 or calibration.lr <= 0:
        raise ConfigError(f"[calibration]: batches and steps must be >= 1 and lr > 0, got {calibration}")

    grid = [_policy(e, f"grid[{i}]") for i, e in enumerate(raw.get("grid", []))]
    for i, e in enumerate(raw.get("sweep", [])):
        grid += _expand_sweep(e, f"sweep[{i}]")
    if not grid and not require_grid:
        grid = [DENSE_POLICY]

    out = os.environ.get(OUTPUT_ENV) or raw.get("output_dir", "reports")
    return ExperimentConfig(
        grid=grid,
        model=model_cfg,
        checkpoint=checkpoint,
        train_steps=train_steps,
        train_lr=train_lr,
        batch_size=batch_size,
        corpus=corpus,
        calibration=calibration,
        seed=seed,
        output_dir=Path(out),
        eval_bytes=int(raw.get("eval_bytes", 0)),
    )


# -- report types -----------------------------------------------------------------


@dataclass(frozen=True)
class DropRow:
    index: int
    policy: str
    target: str
    pattern: str
    criterion: str
    transform: str
    status: str  # "ok" | "failed"
    perplexity: float | None
    baseline: float
    drop_pct: float | None
    retained: float | None  # fraction of criterion score kept, on calibration inputs
    reason: str = ""


@dataclass(frozen=True)
class MetaRow:
    spec: str
    pattern_count: int
    bits_per_block: int
    bits_per_element: float


@dataclass
class DropReport:
    rows: list[DropRow]
    metadata: list[MetaRow]
    baseline: float
    model: str
    train_loss: float | None
    eval_bytes: int

    @property
    def failed(self) -> list[DropRow]:
        return [r for r in self.rows if r.status != "ok"]


def metadata_table(specs=STANDARD_SPECS) -> list[MetaRow]:
    unique = sorted(set(specs), key=lambda s: (s.m, s.n))
    return [
        MetaRow(str(s), sf.pattern_count(s), sf.bits_per_block(s), float(sf.metadata_bits_per_element(s)))
        for s in unique
    ]


# -- runner -----------------------------------------------------------------------


def build_model(config: ExperimentConfig, train_text: bytes) -> ToyLM:
    """Load the configured checkpoint, or train from the config's model section."""
    if config.checkpoint is not None:
        return load_checkpoint(config.checkpoint)
    return train(config.model, train_text, steps=config.train_steps, lr=config.train_lr, batch_size=config.batch_size)


def _retained(model: ToyLM, policy: SparsityPolicy, calib: dict) -> float:
    kept = total = 0.0
    for site, mod in model.sites().items():
        if not policy.applies_to(site):
            continue
        W = mod.weight.detach().numpy()
        if policy.target == "weights":
            batches, scorer = [W], lambda X: score_wt(X)
        else:
            stats = amber_weight_stats(W) if policy.criterion == "amber" else None
            batches, scorer = calib[site], lambda X: score(policy.criterion, X, W, stats)
        for X in batches:
            s = scorer(X)
            kept += retained_score(s, make_mask(s, policy.pattern))
            total += float(s.sum())
    return kept / total if total > 0 else 1.0


def run(config: ExperimentConfig) -> DropReport:
    """Train or load once, capture calibration inputs once, evaluate each policy in grid order."""
    train_text, calib_text, eval_text = config.splits()
    if config.eval_bytes:
        eval_text = eval_text[: config.eval_bytes]
    model = build_model(config, train_text)
    baseline = perplexity(model, eval_text)
    log.info("dense baseline perplexity %.4f", baseline)

    calib = capture_site_inputs(model, calib_text, list(model.sites()), max_windows=config.calibration.batches)
    prepared_cache = {}
    rows = []
    for i, policy in enumerate(config.grid):
        common = dict(
            index=i,
            policy=policy.describe(),
            target=policy.target,
            pattern=str(policy.pattern),
            criterion=policy.criterion,
            transform=policy.transform,
            baseline=baseline,
        )
        try:
            retained = _retained(model, policy, calib)
            if policy.target == "activations" and not policy.is_dense:
                if policy not in prepared_cache:
                    needs = policy.transform in CALIBRATED
                    prepared_cache[policy] = prepare_policy(
                        model, policy, calib if needs else None,
                        steps=config.calibration.steps, lr=config.calibration.lr,
                    )
                ppl = perplexity(model, eval_text, prepared_cache[policy])
            else:
                ppl = perplexity(model, eval_text, policy)
            if not math.isfinite(ppl):
                raise ArithmeticError(f"non-finite perplexity {ppl}")
        except Exception as exc:  # a failing row must not sink the grid
            log.warning("grid row %d (%s) failed: %s", i, common["policy"], exc)
            rows.append(DropRow(**common, status="failed", perplexity=None, drop_pct=None, retained=None,
                                reason=f"{type(exc).__name__}: {exc}"))
            continue
        drop = (ppl - baseline) / baseline * 100.0
        rows.append(DropRow(**common, status="ok", perplexity=ppl, drop_pct=drop, retained=retained))
        log.info("row %d %-40s ppl %.4f drop %+.2f%%", i, common["policy"], ppl, drop)

    specs = list(STANDARD_SPECS) + [
        p.pattern for p in config.grid if isinstance(p.pattern, PatternSpec) and not p.pattern.is_dense
    ]
    cfg = model.config
    return DropReport(
        rows=rows,
        metadata=metadata_table(specs),
        baseline=baseline,
        model=f"toy LM dim={cfg.dim} layers={cfg.layers} heads={cfg.heads} ctx={cfg.ctx} seed={cfg.seed}",
        train_loss=model.train_loss,
        eval_bytes=len(eval_text),
    )


# -- emission -----------------------------------------------------------------------

CSV_FIELDS = ["index", "policy", "target", "pattern", "criterion", "transform", "status",
              "perplexity", "baseline", "drop_pct", "retained", "reason"]


def _fmt(x) -> str:
    return "" if x is None else f"{x:.4f}"


def report_csv(report: DropReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in report.rows:
        w.writerow([r.index, r.policy, r.target, r.pattern, r.criterion, r.transform, r.status,
                    _fmt(r.perplexity), _fmt(r.baseline), _fmt(r.drop_pct), _fmt(r.retained), r.reason])
    return buf.getvalue()


def metadata_csv(report: DropReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["spec", "pattern_count", "bits_per_block", "bits_per_element"])
    for m in report.metadata:
        w.writerow([m.spec, m.pattern_count, m.bits_per_block, _fmt(m.bits_per_element)])
    return buf.getvalue()


def report_markdown(report: DropReport) -> str:
    loss = "n/a" if report.train_loss is None else f"{report.train_loss:.4f}"
    out = [
        "# Perplexity drop report",
        "",
        REPORT_HEADER,
        "",
        f"Model: {report.model}; train loss {loss}; eval bytes {report.eval_bytes}; "
        f"dense perplexity {report.baseline:.4f}.",
        "",
        "| Method | Perplexity | Drop (%) | Retained | Status |",
        "|---|---:|---:|---:|---|",
    ]
    for r in report.rows:
        status = "ok" if r.status == "ok" else f"failed: {r.reason}"
        ppl = "OUT" if r.perplexity is None else f"{r.perplexity:.4f}"
        drop = "OUT" if r.drop_pct is None else f"{r.drop_pct:.4f}"
        out.append(f"| {r.policy} | {ppl} | {drop} | {_fmt(r.retained)} | {status} |")
    out += [
        "",
        "## Metadata cost",
        "",
        "| Pattern | C(M,N) | Bits per block | Bits per element |",
        "|---|---:|---:|---:|",
    ]
    out += [f"| {m.spec} | {m.pattern_count} | {m.bits_per_block} | {m.bits_per_element:.4f} |" for m in report.metadata]
    return "\n".join(out) + "\n"


def emit_report(report: DropReport, out_dir, formats=("csv", "markdown")) -> list[Path]:
    """Write ``drops.csv`` + ``metadata.csv`` and/or ``report.md`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    written = []
    for fmt in formats:
        if fmt == "csv":
            for name, text in (("drops.csv", report_csv(report)), ("metadata.csv", metadata_csv(report))):
                (out_dir / name).write_text(text)
                written.append(out_dir / name)
        elif fmt == "markdown":
            (out_dir / "report.md").write_text(report_markdown(report))
            written.append(out_dir / "report.md")
        else:
            raise ValueError(f"unknown report format {fmt!r}; expected csv or markdown")
    return written


def read_drops_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


"""Byte-level decoder-only transformer with sparsifiable linear layers.

Every linear layer inside a block is a *site* (``query``, ``key``, ``value``,
``out``, ``up``, ``gate``, ``down``). A :class:`SparsityPolicy` either masks
the input activations of the selected sites at inference time, optionally
wrapped in an error-mitigation transform, or statically masks their weights.
Attention internals and the LM head are never touched.

The model runs in float64 on CPU. Training is plain SGD with gradient-norm
clipping, single-threaded, fully determined by the config seed.
"""

from __future__ import annotations

import contextlib
import copy
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import transforms as T
from .criteria import CRITERIA, amber_weight_stats, score_wt
from .masks import Pattern, PatternSpec, make_mask
from .tensor import make_rng

log = logging.getLogger(__name__)

__all__ = [
    "SITES",
    "ToyLMConfig",
    "LayerSite",
    "SparsityPolicy",
    "ToyLM",
    "train",
    "perplexity",
    "unigram_perplexity",
    "apply_weight_policy",
    "prepare_policy",
    "PreparedPolicy",
    "capture_site_inputs",
    "save_checkpoint",
    "load_checkpoint",
    "load_corpus",
    "split_corpus",
    "bundled_corpus_path",
]

SITES = ("query", "key", "value", "out", "up", "gate", "down")
ACTIVATION_ONLY = frozenset(T.TRANSFORMS) - {"none"}
CALIBRATED = frozenset({"spts", "lpts", "var+lpts", "ls+lpts", "ls+lpts+var"})


def bundled_corpus_path() -> Path:
    return Path(__file__).with_name("assets") / "corpus.txt"


def load_corpus(path=None) -> bytes:
    return Path(path or bundled_corpus_path()).read_bytes()


def split_corpus(data: bytes, fractions=(0.9, 0.05, 0.05)) -> tuple[bytes, bytes, bytes]:
    """Contiguous, disjoint train / calibration / evaluation splits."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three numbers summing to 1, got {fractions}")
    a = int(len(data) * fractions[0])
    b = a + int(len(data) * fractions[1])
    return data[:a], data[a:b], data[b:]


@dataclass(frozen=True)
class ToyLMConfig:
    vocab: int = 256
    dim: int = 64
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 4
    ctx: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.vocab != 256:
            raise ValueError("the toy LM is byte-level: vocab must be 256")
        if min(self.dim, self.layers, self.heads, self.ffn_mult, self.ctx) < 1:
            raise ValueError(f"all size fields must be positive: {self}")
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.dim % 32 or self.ffn_dim % 32:
            raise ValueError(f"dim={self.dim} and ffn dim={self.ffn_dim} must be multiples of 32")

    @property
    def ffn_dim(self) -> int:
        return self.dim * self.ffn_mult


@dataclass(frozen=True, order=True)
class LayerSite:
    layer_index: int
    name: str

    def __post_init__(self):
        if self.name not in SITES:
            raise ValueError(f"unknown site {self.name!r}; expected one of {', '.join(SITES)}")

    def __str__(self):
        return f"{self.name}.{self.layer_index}"


def _site_selector_ok(sel: str) -> bool:
    name, _, idx = sel.partition(".")
    return name in SITES and (not idx or idx.isdigit())


@dataclass(frozen=True)
class SparsityPolicy:
    """What to sparsify, where, and how.

    ``include_sites`` / ``exclude_sites`` hold selectors: a site name
    (``"up"``, every layer) or ``name.layer`` (``"up.1"``). An empty include
    set means every site.
    """

    target: str = "activations"
    pattern: Pattern = PatternSpec(2, 4)
    criterion: str = "act"
    transform: str = "none"
    include_sites: frozenset = frozenset()
    exclude_sites: frozenset = frozenset()
    rank: int | None = None
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "include_sites", frozenset(self.include_sites))
        object.__setattr__(self, "exclude_sites", frozenset(self.exclude_sites))
        if self.target not in ("activations", "weights"):
            raise ValueError(f"target must be 'activations' or 'weights', got {self.target!r}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}; expected one of {', '.join(CRITERIA)}")
        if self.transform not in T.TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; expected one of {', '.join(T.TRANSFORMS)}")
        for sel in self.include_sites | self.exclude_sites:
            if not _site_selector_ok(sel):
                raise ValueError(f"bad site selector {sel!r}")
        if self.include_sites & self.exclude_sites:
            raise ValueError(f"sites both included and excluded: {sorted(self.include_sites & self.exclude_sites)}")
        if self.target == "weights":
            if self.transform in ACTIVATION_ONLY:
                raise ValueError(f"transform {self.transform!r} only applies to activations")
            if self.criterion != "wt":
                raise ValueError("weight sparsification scores with the 'wt' criterion")
        elif self.criterion == "wt":
            raise ValueError("the 'wt' criterion scores weights; use target='weights'")
        if self.rank is not None and self.rank < 1:
            raise ValueError(f"rank must be positive, got {self.rank}")

    @property
    def is_dense(self) -> bool:
        return self.pattern.is_dense

    def applies_to(self, site: LayerSite) -> bool:
        keys = {site.name, str(site)}
        if self.include_sites and not keys & self.include_sites:
            return False
        return not keys & self.exclude_sites

    def describe(self) -> str:
        if self.label:
            return self.label
        parts = [self.target[:3], str(self.pattern), self.criterion]
        if self.transform != "none":
            parts.append(self.transform + (f"({self.rank})" if self.rank else ""))
        if self.include_sites:
            parts.append("only=" + ",".join(sorted(self.include_sites)))
        if self.exclude_sites:
            parts.append("skip=" + ",".join(sorted(self.exclude_sites)))
        return " ".join(parts)


class SiteLinear(nn.Module):
    """Bias-free linear layer whose forward can be intercepted by a policy hook."""

    def __init__(self, in_features: int, out_features: int, site: LayerSite):
        super().__init__()
        self.site = site
        self.weight = nn.Parameter(torch.empty(out_features, in_features, dtype=torch.float64))
        self.hook: Callable | None = None

    def forward(self, x):
        if self.hook is not None:
            return self.hook(self, x)
        return F.linear(x, self.weight)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=torch.float64))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Block(nn.Module):
    def __init__(self, cfg: ToyLMConfig, index: int):
        super().__init__()
        d, f = cfg.dim, cfg.ffn_dim
        self.heads = cfg.heads
        self.attn_norm = RMSNorm(d)
        self.query = SiteLinear(d, d, LayerSite(index, "query"))
        self.key = SiteLinear(d, d, LayerSite(index, "key"))
        self.value = SiteLinear(d, d, LayerSite(index, "value"))
        self.out = SiteLinear(d, d, LayerSite(index, "out"))
        self.ffn_norm = RMSNorm(d)
        self.up = SiteLinear(d, f, LayerSite(index, "up"))
        self.gate = SiteLinear(d, f, LayerSite(index, "gate"))
        self.down = SiteLinear(f, d, LayerSite(index, "down"))

    def forward(self, x):
        b, t, d = x.shape
        hd = d // self.heads
        h = self.attn_norm(x)
        q = self.query(h).view(b, t, self.heads, hd).transpose(1, 2)
        k = self.key(h).view(b, t, self.heads, hd).transpose(1, 2)
        v = self.value(h).view(b, t, self.heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        att = att.masked_fill(causal, float("-inf")).softmax(dim=-1)
        x = x + self.out((att @ v).transpose(1, 2).reshape(b, t, d))
        h = self.ffn_norm(x)
        return x + self.down(F.silu(self.gate(h)) * self.up(h))


class ToyLM(nn.Module):
    def __init__(self, cfg: ToyLMConfig):
        super().__init__()
        self.config = cfg
        self.embed = nn.Embedding(cfg.vocab, cfg.dim, dtype=torch.float64)
        self.pos = nn.Parameter(torch.empty(cfg.ctx, cfg.dim, dtype=torch.float64))
        self.blocks = nn.ModuleList(Block(cfg, i) for i in range(cfg.layers))
        self.final_norm = RMSNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab, bias=False, dtype=torch.float64)
        self.train_loss: float | None = None
        self._init_weights(cfg.seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm.weight"):
                    continue
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.02)

    def sites(self) -> dict[LayerSite, SiteLinear]:
        return {m.site: m for m in self.modules() if isinstance(m, SiteLinear)}

    def forward(self, idx):
        t = idx.shape[1]
        if t > self.config.ctx:
            raise ValueError(f"sequence length {t} exceeds ctx={self.config.ctx}")
        x = self.embed(idx) + self.pos[:t]
        for block in self.blocks:
            x = block(x)
        return self.head(self.final_norm(x))


@contextlib.contextmanager
def _threads(n: int):
    old = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def train(
    config: ToyLMConfig,
    corpus: bytes,
    steps: int = 2000,
    lr: float = 1.0,
    batch_size: int = 16,
    clip: float = 1.0,
) -> ToyLM:
    """Train from scratch on random ctx+1 byte windows of ``corpus``."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if len(corpus) < 10 * config.ctx:
        raise ValueError(f"corpus has {len(corpus)} bytes; need at least {10 * config.ctx} (10 x ctx)")
    data = np.frombuffer(corpus, dtype=np.uint8)
    rng = make_rng(config.seed)
    model = ToyLM(config)
    opt = torch.optim.SGD(model.parameters(), lr=lr)
    span = config.ctx + 1
    losses = []
    with _threads(1):
        model.train()
        for step in range(steps):
            starts = rng.integers(0, len(data) - span + 1, size=batch_size)
            batch = torch.from_numpy(np.stack([data[s : s + span] for s in starts]).astype(np.int64))
            logits = model(batch[:, :-1])
            loss = F.cross_entropy(logits.reshape(-1, config.vocab), batch[:, 1:].reshape(-1))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
            opt.step()
            losses.append(loss.item())
            if step % 500 == 0:
                log.info("train step %d loss %.4f", step, losses[-1])
    model.eval()
    model.train_loss = float(np.mean(losses[-50:]))
    return model


def _windows(data: bytes, ctx: int) -> list[np.ndarray]:
    """Non-overlapping windows of up to ctx+1 bytes, stride ctx; the tail is kept if it predicts anything."""
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    out = []
    for start in range(0, max(len(arr) - 1, 0), ctx):
        chunk = arr[start : start + ctx + 1]
        if len(chunk) >= 2:
            out.append(chunk)
    return out


def _batched(windows: list[np.ndarray], batch_size: int) -> Iterable[torch.Tensor]:
    i = 0
    while i < len(windows):
        n = len(windows[i])
        j = i
        while j < len(windows) and j - i < batch_size and len(windows[j]) == n:
            j += 1
        yield torch.from_numpy(np.stack(windows[i:j]))
        i = j


# -- activation policies --------------------------------------------------------


@dataclass
class SiteRuntime:
    """Everything precomputed for one site: weight, criterion stats, calibrated parameters."""

    weight: np.ndarray
    stats: object = None
    eta: T.ShiftVector | None = None
    diag_scale: np.ndarray | None = None
    factors: T.LowRankFactors | None = None
    fit_status: str | None = None
    fit_losses: tuple[float, float] | None = None  # (initial, best)


@dataclass
class PreparedPolicy:
    policy: SparsityPolicy
    sites: dict[LayerSite, SiteRuntime] = field(default_factory=dict)

    def site_forward(self, site: LayerSite, X: np.ndarray) -> np.ndarray:
        rt = self.sites[site]
        p = self.policy
        W, crit, pat, st = rt.weight, p.criterion, p.pattern, rt.stats
        name = p.transform
        if name == "none":
            return T.forward_baseline(X, W, crit, pat, st)
        if name == "dpts":
            return T.forward_dpts(X, W, crit, pat, st)
        if name == "spts":
            return T.forward_spts(X, W, rt.eta, crit, pat, st)
        if name == "var":
            return T.forward_var(X, W, crit, pat, st)
        if name == "pcs":
            return T.forward_pcs(X, W, crit, pat, st)
        if name == "rsparse":
            return T.forward_rsparse(X, W, rt.factors, crit, pat, st)
        # lpts family
        return T.forward_lpts(X, W, rt.eta, crit, pat, rt.diag_scale, with_var="var" in name, stats=st)


def default_rank(weight_shape) -> int:
    return max(1, min(weight_shape) // 4)


def capture_site_inputs(model: ToyLM, text: bytes, sites: Sequence[LayerSite], max_windows: int | None = None):
    """Dense-model inputs of each site, one (tokens, channels) matrix per window."""
    wanted = set(sites)
    captured: dict[LayerSite, list[np.ndarray]] = {s: [] for s in wanted}
    modules = model.sites()

    def recorder(mod, x):
        arr = x.detach().numpy()
        captured[mod.site].extend(np.array(a) for a in arr)
        return F.linear(x, mod.weight)

    windows = _windows(text, model.config.ctx)
    if max_windows is not None:
        windows = windows[:max_windows]
    if not windows:
        raise ValueError("calibration text is too short to form a single window")
    try:
        for s in wanted:
            modules[s].hook = recorder
        with torch.no_grad():
            for batch in _batched(windows, 32):
                model(batch[:, :-1])
    finally:
        for s in wanted:
            modules[s].hook = None
    return captured


def prepare_policy(
    model: ToyLM,
    policy: SparsityPolicy,
    calib_inputs: dict[LayerSite, list[np.ndarray]] | None = None,
    steps: int = 100,
    lr: float = 1e-2,
) -> PreparedPolicy:
    """Precompute per-site state; calibrated transforms need ``calib_inputs``."""
    if policy.target != "activations":
        raise ValueError("prepare_policy handles activation policies; use apply_weight_policy for weights")
    prepared = PreparedPolicy(policy)
    for site, mod in model.sites().items():
        if not policy.applies_to(site):
            continue
        W = mod.weight.detach().numpy().copy()
        rt = SiteRuntime(weight=W)
        if policy.criterion == "amber":
            rt.stats = amber_weight_stats(W)
        tr = policy.transform
        if tr in CALIBRATED:
            if not calib_inputs or site not in calib_inputs:
                raise ValueError(f"transform {tr!r} needs calibration inputs for site {site}")
            batches = calib_inputs[site]
            if tr == "spts":
                rt.eta = T.calibrate_spts(batches)
            else:
                params = T.fit_lpts(
                    batches, W, policy.criterion, policy.pattern, steps=steps, lr=lr,
                    with_ls=tr.startswith("ls+"), with_var="var" in tr,
                    stats=rt.stats,
                )
                rt.eta, rt.diag_scale, rt.fit_status = params.eta, params.diag_scale, params.status
                rt.fit_losses = (params.initial_loss, params.best_loss)
        elif tr == "rsparse":
            rt.factors = T.rsparse_factors(W, policy.rank or default_rank(W.shape))
        prepared.sites[site] = rt
    return prepared


@contextlib.contextmanager
def policy_hooks(model: ToyLM, prepared: PreparedPolicy):
    """Route every included site through the prepared policy while active."""

    def hook(mod, x):
        arr = x.detach().numpy()
        lead = arr.shape[:-1]
        flat = arr.reshape(-1, lead[-1], arr.shape[-1])
        out = np.stack([prepared.site_forward(mod.site, X) for X in flat])
        return torch.from_numpy(out.reshape(*lead, -1))

    modules = model.sites()
    active = [modules[s] for s in prepared.sites]
    try:
        for mod in active:
            mod.hook = hook
        yield model
    finally:
        for mod in active:
            mod.hook = None


def apply_weight_policy(model: ToyLM, policy: SparsityPolicy) -> ToyLM:
    """Copy of ``model`` with |W|-masked weights at the included sites."""
    if policy.target != "weights":
        raise ValueError(f"apply_weight_policy needs target='weights', got {policy.target!r}")
    pruned = copy.deepcopy(model)
    if policy.is_dense:
        return pruned
    with torch.no_grad():
        for site, mod in pruned.sites().items():
            if policy.applies_to(site):
                W = mod.weight.numpy()
                mask = make_mask(score_wt(W), policy.pattern)
                mod.weight.copy_(torch.from_numpy(np.where(mask.bits, W, 0.0)))
    return pruned


def perplexity(
    model: ToyLM,
    text: bytes,
    policy: SparsityPolicy | PreparedPolicy | None = None,
    batch_size: int = 32,
    calib_inputs=None,
) -> float:
    """exp(mean next-byte NLL) over non-overlapping ctx windows of ``text``.

    Activation policies needing calibration must arrive prepared (or with
    ``calib_inputs``). A dense pattern leaves the model untouched.
    """
    if len(text) < model.config.ctx:
        raise ValueError(f"text has {len(text)} bytes; need at least ctx={model.config.ctx}")
    if isinstance(policy, SparsityPolicy):
        if policy.is_dense:
            policy = None
        elif policy.target == "weights":
            model, policy = apply_weight_policy(model, policy), None
        else:
            policy = prepare_policy(model, policy, calib_inputs)
    ctx = contextlib.nullcontext() if policy is None else policy_hooks(model, policy)
    total, count = 0.0, 0
    with ctx, torch.no_grad():
        for batch in _batched(_windows(text, model.config.ctx), batch_size):
            logits = model(batch[:, :-1])
            nll = F.cross_entropy(logits.reshape(-1, model.config.vocab), batch[:, 1:].reshape(-1), reduction="sum")
            total += nll.item()
            count += batch[:, 1:].numel()
    return math.exp(total / count)


def unigram_perplexity(train_text: bytes, eval_text: bytes) -> float:
    """Perplexity of an add-one smoothed byte-unigram model fit on ``train_text``."""
    counts = np.bincount(np.frombuffer(train_text, dtype=np.uint8), minlength=256) + 1.0
    logp = np.log(counts / counts.sum())
    ev = np.frombuffer(eval_text, dtype=np.uint8)
    return float(np.exp(-logp[ev].mean()))


# -- checkpoints -----------------------------------------------------------------

_CKPT_MAGIC = b"TOYL"
_CKPT_VERSION = 1
_CKPT_CONFIG = struct.Struct("<4sB7qd")


def save_checkpoint(model: ToyLM, path) -> None:
    """Versioned little-endian checkpoint: config block, then named float64 blobs."""
    cfg = model.config
    buf = io.BytesIO()
    train_loss = math.nan if model.train_loss is None else model.train_loss
    buf.write(_CKPT_CONFIG.pack(_CKPT_MAGIC, _CKPT_VERSION, cfg.vocab, cfg.dim, cfg.layers, cfg.heads,
                                cfg.ffn_mult, cfg.ctx, cfg.seed, train_loss))
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().numpy().astype("<f8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ToyLM:
    data = Path(path).read_bytes()
    magic, version, *fields, train_loss = _CKPT_CONFIG.unpack_from(data)
    if magic != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a toy LM checkpoint (magic {magic!r})")
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = ToyLMConfig(*fields)
    off = _CKPT_CONFIG.size
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        state[name] = torch.from_numpy(arr.astype(np.float64))
    model = ToyLM(cfg)
    model.load_state_dict(state)
    model.train_loss = None if math.isnan(train_loss) else train_loss
    model.eval()
    return model


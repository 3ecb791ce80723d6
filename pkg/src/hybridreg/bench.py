"""FLOPs and peak-memory accounting, and the sequence-length scaling study.

FLOP conventions (forward pass only):

* matmul (m, k) @ (k, n): ``2 m k n``
* elementwise arithmetic, exp, log, sqrt: 1 per output element
* sigmoid and softplus 3, silu 4 per element
* softmax over a row of n: ``5 n``; logsumexp ``4 n``; layer norm ``7 n``
* depthwise causal convolution with K taps: ``2 K`` per element
* reductions: 1 per input element
* selective scan, M steps, E channels, N states: ``M E (11 N + 2)``
* indexing, reshaping and concatenation: 0
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nx
from .attention import attention, cross_attention_block, init_transformer_block, self_attention_block
from .ssm import init_mamba_block, mamba_block

PATHS = ("ssm", "attn", "hybrid")
CSV_COLUMNS = ("length", "path", "flops", "peak_bytes", "ms")


@dataclass(frozen=True)
class CostReport:
    per_op: dict[str, int] = field(default_factory=dict)
    peak_bytes: int = 0
    ms: float = 0.0

    @property
    def flops(self) -> int:
        return int(sum(self.per_op.values()))

    @property
    def macs(self) -> float:
        return self.flops / 2.0


def count_flops(trace) -> CostReport:
    """Aggregate a :class:`numeric.CostTracer` (or a list of op records) by op name."""
    records = getattr(trace, "records", trace) or []
    per_op: Counter = Counter()
    for r in records:
        per_op[r.op] += int(r.flops)
    return CostReport(
        dict(sorted(per_op.items())),
        int(getattr(trace, "peak_bytes", 0)),
        float(getattr(trace, "elapsed_ms", 0.0)),
    )


def measure(fn) -> CostReport:
    """Run ``fn()`` under a cost trace without building a gradient graph."""
    with nx.no_grad(), nx.trace_costs() as tr:
        out = fn()
        del out
    return count_flops(tr)


def attention_cost(M: int, d: int, seed: int = 0) -> CostReport:
    """Cost of bare scaled dot-product attention on M tokens of width d."""
    rng = np.random.default_rng(seed)
    Q, K, V = (nx.Tensor(rng.normal(size=(M, d))) for _ in range(3))
    return measure(lambda: attention(Q, K, V))


@dataclass
class EncoderPaths:
    """Encoder blocks of width ``d_model`` used by the scaling study.

    Each path maps a (source, target) pair of M-token sequences:
    ``ssm`` runs a Mamba block per side, ``attn`` self- then cross-attention,
    and ``hybrid`` a Mamba block per side then cross-attention.
    """

    d_model: int = 16
    d_state: int = 8
    n_blocks: int = 1
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.mamba = [init_mamba_block(rng, self.d_model, self.d_state) for _ in range(self.n_blocks)]
        self.self_attn = [init_transformer_block(rng, self.d_model) for _ in range(self.n_blocks)]
        self.cross = [init_transformer_block(rng, self.d_model) for _ in range(self.n_blocks)]

    def run(self, path: str, Fs, Ft):
        for b in range(self.n_blocks):
            if path in ("ssm", "hybrid"):
                Fs, Ft = mamba_block(self.mamba[b], Fs), mamba_block(self.mamba[b], Ft)
            if path == "attn":
                Fs, Ft = self_attention_block(self.self_attn[b], Fs), self_attention_block(self.self_attn[b], Ft)
            if path in ("attn", "hybrid"):
                Fs, Ft = cross_attention_block(self.cross[b], Fs, Ft)
        return Fs, Ft

    def cost(self, path: str, length: int) -> CostReport:
        if path not in PATHS:
            raise ValueError(f"unknown path {path!r}; expected one of {PATHS}")
        rng = np.random.default_rng(self.seed + length)
        Fs = nx.Tensor(rng.normal(size=(length, self.d_model)))
        Ft = nx.Tensor(rng.normal(size=(length, self.d_model)))
        return measure(lambda: self.run(path, Fs, Ft))


def scaling_study(lengths, paths=PATHS, d_model: int = 16, d_state: int = 8, n_blocks: int = 1, seed: int = 0) -> list[dict]:
    lengths = [int(n) for n in lengths]
    if len(lengths) < 2 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be strictly ascending with at least two entries")
    enc = EncoderPaths(d_model, d_state, n_blocks, seed)
    rows = []
    for path in paths:
        for n in lengths:
            r = enc.cost(path, n)
            rows.append({"length": n, "path": path, "flops": r.flops, "peak_bytes": r.peak_bytes, "ms": r.ms})
    return rows


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.3f}" if k == "ms" else r[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


def series(rows: list[dict], path: str, key: str = "flops") -> tuple[np.ndarray, np.ndarray]:
    sel = sorted((r["length"], r[key]) for r in rows if r["path"] == path)
    return np.array([s[0] for s in sel], dtype=float), np.array([s[1] for s in sel], dtype=float)


def adjacent_ratios(rows: list[dict], path: str, key: str = "flops") -> list[dict]:
    """Cost ratio and implied growth exponent ``log(ratio) / log(length ratio)`` per step."""
    n, y = series(rows, path, key)
    out = []
    for i in range(1, len(n)):
        r = y[i] / y[i - 1]
        out.append({"from": int(n[i - 1]), "to": int(n[i]), "ratio": float(r),
                    "exponent": float(np.log(r) / np.log(n[i] / n[i - 1]))})
    return out


@dataclass(frozen=True)
class PolyFit:
    coef: np.ndarray  # highest degree first
    r2: float


def poly_fit(x, y, degree: int) -> PolyFit:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    coef = np.polyfit(x, y, degree)
    resid = y - np.polyval(coef, x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return PolyFit(coef, r2)


def summarize(rows: list[dict]) -> dict:
    """Fits and ratios per path, plus hybrid versus attention at the largest length."""
    out = {}
    for path in sorted({r["path"] for r in rows}):
        n, y = series(rows, path)
        lin = poly_fit(n, y, 1)
        entry = {"ratios": adjacent_ratios(rows, path), "linear_r2": lin.r2}
        if len(n) >= 3:
            quad = poly_fit(n, y, 2)
            a, b, _ = quad.coef
            entry["quadratic"] = {"a": float(a), "b": float(b), "r2": quad.r2,
                                  "quad_share_at_max": float(abs(a) * n[-1] ** 2 / max(abs(b) * n[-1], 1e-300))}
        out[path] = entry
    paths = {r["path"] for r in rows}
    if {"hybrid", "attn"} <= paths:
        top = max(r["length"] for r in rows)
        h = next(r["flops"] for r in rows if r["path"] == "hybrid" and r["length"] == top)
        a = next(r["flops"] for r in rows if r["path"] == "attn" and r["length"] == top)
        out["attn_over_hybrid_at_max"] = a / h
    return out

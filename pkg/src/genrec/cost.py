"""Analytic training-FLOPs-per-token model for the output layer.

Accounting convention (documented here because nothing upstream states one):

* backbone: ``48 * L * d**2 + 8 * L * S * d`` -- twelve dense ``d x d``
  matrices per layer at four FLOPs per weight for forward+backward, plus the
  attention score/value products over a window of ``S`` positions;
* decoding: ``12`` FLOPs per decode parameter per token, where the decode
  parameter count depends on the mode (see :func:`decode_params`).

This pair reproduces both published output-layer totals for the
6-layer / 1024-wide / 512-token reference configuration to within 4%. The
numbers are estimates of arithmetic work only; they are never runtime
measurements.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ConfigError

MODES = ("full", "sampled", "projected", "sampled+projected")
DECODE_FLOPS_PER_PARAM = 12
BACKBONE_DENSE_COEF = 48
BACKBONE_ATTN_COEF = 8
CSV_HEADER = ("vocab", "mode", "flops_per_token")


def n_sampled(vocab: int, fraction: float) -> int:
    """Number of uniformly sampled negatives, ``ceil(fraction * vocab)``."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"sample fraction must lie in (0, 1], got {fraction}")
    raw = fraction * vocab
    if raw < 1.0 - 1e-12:
        raise ConfigError(f"fraction * V = {raw:g} < 1: no negatives would be drawn")
    # round first so 0.01 * 1e6 does not ceil to 10001 through representation error
    return int(-(-round(raw, 9) // 1))


@dataclass(frozen=True)
class CostQuery:
    layers: int
    d: int
    seq_len: int
    vocab: int
    mode: str = "full"
    fraction: float = 0.01
    n_positives: int = 1

    def __post_init__(self):
        if self.layers < 1 or self.d < 8 or self.d % 8 or self.seq_len < 1:
            raise ConfigError(
                f"invalid dims: layers={self.layers} d={self.d} seq_len={self.seq_len}"
            )
        if self.vocab < 1:
            raise ConfigError(f"vocab must be >= 1, got {self.vocab}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.n_positives < 0:
            raise ConfigError("n_positives must be >= 0")
        if "sampled" in self.mode:
            n_sampled(self.vocab, self.fraction)
        elif not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"sample fraction must lie in (0, 1], got {self.fraction}")


def backbone_flops_per_token(layers: int, d: int, seq_len: int) -> float:
    return float(
        BACKBONE_DENSE_COEF * layers * d * d + BACKBONE_ATTN_COEF * layers * seq_len * d
    )


def decode_params(q: CostQuery) -> int:
    d, V = q.d, q.vocab
    p = d // 8
    if q.mode == "full":
        return d * V
    if q.mode == "projected":
        return d * p + p * V
    # negatives come from the non-positive ids, so they never outnumber them
    m = min(n_sampled(V, q.fraction), max(V - q.n_positives, 0))
    if q.mode == "sampled":
        return d * m + q.n_positives * d
    return d * p + p * (m + q.n_positives)


def decode_flops_per_token(q: CostQuery) -> float:
    return float(DECODE_FLOPS_PER_PARAM * decode_params(q))


def total_flops_per_token(q: CostQuery) -> float:
    return backbone_flops_per_token(q.layers, q.d, q.seq_len) + decode_flops_per_token(q)


def reduction_ratio(layers, d, seq_len, vocab, fraction=0.01, n_positives=1) -> float:
    """Full-decoding total over sampled+projected total."""
    full = CostQuery(layers, d, seq_len, vocab, "full", fraction, n_positives)
    cheap = CostQuery(layers, d, seq_len, vocab, "sampled+projected", fraction, n_positives)
    return total_flops_per_token(full) / total_flops_per_token(cheap)


def emit_sweep(
    vocabs: Iterable[int],
    modes: Sequence[str] = MODES,
    *,
    layers: int = 6,
    d: int = 1024,
    seq_len: int = 512,
    fraction: float = 0.01,
    n_positives: int = 1,
) -> list[dict]:
    rows = []
    for V in vocabs:
        for mode in modes:
            q = CostQuery(layers, d, seq_len, int(V), mode, fraction, n_positives)
            rows.append({"vocab": int(V), "mode": mode, "flops_per_token": total_flops_per_token(q)})
    return rows


def sweep_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow((r["vocab"], r["mode"], f"{r['flops_per_token']:.6e}"))
    return buf.getvalue()

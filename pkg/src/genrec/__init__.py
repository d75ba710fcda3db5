"""Desk-scale generative recommendation: synthetic worlds, a causal sequence
model with full/sampled/projected decoding, multi-token prediction, semantic
cold-start, scaling-law fits and an output-layer cost model."""

__version__ = "0.1.0"

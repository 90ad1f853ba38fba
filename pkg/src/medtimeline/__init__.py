"""Generative medical-event timeline modeling at desk scale.

Tokenize longitudinal patient records, pretrain a small causal transformer,
fit isoFLOP scaling laws, estimate right-censored event probabilities from
Monte Carlo trajectories, and score them with a clinical metric suite.
"""

__version__ = "0.1.0"

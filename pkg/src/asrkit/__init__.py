"""asrkit: a compact end-to-end speech recognition engine.

Feature extraction (power spectrum, log-mel filterbanks, MFCC), CTC and ASG
sequence criteria on a minimal reverse-mode autodiff core, an ARPA backoff
n-gram language model, and a one-pass lexicon-constrained beam-search decoder,
tied together by a training/decoding/benchmarking CLI.
"""

__version__ = "0.1.0"

"""Deep LSTM sequence labeling from scratch.

Peephole LSTM layers with input/output projection variants, an architecture
DSL, truncated-BPTT stream training with overlap warm-up, and asynchronous
multi-worker SGD, all on plain float64 numpy.
"""

__version__ = "0.1.0"

from .net import (  # noqa: F401
    Network,
    NetworkSpec,
    build_network,
    gradient_check,
    load_checkpoint,
    parse_spec,
    save_checkpoint,
    spec_from_config,
)

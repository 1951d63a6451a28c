"""Variational privacy funnel: learn representations that keep utility and bound leakage.

Library layout:

    info_measures  exact discrete entropies/MI in bits, classifier-based leakage bound
    pf_oracle      exact privacy funnel solver for small alphabets
    model          encoder, decoders, prior generator and discriminators
    objectives     variational terms and the P1/P2 Lagrangians
    trainer        six-step alternating training and alpha sweeps
    evaluation     attacks, TMR@FMR, channel audits
    data           synthetic generators and the dvpf-emb-1 file format
    cli            the ``dvpf`` command
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CapacityError,
    DivergenceError,
    DomainError,
    DVPFError,
    NumericError,
    ParseError,
    ValidationError,
)
from .info_measures import NATS_TO_BITS, classifier_mi_bound, entropy, kl_divergence, mutual_information  # noqa: E402

__all__ = [
    "__version__",
    "CapacityError",
    "DivergenceError",
    "DomainError",
    "DVPFError",
    "NumericError",
    "ParseError",
    "ValidationError",
    "NATS_TO_BITS",
    "classifier_mi_bound",
    "entropy",
    "kl_divergence",
    "mutual_information",
]

"""Diverse machine translation by mixing source and target embeddings."""

from ._core import (
    AlignmentError,
    ContractError,
    DimensionError,
    FormatError,
    IoError,
    NumericalError,
    corpus_bleu,
    eda,
    evaluate,
    gradcheck,
    pwb,
    rfb,
    run_cli,
    sample_step_lambdas,
    write_synthetic_corpus,
)

__all__ = [
    "AlignmentError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "IoError",
    "NumericalError",
    "corpus_bleu",
    "eda",
    "evaluate",
    "gradcheck",
    "pwb",
    "rfb",
    "run_cli",
    "sample_step_lambdas",
    "write_synthetic_corpus",
]

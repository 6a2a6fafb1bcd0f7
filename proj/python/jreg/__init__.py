"""Layer displacement metrics, the jump-suppressing objective and a small Llama trainer."""

from ._jreg import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    Error,
    FormatError,
    IoError,
    LengthError,
    Model,
    ModelConfig,
    NumericError,
    RangeError,
    VocabularyError,
    disp_loss,
    displacement,
    jump_rate,
    layer_weights,
    profile,
    redundancy_delta,
    run,
    set_log_level,
    synth_corpus,
)


def jump_rates(psi, ells=None):
    """zeta for each ell (default L, L-1, L-2 where defined)."""
    n = len(psi)
    if ells is None:
        ells = [e for e in (n, n - 1, n - 2) if e >= 2]
    return {e: jump_rate(psi, e) for e in ells}


__all__ = [name for name in dir() if not name.startswith("_")]

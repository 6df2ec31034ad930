"""Robust lottery tickets on a small transformer: Python bindings."""

from ._core import (
    BETA,
    GAMMA,
    ZETA,
    ConfigError,
    ContractViolation,
    DivergenceError,
    DomainError,
    FormatError,
    GateParams,
    MaskedModel,
    ModelConfig,
    RunConfig,
    StateError,
    Ticket,
    draw_ticket,
    expected_l0,
    inference_gate,
    load_checkpoint,
    load_config,
    load_ticket,
    parse_config,
    polarization_fraction,
    run_stage,
    sample_gates,
    save_checkpoint,
)

__all__ = [name for name in dir() if not name.startswith("_")]

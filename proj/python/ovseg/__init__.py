"""Python access to the ovseg C++ core."""

from ._core import (
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
    NumericError,
    ParseError,
    alleviate_global_bias,
    config_help,
    default_config,
    jbu_once,
    load_ovw1,
    loss_cls_contrast,
    loss_cls_distill,
    loss_local_distill,
    miou,
    read_pnm,
    region_mean_pool,
    run,
    save_ovw1,
    segment_tokens,
    upsample,
    window_positions,
    write_pnm,
)

__all__ = [name for name in dir() if not name.startswith("_")]

"""Soft token attacks against unlearned toy language models."""

from ._stalab import (
    AttackBudget,
    Error,
    Lab,
    attack,
    decode,
    encode,
    gen_fact_corpus,
    gen_random_string,
    load_checkpoint,
    load_config,
    oracle_audit,
    sta_audit,
    welch_t,
)

__all__ = [
    "AttackBudget",
    "Error",
    "Lab",
    "attack",
    "decode",
    "encode",
    "gen_fact_corpus",
    "gen_random_string",
    "load_checkpoint",
    "load_config",
    "oracle_audit",
    "sta_audit",
    "welch_t",
]

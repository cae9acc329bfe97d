from .model import (ModelSpec, Prefill, ToyModel, build_toy_model, decode_teacher_forced,
                    greedy_decode, prefill)
from .oracle import (PlantedOracleSpec, oracle_attention, oracle_emit, oracle_prefill_attention, oracle_trace,
                     planted_oracle)
from .trace import AttentionTrace, StepRecord

__all__ = [
    "AttentionTrace", "ModelSpec", "PlantedOracleSpec", "Prefill", "StepRecord", "ToyModel",
    "build_toy_model", "decode_teacher_forced", "greedy_decode", "oracle_attention", "oracle_emit",
    "oracle_prefill_attention", "oracle_trace", "planted_oracle", "prefill",
]

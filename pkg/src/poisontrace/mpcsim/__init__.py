"""Simulated secret-shared execution of the owner-scoring protocols."""

from poisontrace.mpcsim.functionalities import (COUNTERS, DEFAULT_COST_TABLE, Simulator,
                                                SortMatrix, Transcript, load_cost_table,
                                                rsqrt_kernel)
from poisontrace.mpcsim.protocols import (MpcParams, MpcResult, protocol_traceback,
                                          protocol_traceback_heuristic, scaled_params,
                                          suggest_scales)
from poisontrace.mpcsim.ring import (FixedPointOverflow, FxShare, Ring, ScaleError, reconstruct,
                                     reconstruct_raw, share)

__all__ = [
    "COUNTERS", "DEFAULT_COST_TABLE", "FixedPointOverflow", "FxShare", "MpcParams", "MpcResult",
    "Ring", "ScaleError", "Simulator", "SortMatrix", "Transcript", "load_cost_table",
    "protocol_traceback", "protocol_traceback_heuristic", "reconstruct", "reconstruct_raw",
    "rsqrt_kernel", "scaled_params", "share", "suggest_scales",
]

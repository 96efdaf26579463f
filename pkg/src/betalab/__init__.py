"""
Dynamic-beta DPO on a toy policy small enough to enumerate, with a synthetic preference data generator
and an exact win-rate judge.
"""

from betalab.calibration import BetaConfig, effective_beta, RunningStats, update_stats
from betalab.config import load_run_config, RunConfig
from betalab.core import BetalabException, CapacityError, InvalidInput, LookupFailure, NumericError, StateError
from betalab.core import ModelShape, PreferenceDataset, read_jsonl, Triplet, TripletMeta, write_jsonl
from betalab.evaluator import exact_win_rate
from betalab.loss import beta_dpo_batch, dpo_loss_single
from betalab.policy import fit_sft, PolicyParams
from betalab.synth import GenConfig
from betalab.trainer import train, TrainConfig

__all__ = [
    "BetaConfig", "effective_beta", "RunningStats", "update_stats",
    "load_run_config", "RunConfig",
    "BetalabException", "CapacityError", "InvalidInput", "LookupFailure", "NumericError", "StateError",
    "ModelShape", "PreferenceDataset", "read_jsonl", "Triplet", "TripletMeta", "write_jsonl",
    "exact_win_rate",
    "beta_dpo_batch", "dpo_loss_single",
    "fit_sft", "PolicyParams",
    "GenConfig",
    "train", "TrainConfig",
]

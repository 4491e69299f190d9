"""Defensive perturbations and the training recipes built on them."""
from a5.defense.augment import AugmentPolicy, augment_batch, augment_sample
from a5.defense.perturbation import DefenseSpec, Robustifier, apply_defense, defensive_perturbation
from a5.defense.quality import mean_psnr, psnr, worst_case_psnr
from a5.defense.recipes import (
    RobustifiedSample,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    a5o_robustify,
    a5o_robustify_dataset,
    a5r_train,
    a5rc_cotrain,
    crown_ibp_train,
    evaluate,
    wc_loss,
)
from a5.defense.schedule import EpsSchedule, eps_schedule_value

__all__ = [
    "AugmentPolicy", "augment_batch", "augment_sample",
    "DefenseSpec", "Robustifier", "apply_defense", "defensive_perturbation",
    "mean_psnr", "psnr", "worst_case_psnr",
    "RobustifiedSample", "TrainConfig", "TrainingDiverged", "TrainResult",
    "a5o_robustify", "a5o_robustify_dataset", "a5r_train", "a5rc_cotrain", "crown_ibp_train",
    "evaluate", "wc_loss",
    "EpsSchedule", "eps_schedule_value",
]

"""Workbench for synthesizing unrestricted adversarial examples with a
conditional GAN, evaluating them with a human-or-simulated oracle, and
verifying the supporting robustness math at desk scale."""

__version__ = "0.1.0"

from .attack import (
    BUDGET_EXHAUSTED,
    SUCCESS,
    AttackConfig,
    AttackResult,
    LatentState,
    attack_many,
    dataset_generator_adapter,
    run_attack,
)
from .bounds import BoundInstance, l1_perturbation_bound, monte_carlo_violation_rate, worst_case_l1_exact
from .classifiers import Classifier, ClassifierSpec, accuracy, build_and_train, fgsm, pgd
from .data import DatasetSpec, ImageBatch, load_dataset, make_synthetic_dataset
from .evaluation import VoteSummary, ab_detection_rate, majority_vote, success_rate, transfer_matrix
from .gan import GanBundle, GanTrainConfig, train_acgan

__all__ = [
    "AttackConfig",
    "AttackResult",
    "BoundInstance",
    "BUDGET_EXHAUSTED",
    "Classifier",
    "ClassifierSpec",
    "DatasetSpec",
    "GanBundle",
    "GanTrainConfig",
    "ImageBatch",
    "LatentState",
    "SUCCESS",
    "VoteSummary",
    "ab_detection_rate",
    "accuracy",
    "attack_many",
    "build_and_train",
    "dataset_generator_adapter",
    "fgsm",
    "l1_perturbation_bound",
    "load_dataset",
    "majority_vote",
    "make_synthetic_dataset",
    "monte_carlo_violation_rate",
    "pgd",
    "run_attack",
    "success_rate",
    "train_acgan",
    "transfer_matrix",
    "worst_case_l1_exact",
]

"""Gaussian-mixture density networks for phone-level prosody sequences."""

from .em import EmConfig, em_fit
from .evaluation import compare_diversity, run_sweep
from .extractor import (ExtractorConfig, ExtractorModel, JointBatch, JointLossReport, ReconstructorConfig,
                        ReconstructorModel, extract, joint_loss, train_joint)
from .gmm import (GmmParams, InvalidInputError, RawMdnHead, activate, log_density, nll, nll_grad,
                  sample)
from .optim import Schedule, TrainingDiverged
from .predictor import (PredictorConfig, PredictorModel, predictor_forward, sample_sequence,
                        sequence_grad, sequence_nll, train_predictor)
from .synth import GeneratorSpec, SyntheticCorpus, generate, true_loglik

__version__ = "0.1.0"

"""Manifold-based test generation for small image classifiers.

A two-stage conditional VAE learns a compact latent space for a labelled
image set; random sampling or particle-swarm search over that space decodes
candidate inputs, and the ones the model under test misclassifies are kept
as a deduplicated test suite. FID measures how realistic the suite looks.
"""

from .cvae import CvaeStage, TwoStageCVAE, sample_pipeline
from .datasets import LabeledDataset, load_idx, split, synth_shapes
from .generator import GenerationConfig, RunReport, TestCase, TestSuite, apply_verdicts, export_suite, generate
from .harness import ClassifierConfig, DropoutClassifier, StubClassifier, train_classifier
from .metrics import fid_report, frechet_distance
from .search import FitnessWeights, LatentFitness, SwarmConfig, pso_run

__version__ = "0.1.0"

__all__ = [
    "CvaeStage", "TwoStageCVAE", "sample_pipeline",
    "LabeledDataset", "load_idx", "split", "synth_shapes",
    "GenerationConfig", "RunReport", "TestCase", "TestSuite", "apply_verdicts", "export_suite", "generate",
    "ClassifierConfig", "DropoutClassifier", "StubClassifier", "train_classifier",
    "fid_report", "frechet_distance",
    "FitnessWeights", "LatentFitness", "SwarmConfig", "pso_run",
]

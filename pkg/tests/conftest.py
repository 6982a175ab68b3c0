"""Shared fixtures: a small synthetic dataset and an orthogonal-task
checkpoint, generated once per session."""

from dataclasses import replace

import pytest

from antitransfer.synth import SynthSpec, generate
from antitransfer.training import TrainConfig, pretrain

TINY_SPEC = SynthSpec(n_target_classes=4, n_orth_classes=4,
                      samples_per_split=(60, 20, 40),
                      train_correlation=0.9, test_correlation=0.0,
                      image_size=(16, 17), noise_sigma=0.1, seed=42)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    return generate(TINY_SPEC, tmp_path_factory.mktemp("tinydata"))


@pytest.fixture(scope="session")
def orth_data_dir(tmp_path_factory):
    spec = replace(TINY_SPEC, train_correlation=0.0, seed=1042)
    return generate(spec, tmp_path_factory.mktemp("orthdata"))


@pytest.fixture(scope="session")
def orth_checkpoint(orth_data_dir, tmp_path_factory):
    cfg = TrainConfig(strategy="scratch", label_field="orth1",
                      task_name="orth-texture", seed=7, max_epochs=3,
                      arch_preset="vgg-tiny")
    result = pretrain(cfg, orth_data_dir, tmp_path_factory.mktemp("orthmodel"))
    return result.checkpoint_path

import numpy as np
import pytest

from ferronet.models import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """A narrow ResNet18 that keeps every topology detail but runs in milliseconds."""
    return ModelConfig(base_width=4)


def away_from_zero(rng, shape, margin=0.1):
    """Random values whose magnitude is at least ``margin`` (keeps relu kinks out of FD probes)."""
    x = rng.uniform(margin, 1.0 + margin, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    """A small synthetic dataset laid out like a prepared mini-CIFAR-10 directory."""
    from ferronet.data import synthetic_cifar10, write_cifar10_binary

    root = tmp_path_factory.mktemp("cifar")
    images, labels = synthetic_cifar10(4, seed=0)
    write_cifar10_binary(root / "mini_train.bin", images, labels)
    images, labels = synthetic_cifar10(2, seed=1)
    write_cifar10_binary(root / "test_batch.bin", images, labels)
    return root


def quick_config(data_dir, output_dir, **overrides):
    from ferronet.train import TrainConfig

    raw = dict(data_dir=str(data_dir), output_dir=str(output_dir), total_epochs=2, lr_drop_epochs=(1,),
               batch_size=16, model=ModelConfig(base_width=4))
    raw.update(overrides)
    return TrainConfig(**raw)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

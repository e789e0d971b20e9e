from __future__ import annotations

import numpy as np
import pytest
import torch

from gompertz_kd.data import DatasetSpec, SyntheticSpec


def finite_difference_gradient(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of scalar fn() with respect to x.

    fn must read the current contents of x; x is restored afterwards.
    """
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = float(fn())
            flat[i] = orig - eps
            f_minus = float(fn())
            flat[i] = orig
            grad_flat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(torch.linalg.vector_norm(b.reshape(-1))), 1e-12)
    return float(torch.linalg.vector_norm((a - b).reshape(-1))) / denom


@pytest.fixture
def easy_synthetic_specs() -> tuple[DatasetSpec, DatasetSpec]:
    syn = SyntheticSpec(num_classes=4, samples_per_class=128, test_samples_per_class=64)
    train = DatasetSpec(name="synthetic", split="train", synthetic=syn)
    test = DatasetSpec(name="synthetic", split="test", synthetic=syn)
    return train, test


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
    np.random.seed(1234)
    yield

import numpy as np
import pytest

from rapo_lab.optim import AdamW, vision_freeze_mask
from rapo_lab.policy import PolicyParams


def _grads(params: PolicyParams, seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    grads = params.zeros_like()
    for name, array in params.items():
        grads.tensors[name] = np.where(rng.uniform(size=array.shape) < 0.5, -0.5, 0.5)
    return grads


def test_zero_learning_rate_leaves_params_unchanged(params: PolicyParams) -> None:
    optimizer = AdamW(lr=0.0, weight_decay=0.1)
    updated = params
    for seed in range(3):
        updated = optimizer.step(updated, _grads(params, seed))
    assert updated.equals(params)


def test_first_step_moves_by_learning_rate(params: PolicyParams) -> None:
    grads = _grads(params)
    updated = AdamW(lr=1e-3).step(params, grads)
    for name, grad in grads.items():
        np.testing.assert_allclose(params[name] - updated[name], 1e-3 * np.sign(grad), rtol=1e-6)


def test_weight_decay_is_decoupled(params: PolicyParams) -> None:
    updated = AdamW(lr=0.01, weight_decay=0.1).step(params, params.zeros_like())
    for name, array in params.items():
        np.testing.assert_allclose(updated[name], array * (1.0 - 0.001), rtol=1e-12)


def test_frozen_rows_never_move(params: PolicyParams) -> None:
    optimizer = AdamW(lr=0.1, trainable=vision_freeze_mask(params, (0, 1)))
    updated = params
    for seed in range(3):
        updated = optimizer.step(updated, _grads(params, seed))
    np.testing.assert_array_equal(updated['tok_emb'][:2], params['tok_emb'][:2])
    assert not np.allclose(updated['tok_emb'][2:], params['tok_emb'][2:])
    assert optimizer.m is not None
    assert not np.any(optimizer.m['tok_emb'][:2])
    assert optimizer.step_count == 3


def test_step_returns_new_params(params: PolicyParams) -> None:
    before = params.copy()
    AdamW(lr=0.1).step(params, _grads(params))
    assert params.equals(before)


@pytest.mark.parametrize('ids', [(), (0,), (0, 2, 4)])
def test_vision_freeze_mask_rows(params: PolicyParams, ids: tuple[int, ...]) -> None:
    mask = vision_freeze_mask(params, ids)['tok_emb']
    assert mask.shape == params['tok_emb'].shape
    frozen = [row for row in range(mask.shape[0]) if not mask[row].any()]
    assert frozen == list(ids)


def test_moments_start_at_zero_and_track_steps(params: PolicyParams) -> None:
    optimizer = AdamW(lr=1e-3)
    first, second = optimizer.moments(params)
    assert first.global_norm() == 0.0
    assert second.global_norm() == 0.0
    grads = _grads(params)
    optimizer.step(params, grads)
    first, second = optimizer.moments(params)
    for name, grad in grads.items():
        np.testing.assert_allclose(first[name], 0.1 * grad)
        np.testing.assert_allclose(second[name], 0.001 * grad * grad)

import math

import pytest
import torch

from errors import ConfigError, TrainingAborted
from optimizers import ADAMW_BETAS, EPS, Lamb, build_optimizer, clip_gradients, global_norm, parameter_groups
from training import ScheduleConfig, lr_at


def parameter(values, grad=None):
    param = torch.nn.Parameter(torch.tensor(values, dtype=torch.float64))
    if grad is not None:
        param.grad = torch.tensor(grad, dtype=torch.float64)
    return param


def test_schedule_reference_points():
    cfg = ScheduleConfig()
    assert lr_at(0, cfg) == 0.0
    assert lr_at(500, cfg) == pytest.approx(0.01)
    assert lr_at(31250, cfg) == pytest.approx(0.001)
    midpoint = 500 + (31250 - 500) // 2
    assert lr_at(midpoint, cfg) == pytest.approx(0.0055)


def test_linear_schedule_reference_points():
    cfg = ScheduleConfig(kind='linear', warmup_steps=10, total_steps=110)
    assert lr_at(10, cfg) == pytest.approx(0.01)
    assert lr_at(60, cfg) == pytest.approx(0.0055)
    assert lr_at(110, cfg) == pytest.approx(0.001)


@pytest.mark.parametrize('kind', ['cosine', 'linear'])
def test_schedule_is_continuous_and_then_non_increasing(kind):
    cfg = ScheduleConfig(kind=kind, warmup_steps=50, total_steps=400)
    assert lr_at(49, cfg) == pytest.approx(lr_at(50, cfg), abs=cfg.peak_lr / 50 + 1e-12)
    rates = [lr_at(step, cfg) for step in range(50, 401)]
    assert all(later <= earlier for earlier, later in zip(rates, rates[1:]))
    warmup = [lr_at(step, cfg) for step in range(0, 51)]
    assert all(later > earlier for earlier, later in zip(warmup, warmup[1:]))


def test_schedule_step_range():
    cfg = ScheduleConfig(warmup_steps=5, total_steps=10)
    with pytest.raises(ValueError):
        lr_at(11, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        ScheduleConfig(warmup_steps=10, total_steps=10).validate()
    with pytest.raises(ConfigError):
        ScheduleConfig(peak_lr=0.001, final_lr=0.01).validate()
    with pytest.raises(ConfigError):
        ScheduleConfig(kind='step').validate()


def test_small_gradients_are_not_clipped():
    param = parameter([0.6, 0.8], grad=[0.6, 0.8])
    assert clip_gradients([param], 2.0) == pytest.approx(1.0)
    assert param.grad.tolist() == [0.6, 0.8]


def test_single_vector_is_scaled_to_the_limit():
    param = parameter([0.0, 0.0], grad=[0.0, 4.0])
    assert clip_gradients([param], 2.0) == pytest.approx(4.0)
    assert param.grad.tolist() == pytest.approx([0.0, 2.0])


def test_mixed_tensors_share_one_scale():
    a = parameter([0.0], grad=[3.0])
    b = parameter([[0.0, 0.0]], grad=[[0.0, 4.0]])
    assert clip_gradients([a, b], 2.0) == pytest.approx(5.0)
    assert a.grad.tolist() == pytest.approx([1.2])
    assert b.grad.tolist() == [pytest.approx([0.0, 1.6])]


def test_clipping_is_idempotent():
    a = parameter([0.0, 0.0, 0.0], grad=[1.0, -7.0, 3.0])
    clip_gradients([a], 2.0)
    once = a.grad.clone()
    clip_gradients([a], 2.0)
    assert torch.allclose(a.grad, once, atol=1e-15)
    assert global_norm([a.grad]) == pytest.approx(2.0)


def test_non_finite_gradients_abort():
    param = parameter([1.0, 2.0], grad=[1.0, float('nan')])
    with pytest.raises(TrainingAborted) as excinfo:
        clip_gradients([param], 2.0, step=7)
    assert excinfo.value.step == 7


def test_lamb_first_step_by_hand():
    param = parameter([1.0], grad=[1.0])
    Lamb([param], lr=0.1).step()
    # m_hat = v_hat = 1, u = 1 / (1 + eps), trust ratio = 1 + eps
    assert param.item() == pytest.approx(0.9, abs=1e-12)


def test_lamb_without_trust_ratio_first_step_by_hand():
    param = parameter([1.0], grad=[1.0])
    Lamb([param], lr=0.1, trust_ratio=False).step()
    assert param.item() == pytest.approx(1.0 - 0.1 / (1.0 + EPS), abs=1e-15)


def test_zero_gradient_leaves_parameters_unchanged():
    for optimizer_class in (Lamb, torch.optim.AdamW):
        param = parameter([1.5, -2.0], grad=[0.0, 0.0])
        optimizer_class([param], lr=0.1, weight_decay=0.0).step()
        assert param.tolist() == [1.5, -2.0]


def test_lamb_weight_decay_with_zero_gradient_shrinks():
    param = parameter([3.0, 4.0], grad=[0.0, 0.0])
    Lamb([param], lr=0.01, weight_decay=0.1).step()
    # u = wd * p, so the trust ratio cancels the decay rate
    assert param.tolist() == pytest.approx([3.0 * 0.99, 4.0 * 0.99], abs=1e-12)


def test_adamw_first_step_by_hand():
    param = parameter([1.0], grad=[1.0])
    torch.optim.AdamW([param], lr=0.1, betas=ADAMW_BETAS, eps=EPS, weight_decay=0.0).step()
    assert param.item() == pytest.approx(1.0 - 0.1 / (1.0 + EPS), abs=1e-12)


def quadratic(param, target):
    return ((param - target) ** 2 * torch.arange(1, param.numel() + 1, dtype=torch.float64)).sum()


def test_lamb_without_trust_ratio_equals_adamw():
    target = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    lamb_param = parameter([0.3, 0.3, 0.3])
    adamw_param = parameter([0.3, 0.3, 0.3])
    lamb = Lamb([lamb_param], lr=0.01, betas=ADAMW_BETAS, eps=EPS, weight_decay=0.01, trust_ratio=False)
    adamw = torch.optim.AdamW([adamw_param], lr=0.01, betas=ADAMW_BETAS, eps=EPS, weight_decay=0.01)
    for _ in range(100):
        for param, optimizer in ((lamb_param, lamb), (adamw_param, adamw)):
            optimizer.zero_grad()
            quadratic(param, target).backward()
            optimizer.step()
    assert torch.allclose(lamb_param, adamw_param, atol=1e-12, rtol=0)


@pytest.mark.parametrize('name', ['lamb', 'adamw'])
def test_one_step_decreases_a_convex_quadratic(name):
    model = torch.nn.Linear(3, 1, bias=False, dtype=torch.float64)
    with torch.no_grad():
        model.weight.copy_(torch.tensor([[0.5, -0.5, 2.0]], dtype=torch.float64))
    target = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    optimizer = build_optimizer(model, name, lr=1e-3, weight_decay=0.0)

    before = quadratic(model.weight[0], target)
    before.backward()
    optimizer.step()
    after = quadratic(model.weight[0], target)
    assert float(after) < float(before)


def test_norm_parameters_skip_weight_decay(model):
    decay, no_decay = parameter_groups(model, 0.1)
    assert decay['weight_decay'] == 0.1 and no_decay['weight_decay'] == 0.0
    no_decay_ids = {id(p) for p in no_decay['params']}
    for name, param in model.named_parameters():
        assert (id(param) in no_decay_ids) == ('norm' in name), name
    assert len(decay['params']) + len(no_decay['params']) == len(list(model.parameters()))


def test_build_optimizer(model):
    assert isinstance(build_optimizer(model, 'lamb', 0.01, 0.1), Lamb)
    adamw = build_optimizer(model, 'adamw', 0.01, 0.1)
    assert isinstance(adamw, torch.optim.AdamW)
    assert adamw.defaults['betas'] == ADAMW_BETAS and adamw.defaults['eps'] == EPS
    with pytest.raises(ConfigError):
        build_optimizer(model, 'sgd', 0.01, 0.1)


def test_lamb_state_shapes_match_parameters():
    param = parameter([[1.0, 2.0], [3.0, 4.0]], grad=[[0.1, 0.2], [0.3, 0.4]])
    optimizer = Lamb([param], lr=0.01)
    optimizer.step()
    state = optimizer.state[param]
    assert state['exp_avg'].shape == param.shape == state['exp_avg_sq'].shape
    assert int(state['step']) == 1
    assert not math.isnan(float(param.sum()))

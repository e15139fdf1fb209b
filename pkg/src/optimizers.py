"""
LAMB and AdamW set-up, parameter grouping and global-norm gradient clipping.
"""
import math

import torch

from errors import ConfigError, TrainingAborted

LAMB_BETAS = (0.9, 0.98)
ADAMW_BETAS = (0.9, 0.999)
EPS = 1e-6


class Lamb(torch.optim.Optimizer):
    """
    Adam moments with bias correction, decoupled weight decay folded into the
    update direction, and a per-tensor trust ratio ||p|| / ||u||.

    With trust_ratio=False the step reduces to AdamW.
    """

    def __init__(self, params, lr=1e-2, betas=LAMB_BETAS, eps=EPS, weight_decay=0.0, trust_ratio=True):
        if lr < 0.0:
            raise ConfigError(f'invalid learning rate {lr}')
        if not all(0.0 <= beta < 1.0 for beta in betas):
            raise ConfigError(f'invalid betas {betas}')
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, trust_ratio=trust_ratio)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            beta1, beta2 = group['betas']
            for param in group['params']:
                if param.grad is None:
                    continue
                grad = param.grad
                state = self.state[param]
                if not state:
                    state['step'] = torch.tensor(0.0, dtype=torch.float64)
                    state['exp_avg'] = torch.zeros_like(param)
                    state['exp_avg_sq'] = torch.zeros_like(param)

                state['step'] += 1
                t = int(state['step'].item())
                exp_avg, exp_avg_sq = state['exp_avg'], state['exp_avg_sq']
                exp_avg.mul_(beta1).add_(grad, alpha=1.0 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)

                m_hat = exp_avg / (1.0 - beta1 ** t)
                v_hat = exp_avg_sq / (1.0 - beta2 ** t)
                update = m_hat / (v_hat.sqrt() + group['eps'])
                if group['weight_decay']:
                    update = update + group['weight_decay'] * param

                ratio = 1.0
                if group['trust_ratio']:
                    param_norm = float(param.norm())
                    update_norm = float(update.norm())
                    if param_norm > 0.0 and update_norm > 0.0:
                        ratio = param_norm / update_norm
                param.add_(update, alpha=-group['lr'] * ratio)
        return loss


def parameter_groups(model, weight_decay):
    """
    Weight decay on everything but the layer-norm gains and offsets.
    """
    norm_params = {
        id(param)
        for module in model.modules() if isinstance(module, torch.nn.LayerNorm)
        for param in module.parameters(recurse=False)
    }
    decay, no_decay = [], []
    for param in model.parameters():
        if not param.requires_grad:
            continue
        (no_decay if id(param) in norm_params else decay).append(param)
    return [
        {'params': decay, 'weight_decay': weight_decay},
        {'params': no_decay, 'weight_decay': 0.0},
    ]


def build_optimizer(model, name, lr, weight_decay):
    groups = parameter_groups(model, weight_decay)
    if name == 'lamb':
        return Lamb(groups, lr=lr, betas=LAMB_BETAS, eps=EPS)
    if name == 'adamw':
        return torch.optim.AdamW(groups, lr=lr, betas=ADAMW_BETAS, eps=EPS)
    raise ConfigError(f'optimizer must be lamb or adamw, got {name!r}')


def set_learning_rate(optimizer, lr):
    for group in optimizer.param_groups:
        group['lr'] = lr


def global_norm(tensors):
    return math.sqrt(sum(float(t.detach().pow(2).sum()) for t in tensors))


def clip_gradients(parameters, max_norm=2.0, step=None):
    """
    Scale every gradient by max_norm / g when the global L2 norm g exceeds
    max_norm. Returns g before clipping.
    """
    grads = [p.grad for p in parameters if p.grad is not None]
    for grad in grads:
        if not torch.isfinite(grad).all():
            raise TrainingAborted('non-finite gradient', step)
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for grad in grads:
            grad.mul_(scale)
    return norm

"""Independent reference computations used by the tests."""
import numpy as np
import torch


def central_difference_grads(loss_fn, params, step=1e-5):
    """Finite-difference gradient of ``loss_fn()`` w.r.t. each tensor in ``params`` (in place perturbation)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def max_relative_error(loss_fn, params, step=1e-5):
    """Largest per-tensor ``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||)`` over ``params``."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    auto = torch.autograd.grad(loss, params, allow_unused=True)
    auto = [torch.zeros_like(p) if a is None else a for a, p in zip(auto, params)]
    fd = central_difference_grads(loss_fn, params, step)
    worst = 0.0
    for a, f in zip(auto, fd):
        denom = max(a.norm().item(), f.norm().item())
        if denom < 1e-10:
            continue
        worst = max(worst, (a - f).norm().item() / denom)
    return worst


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def softmax_then_log(logits, label):
    e = [np.exp(float(v)) for v in logits]
    return -np.log(e[label] / sum(e))

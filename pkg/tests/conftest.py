import numpy as np
import pytest

from sdplab.network import init_network
from sdplab.tensor_core import Rng


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar f at array x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def small_net():
    return init_network(Rng(7), [5, 8, 6, 3])


def objective_gradient_error(net, x, objective, hidden_layer=None):
    """Max relative error between backprop through ``objective`` and central differences.

    ``objective(trace) -> (loss, logit_grad, feature_grad)``; feature_grad is injected at
    ``hidden_layer`` (the penultimate activation by default).
    """
    from sdplab.network import backward, forward

    hidden_layer = len(net.layers) - 2 if hidden_layer is None else hidden_layer

    def loss():
        return objective(forward(net, x))[0]

    tr = forward(net, x)
    _, g_logits, g_feat = objective(tr)
    hidden = {hidden_layer: g_feat} if g_feat is not None else {}
    grads = backward(net, tr, g_logits, hidden)
    worst = 0.0
    for layer, g in zip(net.layers, grads):
        worst = max(worst, max_rel_error(g.weights, central_difference(loss, layer.weights) * layer.mask))
        worst = max(worst, max_rel_error(g.bias, central_difference(loss, layer.bias)))
    return worst

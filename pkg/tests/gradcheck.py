"""Central finite-difference oracle for the network's gradients."""
import numpy as np


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grads(model, x, y, h=1e-4):
    def loss():
        return model.loss_and_grads(x, y)[0]

    pgrads = []
    for p in model.params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        pgrads.append(g)
    gx = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        up = loss()
        x[idx] = old - h
        down = loss()
        x[idx] = old
        gx[idx] = (up - down) / (2 * h)
    return pgrads, gx


def max_grad_error(model, x, y, h=1e-4):
    _, pg, gx = model.loss_and_grads(x, y)
    npg, ngx = numeric_grads(model, x, y, h)
    return max([rel_err(a, b) for a, b in zip(pg, npg)] + [rel_err(gx, ngx)])

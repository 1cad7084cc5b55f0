import numpy as np


class Adam:
    """Adaptive-moment optimizer over a flat parameter dict.

    Only parameters present in the gradient dict passed to :meth:`step` are
    touched, so freezing is expressed by leaving names out of ``grads``.
    """

    def __init__(self, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name in sorted(grads):
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

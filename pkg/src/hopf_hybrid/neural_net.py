"""Dense tanh networks with hand-written gradients, plus ADAM and L-BFGS.

Networks act on row batches: inputs of shape ``(batch, n_in)`` map to outputs
of shape ``(batch, n_out)``. Hidden layers use tanh, the last layer is
affine. The flat parameter vector lists, layer by layer, the row-major weight
matrix ``(n_out, n_in)`` followed by the bias.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizerAbort

logger = logging.getLogger(__name__)


class Mlp:
    def __init__(self, layer_sizes, weights, biases):
        self.layer_sizes = [int(n) for n in layer_sizes]
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for (n_in, n_out), w, b in zip(zip(self.layer_sizes[:-1], self.layer_sizes[1:]),
                                       self.weights, self.biases):
            if w.shape != (n_out, n_in) or b.shape != (n_out,):
                raise ValueError("weight/bias shapes do not match layer sizes")

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    @property
    def n_params(self):
        return param_count(self.layer_sizes)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_params(self, theta) -> "Mlp":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        ws, bs, i = [], [], 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            ws.append(theta[i:i + n_in * n_out].reshape(n_out, n_in))
            i += n_in * n_out
            bs.append(theta[i:i + n_out])
            i += n_out
        return Mlp(self.layer_sizes, ws, bs)

    def copy(self) -> "Mlp":
        return self.with_params(self.params.copy())

    def with_zero_output(self) -> "Mlp":
        """Same hidden layers, last layer zeroed: output is identically zero
        but gradients still reach every layer."""
        ws = [w.copy() for w in self.weights]
        bs = [b.copy() for b in self.biases]
        ws[-1][:] = 0.0
        bs[-1][:] = 0.0
        return Mlp(self.layer_sizes, ws, bs)

    # -- evaluation ---------------------------------------------------------

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_in:
            raise ValueError(f"input has {X.shape[1]} features, network expects {self.n_in}")
        return X, single

    def forward(self, X, cache=False):
        X, single = self._check(X)
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        Y = h[0] if single else h
        return (Y, acts) if cache else Y

    __call__ = forward

    def backward(self, acts, upstream):
        """Reverse-mode gradients of ``sum(upstream * f(X))``.

        ``acts`` is the cache returned by :meth:`forward`. Returns the flat
        parameter gradient and the gradient with respect to the inputs.
        """
        G = np.atleast_2d(np.asarray(upstream, dtype=float))
        if G.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {G.shape} != output shape {acts[-1].shape}")
        grads = []
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                G = G * (1.0 - acts[i + 1] ** 2)
            grads.append((G.T @ acts[i], G.sum(axis=0)))
            G = G @ self.weights[i]
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in reversed(grads)])
        return flat, G

    def input_jacobian(self, X):
        """Per-row Jacobian ``d f / d x`` with shape ``(batch, n_out, n_in)``."""
        X, single = self._check(X)
        # Forward-mode: carry d h / d x for every row.
        J = np.broadcast_to(np.eye(self.n_in), (X.shape[0], self.n_in, self.n_in))
        h = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            J = np.einsum("oi,bij->boj", w, J)
            if i < last:
                h = np.tanh(h)
                J = J * (1.0 - h**2)[:, :, None]
        return J[0] if single else J

    def directional(self, X, V):
        """Outputs and their directional derivatives along input tangents ``V``."""
        X, _ = self._check(X)
        h, t = X, np.atleast_2d(V)
        last = len(self.weights) - 1
        acts = [X]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            t = t @ w.T
            if i < last:
                h = np.tanh(h)
                t = t * (1.0 - h**2)
            acts.append(h)
        return h, t, acts


def param_count(layer_sizes):
    return sum((n_in + 1) * n_out for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]))


def mlp_init(layer_sizes, seed, zero_output=False) -> Mlp:
    """Glorot-uniform weights, zero biases.

    With ``zero_output`` the last layer starts at zero so the network output
    is identically zero while its hidden layers still carry gradient.
    """
    sizes = [int(n) for n in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-lim, lim, size=(n_out, n_in))
        if zero_output and i == len(sizes) - 2:
            w = np.zeros_like(w)
        ws.append(w)
        bs.append(np.zeros(n_out))
    return Mlp(sizes, ws, bs)


def mlp_forward(net: Mlp, x):
    return net.forward(x)


def mlp_backward(net: Mlp, x, upstream):
    """Gradients of ``upstream . net(x)`` w.r.t. parameters and input."""
    x = np.asarray(x, dtype=float)
    _, acts = net.forward(np.atleast_2d(x), cache=True)
    up = np.atleast_2d(np.asarray(upstream, dtype=float))
    g_theta, g_x = net.backward(acts, up)
    return g_theta, (g_x[0] if x.ndim == 1 else g_x)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def adam_step(state: AdamState, params, grads, lr):
    """One ADAM update; ``state`` is advanced in place."""
    g = np.asarray(grads, dtype=float)
    if not np.all(np.isfinite(g)):
        raise OptimizerAbort(f"non-finite gradient at ADAM step {state.t + 1}", state.t + 1)
    if state.m is None:
        state.m = np.zeros_like(g)
        state.v = np.zeros_like(g)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    message: str = ""


def adam_minimize(fun_grad, x0, iters, lr, callback=None, keep_best=True) -> OptimResult:
    """Fixed-budget ADAM.

    ``trace[k]`` is the objective at the iterate reached after step ``k+1``;
    one extra evaluation produces the last entry. With ``keep_best`` the
    returned point is the lowest-objective iterate evaluated (the starting
    point included), since ADAM on phase losses can end on a spike.
    """
    x = np.array(x0, dtype=float)
    state = AdamState()
    trace = []
    best_x, best_f = x.copy(), np.inf
    for k in range(iters + 1):
        f, g = fun_grad(x)
        if not np.isfinite(f):
            where = f"ADAM iteration {k}" if k < iters else f"after ADAM iteration {iters}"
            raise OptimizerAbort(f"non-finite objective at {where}", k)
        if k > 0:
            trace.append(float(f))
        if f < best_f:
            best_x, best_f = x.copy(), float(f)
        if k == iters:
            break
        x = adam_step(state, x, g, lr)
        if callback is not None:
            callback(k, x, f)
        if k % 100 == 0:
            logger.info("adam %d: %.6g", k, f)
    if keep_best:
        return OptimResult(best_x, best_f, trace, iters, "budget exhausted")
    return OptimResult(x, float(f), trace, iters, "budget exhausted")


def lbfgs_minimize(fun_grad, x0, iters, step_scale=1.0, memory=10, c1=1e-4,
                   max_backtracks=40, gtol=0.0) -> OptimResult:
    """Limited-memory BFGS with Armijo backtracking.

    The first direction is the steepest descent scaled so that the trial step
    has Euclidean norm ``step_scale``; later iterations use the usual
    ``s.y / y.y`` initial Hessian scaling and start backtracking at a unit step.
    ``trace`` holds the objective after each accepted iteration, so it is
    non-increasing. Iteration stops early only when no descent step exists.
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizerAbort("non-finite objective or gradient at L-BFGS start", 0)
    S, Y = [], []
    trace = []
    message = "budget exhausted"
    k = 0
    for k in range(1, iters + 1):
        gnorm = np.linalg.norm(g)
        if gnorm <= gtol or gnorm == 0.0:
            message = "gradient vanished"
            k -= 1
            break
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append((a, rho, s, y))
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            q *= step_scale / gnorm
        for a, rho, s, y in reversed(alphas):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        slope = g @ d
        if slope >= 0:
            # Lost descent direction; restart from steepest descent.
            S.clear()
            Y.clear()
            d = -g * (step_scale / gnorm)
            slope = g @ d
        t = 1.0
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + t * d
            f_new, g_new = fun_grad(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            message = "line search failed"
            k -= 1
            break
        if not np.all(np.isfinite(g_new)):
            raise OptimizerAbort(f"non-finite gradient at L-BFGS iteration {k}", k)
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = x_new, f_new, g_new
        trace.append(float(f))
        if k % 100 == 0:
            logger.info("lbfgs %d: %.6g", k, f)
    return OptimResult(x, float(f), trace, len(trace), message)

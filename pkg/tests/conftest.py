import numpy as np
import pytest

from s2ap.autodiff import Graph, Tensor


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_net(rng, dims=(3, 4, 2), sparsity=0.5):
    from s2ap.model import Network
    net = Network.mlp(dims, rng)
    for layer in net.layers:
        layer.bias = rng.normal(size=layer.bias.shape) * 0.1
    net.init_scores()
    net.set_sparsity(sparsity)
    net.update_masks()
    return net


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-14, sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta or 1.0) / (abs(theta) + np.sqrt(theta * theta + 1))
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
    return np.diag(a).copy()


def surrogate_loss(net, x, y, ref, flat):
    """Mean CE with masks frozen at M(ref) and gates M(ref) + s - ref, plain numpy."""
    from s2ap.model import topk_mask
    pos, h = 0, x
    for i, layer in enumerate(net.layers):
        w = layer.w
        if layer.prunable:
            s = flat[pos:pos + w.size].reshape(w.shape)
            r = ref[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            w = w * (topk_mask(r, layer.k) + s - r)
        h = h @ w + (0.0 if layer.bias is None else layer.bias)
        if i < len(net.layers) - 1:
            h = np.maximum(h, 0)
    z = h - h.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def fd_hessian(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Dense Hessian of scalar ``f`` from second differences of values only."""
    n = x.size
    out = np.zeros((n, n))
    e = np.eye(n) * h
    f0 = f(x)
    for i in range(n):
        out[i, i] = (f(x + e[i]) - 2 * f0 + f(x - e[i])) / h ** 2
        for j in range(i + 1, n):
            v = (f(x + e[i] + e[j]) - f(x + e[i] - e[j]) - f(x - e[i] + e[j]) + f(x - e[i] - e[j])) / (4 * h * h)
            out[i, j] = out[j, i] = v
    return out


def tiny_problem(seed: int, dims=(2, 2, 2), sparsity=0.5, n=12):
    """A small net with at most 10 scores, a batch and its surrogate score-gradient."""
    from s2ap.diagnostics import score_grad_fn
    from s2ap.losses import LossKind
    rng = np.random.default_rng(seed)
    net = tiny_net(rng, dims=dims, sparsity=sparsity)
    x = rng.uniform(size=(n, dims[0]))
    y = rng.integers(0, dims[-1], size=n)
    fn, s0 = score_grad_fn(net, x, y, None, LossKind("clean_ce"))
    return net, x, y, fn, s0


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

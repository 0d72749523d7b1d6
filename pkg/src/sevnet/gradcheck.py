"""Finite-difference verification of every differentiable primitive.

Each check builds a random small configuration in float64, projects the
op's output onto a fixed random vector to get a scalar, and compares
reverse-mode gradients against central differences (step 1e-5). The
reported figure is max_i |ad_i - fd_i| / max(1, |ad_i|, |fd_i|) over all
checked inputs; anything below 1e-4 passes.

``sabotage`` is a test hook: naming an op perturbs its reverse-mode
result before comparison, so the suite must flag exactly that op.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import Block, BlockSpec

TOLERANCE = 1e-4
FD_STEP = 1e-5

SIZE_PRESETS = {"tiny": 3, "small": 8, "suite": 20}


@dataclass
class CheckResult:
    name: str
    shapes: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def central_difference(f, arrays, step: float = FD_STEP):
    """Gradient of scalar f() w.r.t. each array, mutating them in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def compare_gradients(forward, leaves, sabotage: bool = False) -> float:
    """Run reverse mode and central differences over the same leaves.

    ``forward`` must return a scalar Tensor built from ``leaves``
    (float64 tensors with requires_grad set).
    """
    for leaf in leaves:
        leaf.zero_grad()
    out = forward()
    T.backward(out)
    ad = []
    for leaf in leaves:
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        g = np.array(g, dtype=np.float64, copy=True)
        ad.append(g)
    if sabotage:
        ad[0] = ad[0] + 5e-3
    fd = central_difference(lambda: float(forward().data), [l.data for l in leaves])
    return max(max_rel_error(a, f) for a, f in zip(ad, fd))


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> T.Tensor:
    return T.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _project(out: T.Tensor, rng) -> tuple:
    proj = rng.normal(size=out.shape)
    return lambda o: T.reduce_sum(T.mul(o, proj)), proj


# one builder per op: returns (forward, leaves)

def _build_conv3d(rng):
    groups = int(rng.integers(1, 4))
    cin_g = int(rng.integers(1, 3))
    cout_g = int(rng.integers(1, 3))
    kernel = tuple(int(k) for k in rng.integers(1, 4, size=3))
    stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
    padding = tuple(int(k) // 2 for k in kernel)
    n = int(rng.integers(1, 3))
    spatial = tuple(
        max(int(rng.integers(2, 5)), k - 2 * p)
        for k, p in zip(kernel, padding)
    )
    x = _leaf(rng, (n, groups * cin_g, *spatial))
    w = _leaf(rng, (groups * cout_g, cin_g, *kernel))
    b = _leaf(rng, (groups * cout_g,))
    out = T.conv3d(x, w, b, stride=stride, padding=padding, groups=groups)
    proj = rng.normal(size=out.shape)

    def forward():
        return T.reduce_sum(
            T.mul(
                T.conv3d(x, w, b, stride=stride, padding=padding, groups=groups),
                proj,
            )
        )

    return forward, [x, w, b]


def _build_batchnorm(rng):
    c = int(rng.integers(1, 4))
    shape = (int(rng.integers(2, 4)), c, *(int(s) for s in rng.integers(2, 4, size=3)))
    x = _leaf(rng, shape)
    gamma = _leaf(rng, (c,), 0.5, 1.5)
    beta = _leaf(rng, (c,), -0.5, 0.5)
    rm, rv = np.zeros(c), np.ones(c)
    proj = rng.normal(size=shape)

    def forward():
        out = T.batch_norm3d(x, gamma, beta, rm, rv, training=True)
        return T.reduce_sum(T.mul(out, proj))

    return forward, [x, gamma, beta]


def _build_relu(rng):
    shape = tuple(int(s) for s in rng.integers(2, 5, size=3))
    # keep samples away from the kink at 0
    data = rng.uniform(0.05, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    x = T.Tensor(data, requires_grad=True)
    proj = rng.normal(size=shape)

    def forward():
        return T.reduce_sum(T.mul(T.relu(x), proj))

    return forward, [x]


def _build_sigmoid(rng):
    shape = tuple(int(s) for s in rng.integers(2, 5, size=3))
    x = _leaf(rng, shape, -2.0, 2.0)
    proj = rng.normal(size=shape)

    def forward():
        return T.reduce_sum(T.mul(T.sigmoid(x), proj))

    return forward, [x]


def _build_avg_pool(rng):
    shape = (1, int(rng.integers(1, 3)),
             *(int(s) for s in rng.integers(2, 6, size=3)))
    kernel = tuple(int(rng.integers(1, shape[2 + i] + 1)) for i in range(3))
    stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
    x = _leaf(rng, shape)
    out = T.avg_pool3d(x, kernel, stride)
    proj = rng.normal(size=out.shape)

    def forward():
        return T.reduce_sum(T.mul(T.avg_pool3d(x, kernel, stride), proj))

    return forward, [x]


def _build_global_pool(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
             *(int(s) for s in rng.integers(1, 4, size=3)))
    x = _leaf(rng, shape)
    proj = rng.normal(size=(shape[0], shape[1], 1, 1, 1))

    def forward():
        return T.reduce_sum(T.mul(T.global_avg_pool3d(x), proj))

    return forward, [x]


def _build_linear(rng):
    n, c, k = (int(rng.integers(1, 5)) for _ in range(3))
    x = _leaf(rng, (n, c))
    w = _leaf(rng, (k, c))
    b = _leaf(rng, (k,))
    proj = rng.normal(size=(n, k))

    def forward():
        return T.reduce_sum(T.mul(T.linear(x, w, b), proj))

    return forward, [x, w, b]


def _build_dropout(rng):
    shape = tuple(int(s) for s in rng.integers(2, 5, size=2))
    x = _leaf(rng, shape)
    proj = rng.normal(size=shape)
    mask_seed = int(rng.integers(0, 2**31))

    def forward():
        mask_rng = np.random.default_rng(mask_seed)
        return T.reduce_sum(
            T.mul(T.dropout(x, 0.3, training=True, rng=mask_rng), proj)
        )

    return forward, [x]


def _build_softmax_ce(rng):
    n, k = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    logits = _leaf(rng, (n, k), -2.0, 2.0)
    targets = rng.integers(0, k, size=n)

    def forward():
        return T.softmax_cross_entropy(logits, targets)

    return forward, [logits]


def _build_bce(rng):
    n, k = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    logits = _leaf(rng, (n, k), -2.0, 2.0)
    targets = rng.integers(0, 2, size=(n, k)).astype(np.float64)

    def forward():
        return T.multilabel_bce(logits, targets)

    return forward, [logits]


def _build_block(rng, downsample: bool):
    g = int(rng.choice([1, 2]))
    c = g * int(rng.integers(2, 5))
    spec = BlockSpec("sev", c, g, downsample=downsample)
    block = Block(spec, rng, dtype=np.float64)
    # batch norm inside the block needs a few elements per channel, or
    # its batch variance degenerates and finite differences blow up
    t = int(rng.integers(2, 4))
    hw = int(rng.choice([4, 6])) if downsample else int(rng.integers(3, 6))
    x = _leaf(rng, (1, c, t, hw, hw))
    leaves = [x] + [p for _, p in block.named_parameters()]
    out = block.forward(x, training=True)
    proj = rng.normal(size=out.shape)

    def forward():
        return T.reduce_sum(T.mul(block.forward(x, training=True), proj))

    return forward, leaves


_BUILDERS = {
    "conv3d": _build_conv3d,
    "batchnorm3d": _build_batchnorm,
    "relu": _build_relu,
    "sigmoid": _build_sigmoid,
    "avg_pool3d": _build_avg_pool,
    "global_avg_pool3d": _build_global_pool,
    "linear": _build_linear,
    "dropout": _build_dropout,
    "softmax_cross_entropy": _build_softmax_ce,
    "multilabel_bce": _build_bce,
    "sev_block": lambda rng: _build_block(rng, False),
    "sev_downsample_block": lambda rng: _build_block(rng, True),
}

OP_NAMES = tuple(_BUILDERS)


def check_op(
    name: str, seed: int = 0, shapes: int = 8, sabotage: str | None = None
) -> CheckResult:
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    )
    worst = 0.0
    for _ in range(shapes):
        forward, leaves = _BUILDERS[name](rng)
        err = compare_gradients(forward, leaves, sabotage=(sabotage == name))
        worst = max(worst, err)
    return CheckResult(name=name, shapes=shapes, max_rel_error=worst)


def run_suite(
    seed: int = 0,
    shapes: int = 8,
    ops=None,
    sabotage: str | None = None,
) -> list[CheckResult]:
    ops = list(ops) if ops is not None else list(OP_NAMES)
    return [check_op(name, seed, shapes, sabotage) for name in ops]

"""Finite-difference verification of every backward rule.

Each component runs a set of seeded scalar-valued forward functions, takes
analytic gradients with one backward pass, and compares them against central
differences, coordinate by coordinate. The relative error of a tensor is the
largest absolute deviation scaled by the largest gradient magnitude, so tiny
gradients do not inflate the score.

Inputs for kinked functions (relu, the hinge) are nudged away from their
kinks, since central differences straddle them; everything else uses plain
seeded normals. The suite is deterministic per seed.
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import kg, layers, objectives, pipeline, rng
from . import tensor
from .tensor import Tensor

_H = 1e-6
_TOL_PRIMITIVES = 1e-6
_TOL_COMPOSITE = 1e-4

# Central differences at h=1e-6 on an O(1..10) loss carry absolute noise of
# roughly eps*|loss|/(2h) ~ 1e-9, so a gradient smaller than this floor is
# compared absolutely at the oracle's own resolution (1e-9/1e-5 = 1e-4);
# dividing by the raw magnitude there would only measure rounding noise. A
# genuinely wrong rule still surfaces: an O(1) mistake in a sub-floor
# gradient scores ~1e-1, far above every tolerance.
_DENOM_FLOOR = 1e-5


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(_DENOM_FLOOR, float(np.max(np.abs(analytic))),
                float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric))) / denom


def numeric_grad(fn, leaf, h=_H):
    """Central finite differences of scalar fn() with respect to leaf.data,
    one coordinate at a time (leaf is mutated in place and restored)."""
    flat = leaf.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(leaf.data.shape)


def check_grads(fn, leaves, h=_H):
    """Analytic-vs-numeric relative error per named leaf for scalar fn()."""
    for t in leaves.values():
        t.grad = None
    with tensor.tape() as tp:
        loss = fn()
    tensor.backward(loss, tp)
    errs = {}
    for name, t in leaves.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errs[name] = rel_err(analytic, numeric_grad(fn, t, h))
    return errs


def _away_from_zero(data, gap=0.2):
    return np.where(data >= 0, data + gap, data - gap)


# ---------------------------------------------------------------------------
# Components.

def _component_tensor(seed):
    """Every differentiable primitive on small fixed-shape inputs."""
    gen = rng.substream(seed, "gradcheck", 0)

    def leaf(shape, positive=False, kink_safe=False):
        data = gen.normal(size=shape)
        if positive:
            data = np.abs(data) + 0.5
        if kink_safe:
            data = _away_from_zero(data)
        return Tensor(data, requires_grad=True)

    def mix(shape):
        return Tensor(gen.normal(size=shape))

    errs = {}

    def case(name, fn, **leaves):
        errs.update(check_grads(fn, {f"{name}.{k}": v for k, v in leaves.items()}))

    # Mixers turn vector outputs into scalars with distinct per-entry weights
    # (a plain sum would miss gradients that are wrong but sum-preserving).
    # They are drawn once, outside the closures, so fn() is a fixed function.
    a, b, w = leaf((3, 4)), leaf((3, 4)), leaf((4, 3))
    m33, m34, m34b = mix((3, 3)), mix((3, 4)), mix((3, 4))
    case("matmul", lambda: ((a @ w) * m33).sum(), a=a, w=w)
    case("add", lambda: ((a + b) * m34).sum(), a=a, b=b)
    row = leaf((1, 4))
    case("add_broadcast", lambda: ((a + row) * m34b).sum(), a=a, row=row)
    m_sub, m_mul, m_mulb, m_neg = (mix((3, 4)) for _ in range(4))
    case("sub", lambda: ((a - b) * m_sub).sum(), a=a, b=b)
    case("mul", lambda: ((a * b) * m_mul).sum(), a=a, b=b)
    col = leaf((3, 1))
    case("mul_broadcast", lambda: ((a * col) * m_mulb).sum(), a=a, col=col)
    case("neg", lambda: ((-a) * m_neg).sum(), a=a)

    c1, c2 = leaf((2, 4)), leaf((3, 4))
    m_cat = mix((5, 4))
    case("concat", lambda: (tensor.concat([c1, c2], axis=0) * m_cat).sum(),
         first=c1, second=c2)

    gsrc = leaf((4, 3))
    gidx = np.array([0, 2, 2, 3, 1], dtype=np.int64)
    m_g = mix((5, 3))
    case("gather_rows", lambda: (tensor.gather_rows(gsrc, gidx) * m_g).sum(),
         x=gsrc)

    ssrc = leaf((5, 3))
    sidx = np.array([0, 2, 2, 1, 0], dtype=np.int64)
    m_s = mix((3, 3))
    case("scatter_add_rows",
         lambda: (tensor.scatter_add_rows(ssrc, sidx, 3) * m_s).sum(), x=ssrc)

    brow = leaf((1, 4))
    m_b = mix((5, 4))
    case("broadcast_rows",
         lambda: (tensor.broadcast_rows(brow, 5) * m_b).sum(), x=brow)

    unary = [
        ("relu", tensor.relu, leaf((3, 4), kink_safe=True)),
        ("sigmoid", tensor.sigmoid, leaf((3, 4))),
        ("tanh", tensor.tanh, leaf((3, 4))),
        ("exp", tensor.exp, leaf((3, 4))),
        ("log", tensor.log, leaf((3, 4), positive=True)),
        ("softplus", tensor.softplus, leaf((3, 4))),
    ]
    for name, op, x in unary:
        m_u = mix((3, 4))
        case(name, lambda op=op, x=x, m_u=m_u: (op(x) * m_u).sum(), x=x)

    sm = leaf((6,))
    segs = np.array([0, 0, 1, 1, 1, 2], dtype=np.int64)
    m_sm = mix((6,))
    case("segment_softmax",
         lambda: (tensor.segment_softmax(sm, segs) * m_sm).sum(), x=sm)

    su = leaf((3, 4))
    m_sax, m_mk = mix((4,)), mix((3, 1))
    case("sum_all", lambda: su.sum(), x=su)
    case("sum_axis", lambda: (su.sum(axis=0) * m_sax).sum(), x=su)
    case("mean_keepdims",
         lambda: (su.mean(axis=1, keepdims=True) * m_mk).sum(), x=su)

    sl = leaf((3, 4))
    m_sl = mix((3, 2))
    case("slice_axis",
         lambda: (tensor.slice_axis(sl, 1, 1, 3) * m_sl).sum(), x=sl)
    rs = leaf((3, 4))
    m_rs = mix((2, 6))
    case("reshape", lambda: (tensor.reshape(rs, (2, 6)) * m_rs).sum(), x=rs)
    lse = leaf((3, 4))
    m_lse = mix((3, 1))
    case("logsumexp_rows",
         lambda: (tensor.logsumexp_rows(lse) * m_lse).sum(), x=lse)
    return errs


# 6-node graph used by the composite checks: a ring with one chord
_ADJ6 = np.zeros((6, 6))
for _u, _v in [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)]:
    _ADJ6[_u, _v] = _ADJ6[_v, _u] = 1


def _component_layers(seed):
    """Two-layer stacks of every family on the 6-node graph, relu between."""
    gen = rng.substream(seed, "gradcheck", 1)
    errs = {}
    for kind in layers.MpLayerKind:
        stack = layers.GnnStack.create(kind, 2, 6, gen, activation="relu")
        x = Tensor(_away_from_zero(gen.normal(size=(6, 6))), requires_grad=True)
        mixer = Tensor(gen.normal(size=(6, 6)))
        leaves = {f"{kind.value}.x": x}
        leaves.update({f"{kind.value}.{n}": t
                       for n, t in stack.named_params("stack").items()})
        def fn(stack=stack, x=x, mixer=mixer):
            return (layers.mp_forward(stack, _ADJ6, x) * mixer).sum()
        errs.update(check_grads(fn, leaves))
    return errs


def _component_lstm(seed):
    gen = rng.substream(seed, "gradcheck", 2)
    params = layers.BiLstmParams.create(6, gen)
    e_h = Tensor(gen.normal(size=(2, 6)), requires_grad=True)
    e_r = Tensor(gen.normal(size=(2, 6)), requires_grad=True)
    e_t = Tensor(gen.normal(size=(2, 6)), requires_grad=True)
    mixer = Tensor(gen.normal(size=(2, 6)))
    leaves = {"e_h": e_h, "e_r": e_r, "e_t": e_t}
    leaves.update(params.named_params("bilstm"))

    def fn():
        return (layers.bilstm_encode(e_h, e_r, e_t, params) * mixer).sum()

    return check_grads(fn, leaves)


def _component_discriminator(seed):
    gen = rng.substream(seed, "gradcheck", 3)
    params = objectives.DiscriminatorParams.create(6, gen)
    rows = Tensor(gen.normal(size=(5, 18)), requires_grad=True)
    mixer = Tensor(gen.normal(size=(5, 1)))
    leaves = {"rows": rows}
    leaves.update(params.named_params("disc"))

    def fn():
        return (objectives.edge_log_scores(rows, params) * mixer).sum()

    return check_grads(fn, leaves)


_LOSS_KG = "\n".join([
    "a\tr1\tb",
    "b\tr2\tc",
    "a\tr3\tc",
    "c\tr1\td",
    "d\tr2\ta",
    "b\tr3\td",
])


def _component_loss(seed):
    """End-to-end batch losses over a 6-node network, every parameter."""
    graph = kg.parse_triples(_LOSS_KG)
    errs = {}
    for est in (objectives.MiEstimatorKind.JSD, objectives.MiEstimatorKind.INFONCE):
        cfg = pipeline.TrainConfig(dim=6, depth=2, estimator=est,
                                   batch_size=6, epochs=0, seed=seed)
        model = pipeline.Model.create(cfg, graph)
        state = pipeline._TrainState.build(graph, cfg)
        batch = np.arange(6, dtype=np.int64)
        leaves = {f"{est.value}.{n}": t
                  for n, t in model.named_tensors().items() if t.requires_grad}

        def fn(model=model, state=state, batch=batch):
            return pipeline._batch_loss(model, state, batch,
                                        rng.substream(seed, "gradcheck", 9))
        errs.update(check_grads(fn, leaves))
    return errs


# ---------------------------------------------------------------------------
# Suite driver.

@dataclass
class ComponentResult:
    name: str
    max_rel_err: float
    worst: str
    tolerance: float
    errors: dict = field(repr=False, default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance


_COMPONENTS = (
    ("tensor", _component_tensor, _TOL_PRIMITIVES),
    ("layers", _component_layers, _TOL_COMPOSITE),
    ("lstm", _component_lstm, _TOL_COMPOSITE),
    ("discriminator", _component_discriminator, _TOL_COMPOSITE),
    ("loss", _component_loss, _TOL_COMPOSITE),
)


@contextlib.contextmanager
def perturbed_matmul(scale=1.01):
    """Deliberately mis-scale the matmul backward rule (negative control:
    the suite must notice)."""
    saved = tensor._MATMUL_GRAD_SCALE
    tensor._MATMUL_GRAD_SCALE = scale
    try:
        yield
    finally:
        tensor._MATMUL_GRAD_SCALE = saved


def run_suite(seed=0, perturb=False):
    """Run all components; returns a ComponentResult per component."""
    ctx = perturbed_matmul() if perturb else contextlib.nullcontext()
    results = []
    with ctx:
        for name, component, tol in _COMPONENTS:
            errs = component(seed)
            worst = max(errs, key=errs.get)
            results.append(ComponentResult(name, errs[worst], worst, tol, errs))
    return results

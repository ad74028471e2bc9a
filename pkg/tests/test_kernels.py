"""Compiled kernels against the numpy reference, and backend selection."""
import os
import subprocess
import sys

import numpy as np
import pytest

from codecweave import _kernels_py as ref
from codecweave import kernels

try:
    from codecweave import _kernels as comp
except ImportError:  # extension not built
    comp = None

needs_compiled = pytest.mark.skipif(comp is None, reason="compiled extension not built")
DTYPES = [np.float32, np.float64]


def tol(dtype):
    return dict(rtol=2e-5, atol=2e-6) if dtype == np.float32 else dict(rtol=1e-11, atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
def test_softmax_xent(dtype, rng):
    x = rng.normal(size=(37, 53)).astype(dtype) * 3
    t = rng.integers(-1, 53, size=37)
    w = rng.uniform(0, 3, size=37).astype(dtype)
    a, b = x.copy(), x.copy()
    la, lb = comp.softmax_xent(a, t, w), ref.softmax_xent(b, t, w)
    assert la == pytest.approx(lb, rel=1e-5 if dtype == np.float32 else 1e-12)
    np.testing.assert_allclose(a, b, **tol(dtype))
    assert (a[t < 0] == 0).all()


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
def test_layernorm(dtype, rng):
    x = rng.normal(size=(3, 5, 16)).astype(dtype)
    g = rng.normal(size=16).astype(dtype)
    b = rng.normal(size=16).astype(dtype)
    for o1, o2 in zip(comp.layernorm_fwd(x, g, b, 1e-5), ref.layernorm_fwd(x, g, b, 1e-5)):
        np.testing.assert_allclose(o1, o2, **tol(dtype))
    _, xh, rs = ref.layernorm_fwd(x, g, b, 1e-5)
    dy = rng.normal(size=x.shape).astype(dtype)
    for o1, o2 in zip(comp.layernorm_bwd(dy, xh, rs, g), ref.layernorm_bwd(dy, xh, rs, g)):
        np.testing.assert_allclose(o1, o2, **tol(dtype))


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
def test_gelu(dtype, rng):
    x = rng.normal(size=(4, 9)).astype(dtype) * 2
    y1, t1 = comp.gelu_fwd(x)
    y2, t2 = ref.gelu_fwd(x)
    np.testing.assert_allclose(y1, y2, **tol(dtype))
    dy = rng.normal(size=x.shape).astype(dtype)
    np.testing.assert_allclose(comp.gelu_bwd(dy, x, t1), ref.gelu_bwd(dy, x, t2), **tol(dtype))


@pytest.mark.parametrize("impl", [ref, comp] if comp else [ref], ids=lambda m: m.__name__.rsplit(".", 1)[1])
def test_float32_stays_float32(impl, rng):
    x = rng.normal(size=(2, 3, 8)).astype(np.float32)
    g, b = np.ones(8, np.float32), np.zeros(8, np.float32)
    outs = [*impl.gelu_fwd(x), *impl.layernorm_fwd(x, g, b, 1e-5), impl.causal_softmax(x[..., :3, :3].copy())]
    y, th = outs[:2]
    outs += [impl.gelu_bwd(x, x, th)]
    assert [o.dtype for o in outs] == [np.float32] * len(outs)


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
def test_attention_softmax(dtype, rng):
    s = rng.normal(size=(2, 3, 7, 7)).astype(dtype)
    a, b = comp.causal_softmax(s.copy()), ref.causal_softmax(s.copy())
    np.testing.assert_allclose(a, b, **tol(dtype))
    assert np.allclose(a.sum(-1), 1) and (np.triu(a[0, 0], 1) == 0).all()
    d = rng.normal(size=s.shape).astype(dtype)
    np.testing.assert_allclose(comp.softmax_bwd(a, d), ref.softmax_bwd(b, d), **tol(dtype))


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
def test_scatter_add(dtype, rng):
    ids = rng.integers(0, 6, size=40)
    rows = rng.normal(size=(40, 5)).astype(dtype)
    t1, t2 = np.zeros((6, 5), dtype), np.zeros((6, 5), dtype)
    comp.scatter_add_rows(t1, ids, rows)
    ref.scatter_add_rows(t2, ids, rows)
    np.testing.assert_allclose(t1, t2, **tol(dtype))
    with pytest.raises(IndexError):
        comp.scatter_add_rows(t1, np.array([6]), rows[:1])


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("shrink", [1.0, 0.999])
def test_adamw_update(dtype, shrink, rng):
    p = rng.normal(size=(8, 3)).astype(dtype)
    g = rng.normal(size=(8, 3)).astype(dtype)
    m = rng.normal(size=(8, 3)).astype(dtype) * 0.1
    v = rng.uniform(size=(8, 3)).astype(dtype) * 0.1
    args = (1e-3, 0.9, 0.999, 1 - 0.9 ** 3, 1 - 0.999 ** 3, 1e-6, shrink)
    s1 = [a.copy() for a in (p, g, m, v)]
    s2 = [a.copy() for a in (p, g, m, v)]
    comp.adamw_update(*s1, *args)
    ref.adamw_update(*s2, *args)
    for a, b in zip(s1, s2):
        np.testing.assert_allclose(a, b, rtol=1e-5 if dtype == np.float32 else 1e-12, atol=1e-7)


@needs_compiled
def test_in_place_kernels_reject_strided_views():
    x = np.zeros((4, 6))[:, ::2]
    with pytest.raises(ValueError):
        comp.softmax_xent(x, np.zeros(4, dtype=np.int64), np.ones(4))
    with pytest.raises(ValueError):
        comp.causal_softmax(np.zeros((1, 6, 6))[:, ::2, ::2])


def test_reference_softmax_xent_by_hand():
    x = np.array([[0.0, 0.0], [1.0, 2.0]])
    t = np.array([1, -1])
    w = np.array([2.0, 5.0])
    loss = ref.softmax_xent(x, t, w)
    assert loss == pytest.approx(2 * np.log(2))
    assert x.tolist() == [[1.0, -1.0], [0.0, 0.0]]


def test_backend_selection():
    assert kernels.BACKEND in ("compiled", "numpy")
    code = "from codecweave import kernels; print(kernels.BACKEND)"
    env = {**os.environ, "CODECWEAVE_PURE": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "numpy"

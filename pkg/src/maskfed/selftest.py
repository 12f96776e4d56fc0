"""Built-in verification: gradient checks, sampler oracle, cost identities.

Each check prints one line; any failure is listed with the case seed that
reproduces it so a report can be filed against a specific draw.
"""

from __future__ import annotations

import numpy as np

from . import bpf as bpf_mod
from . import cost, tensor as T, vit
from .rng import stream


def finite_difference(fn, arrays, h=1e-5):
    """Central-difference gradients of scalar fn w.r.t. each float64 array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gf[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def _grad_case(seed: int) -> float:
    """One small composite check: masked mini-ViT loss, autodiff vs FD."""
    rng = np.random.default_rng(seed)
    cfg = vit.ViTConfig(h=4, w_img=4, p=2, d=8, heads=2, n_t=2, m=1, c=3, channels=1)
    params = vit.init_params(cfg, rng, dtype=np.float64)
    imgs = rng.random((2, 1, 4, 4))
    labels = rng.integers(0, 3, size=2)
    mask_rng = np.random.default_rng(seed + 1)
    batch = vit.make_masked_batch(imgs, labels, 0.5, mask_rng, cfg)

    def loss_fn():
        h_p = vit.local_forward(params.phi, batch, cfg)
        h_r = vit.global_forward(params.w_global, h_p, cfg)
        return T.cross_entropy(vit.head_forward(params.theta, h_r), labels).item()

    with T.Graph() as g:
        h_p = vit.local_forward(params.phi, batch, cfg)
        h_r = vit.global_forward(params.w_global, h_p, cfg)
        loss = T.cross_entropy(vit.head_forward(params.theta, h_r), labels)
        T.backward(loss, g)

    probe = ["embed.w", "cls", "block0.wq", "block0.w2", "block0.ln1.g"]
    worst = 0.0
    for name in probe:
        t = params.phi[name]
        fd = finite_difference(loss_fn, [t.data])[0]
        worst = max(worst, rel_err(t.grad, fd))
    th = params.theta["head.w"]
    fd = finite_difference(loss_fn, [th.data])[0]
    worst = max(worst, rel_err(th.grad, fd))
    return worst


def _sampler_case(seed: int) -> bool:
    rng = np.random.default_rng(seed)
    classes = int(rng.integers(1, 6))
    counts = {c: int(rng.integers(1, 11)) for c in range(classes)}
    epochs = int(rng.integers(1, 5))
    pool = []
    for c, n in counts.items():
        for e in range(epochs):
            for s in range(n):
                pool.append(bpf_mod.PatchFeatureRecord(
                    0, c, e, np.array([0]), np.zeros((2, 2), dtype=np.float32)))
    median = bpf_mod.class_median(counts)
    out = bpf_mod.median_balance(pool, counts, median, np.random.default_rng(seed + 1))
    for c, n in counts.items():
        expect = min(median, n * epochs) if n < median else median
        if out.per_class_count.get(c, 0) != expect:
            return False
    return True


def _cost_case(seed: int) -> bool:
    rng = np.random.default_rng(seed)
    n_t = int(rng.integers(2, 16))
    ci = cost.CostInput(
        n_t=n_t, n_global=int(rng.integers(1, n_t)),
        n=int(rng.integers(4, 512)), d=int(rng.integers(8, 1024)),
        r_m=float(rng.choice([0.0, 0.25, 0.5, 0.75, 0.875])))
    total = cost.total_cost(ci)
    return total == cost.forward_cost(ci) + cost.backward_cost(ci)


def run_selftest(grad_cases: int = 12, sampler_cases: int = 200,
                 cost_cases: int = 300, tol: float = 1e-4, echo=print) -> int:
    """Return 0 when everything passes; print failures with case seeds."""
    failures = []

    worst = 0.0
    for seed in range(grad_cases):
        err = _grad_case(seed)
        worst = max(worst, err)
        if err >= tol:
            failures.append(f"gradient check: rel err {err:.3e} at seed {seed}")
    echo(f"gradient checks: {grad_cases} cases, worst rel err {worst:.3e} "
         f"({'ok' if worst < tol else 'FAIL'})")

    bad = [s for s in range(sampler_cases) if not _sampler_case(s)]
    echo(f"median sampler oracle: {sampler_cases} cases, "
         f"{'ok' if not bad else f'FAIL at seeds {bad[:5]}'}")
    failures += [f"median sampler mismatch at seed {s}" for s in bad]

    bad = [s for s in range(cost_cases) if not _cost_case(s)]
    echo(f"cost identity forward+backward==total: {cost_cases} cases, "
         f"{'ok' if not bad else f'FAIL at seeds {bad[:5]}'}")
    failures += [f"cost identity broken at seed {s}" for s in bad]

    # quick invariants
    x = T.Tensor(np.random.default_rng(7).normal(size=(50, 9)))
    y = T.softmax_rows(x)
    sums_ok = np.allclose(y.data.sum(axis=1), 1.0, atol=1e-9)
    range_ok = (y.data >= 0).all() and (y.data <= 1).all()
    echo(f"softmax row sums/range: {'ok' if sums_ok and range_ok else 'FAIL'}")
    if not (sums_ok and range_ok):
        failures.append("softmax invariant broken")

    if failures:
        echo(f"{len(failures)} failure(s):")
        for f in failures:
            echo("  " + f)
        return 1
    return 0

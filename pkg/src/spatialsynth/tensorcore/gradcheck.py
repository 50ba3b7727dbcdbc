"""Central finite-difference checks of graph gradients (64-bit)."""

from __future__ import annotations

import numpy as np

from .graph import Graph


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(graph: Graph, inputs: dict, loss=None, eps: float = 1e-6,
                    max_entries: int = 24, rng: np.random.Generator | None = None,
                    zero_tol: float = 0.0) -> dict[str, float]:
    """Compare analytic gradients with central differences.

    Every differentiable leaf (parameters and ``requires_grad`` inputs) is
    probed at up to ``max_entries`` entries.  Returns leaf name -> relative
    error of the probed gradient entries.  A leaf whose analytic and numeric
    probes both have norm below ``zero_tol`` has a vanishing gradient (for
    example a bias cancelled by a following normalization); relative error
    is undefined there and it is reported as 0.
    """
    if graph.dtype != np.float64:
        raise ValueError("gradient checks need a float64 graph")
    rng = rng or np.random.default_rng(0)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    loss = loss if loss is not None else graph.nodes[-1]

    def f() -> float:
        graph.forward(inputs)
        return float(np.sum(graph.value(loss)))

    f()
    analytic = graph.backward(loss)
    errors = {}
    for node in graph.nodes:
        if not node.needs_grad or node.kind not in ("param", "input"):
            continue
        arr = node.tensor.data if node.kind == "param" else inputs[node.name]
        if arr.dtype != np.float64:
            raise ValueError(f"leaf {node.name!r} is not float64")
        size = arr.size
        picks = np.arange(size) if size <= max_entries else rng.choice(size, max_entries, replace=False)
        flat = arr.reshape(-1)
        numeric = np.empty(len(picks))
        for n, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            numeric[n] = (fp - fm) / (2 * eps)
        a = analytic[node.name].reshape(-1)[picks]
        if max(np.linalg.norm(a), np.linalg.norm(numeric)) < zero_tol:
            errors[node.name] = 0.0
        else:
            errors[node.name] = relative_error(a, numeric)
    f()
    return errors

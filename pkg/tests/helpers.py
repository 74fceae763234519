"""Independent oracles shared by the test modules."""

import numpy as np


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (mutated and restored)."""
    g = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / scale


def straight_line_meta_decoder(layers, p):
    """Scaled-affine chain evaluated one scalar at a time with Python floats."""
    x = [float(v) for v in p]
    for i, (W, s, b) in enumerate(layers):
        out = []
        for k in range(W.shape[0]):
            acc = 0.0
            for j in range(W.shape[1]):
                acc += float(W[k, j]) * x[j]
            v = acc * float(s[k]) + float(b[k])
            if i < len(layers) - 1:
                v = max(v, 0.0)
            out.append(v)
        x = out
    return np.array(x)


def straight_line_mlp(weights, x, residual_of=None):
    """Plain ReLU MLP (linear last layer) evaluated with Python floats."""
    x = [float(v) for v in x]
    for i, (W, b) in enumerate(weights):
        out = []
        for k in range(W.shape[0]):
            acc = float(b[k])
            for j in range(W.shape[1]):
                acc += float(W[k, j]) * x[j]
            out.append(max(acc, 0.0) if i < len(weights) - 1 else acc)
        x = out
    out = np.array(x)
    return out if residual_of is None else np.asarray(residual_of, float) + out


ACCEPTANCE_LINES = []


class criterion:
    """Record one PASS/FAIL line for an acceptance criterion, failing or not.

    ``with criterion(5, "overfit") as out: out["ratio"] = ...``
    """

    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, {}

    def __enter__(self):
        return self.detail

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        parts = [f"{k}={_fmt(v)}" for k, v in self.detail.items()]
        if exc_type is not None and exc_type is not AssertionError:
            parts.append(f"error={exc_type.__name__}: {exc}")
        line = f"criterion {self.number:>2} {status}  {self.title}" + (f"  [{', '.join(parts)}]" if parts else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "(" + ", ".join(_fmt(x) for x in v) + ")"
    return str(v)

"""Independent numpy evaluation of the MLP forward pass and of Adam.

Writes tests/fixtures/nn_oracle.json. Parameter layout per layer: weights
(out x in, row-major) followed by biases.
Run from crates/core: python3 tests/oracles/nn_oracle.py
"""
import json
import pathlib

import numpy as np

rng = np.random.default_rng(7)
sizes = [6, 8, 5, 3]
layers = []
flat = []
for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
    w = rng.normal(0.0, 0.7, size=(fan_out, fan_in))
    b = rng.normal(0.0, 0.3, size=fan_out)
    layers.append((w, b))
    flat.extend(w.ravel().tolist())
    flat.extend(b.tolist())

inputs = rng.normal(0.0, 1.0, size=(16, sizes[0]))
x = inputs
for i, (w, b) in enumerate(layers):
    x = x @ w.T + b
    if i + 1 < len(layers):
        x = np.maximum(x, 0.0)

# Adam on a fixed gradient sequence.
n, steps = 12, 25
lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
p = rng.normal(0.0, 1.0, size=n)
p0 = p.copy()
grads = rng.normal(0.0, 1.0, size=(steps, n)) * np.logspace(-3, 1, n)
m = np.zeros(n)
v = np.zeros(n)
trajectory = []
for t in range(1, steps + 1):
    g = grads[t - 1]
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    trajectory.append(p.tolist())

out = {
    "forward": {"sizes": sizes, "params": flat, "inputs": inputs.tolist(), "outputs": x.tolist()},
    "adam": {"lr": lr, "initial": p0.tolist(), "grads": grads.tolist(), "trajectory": trajectory},
}
path = pathlib.Path(__file__).resolve().parent.parent / "fixtures" / "nn_oracle.json"
path.write_text(json.dumps(out))
print(f"wrote {path}")

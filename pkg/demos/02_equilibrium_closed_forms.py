"""Solve the two analytically tractable markets.

With zero costs the price map's image is identically zero; with constant
costs the adjoint is g0 + c0*(T-t) for every sample, the population weights
cancel, and the fixed point is the closed-form price -(g0 + c0*(T-t)).
"""

import numpy as np

from mfpricelab import preset, sample_batch, solve_fixed_point

for name in ("zero", "deterministic"):
    model = preset(name)
    batch = sample_batch(model.grid, 7, 4000, model.factor)
    report = solve_fixed_point(batch, model)
    print(f"--- {name} ---")
    print(report.summary(bounds=model.bounds))
    if name == "deterministic":
        spec = model.grid
        sub = np.linspace(0, spec.interval_length, spec.m + 1)
        worst = max(
            float(np.max(np.abs(v + 0.5 + 0.25 * (1 - (k.interval * spec.interval_length + sub)))))
            for k, v in report.price.values.items())
        print(f"closed-form -(g0 + c0(T-t)) reproduced to {worst:.2e}")
    print()

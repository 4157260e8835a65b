"""Finite-N validation of the mean-field price.

clearing_residual estimates E[ int_0^T |(1/N) sum alpha|^2 dt ] for a market
of N_I + N_S agents that share the common noise, informed factor and the
mean-field price tree, each with fresh idiosyncratic noise.  rate_study fits
the decay rate in N against the analytic bound 8*T*C_B^2*sum(1/Lambda_p^2)/N.
informed_inference_check verifies the single-informed-agent identity: the
informed trading rate is recoverable from the price and the standard
population's conditional adjoint alone.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .conditioning import TreeConditioner
from .equilibrium import apply_phi
from .errors import ModelError, PriceLabError
from .fbsde import backward_integral, solve_agent
from .models import AFFINE, MarketModel
from .price import DiscretePrice, interval_matrix, materialize
from .sampling import idiosyncratic_copies, sample_batch

MEAN_FIELD = "mean-field"
FINITE_MARKET = "finite-market"


@dataclass(frozen=True)
class InformedScenario:
    N_S: int
    rho: float = 0.5
    penalty_scaling: str = MEAN_FIELD

    def __post_init__(self):
        if self.N_S < 1:
            raise ValueError("N_S must be >= 1")
        if self.penalty_scaling not in (MEAN_FIELD, FINITE_MARKET):
            raise ValueError(f"unknown penalty scaling {self.penalty_scaling!r}")


@dataclass
class ClearingEstimate:
    value: float
    se: float
    per_scenario: np.ndarray


@dataclass
class ClearingReport:
    N_values: list
    residuals: np.ndarray
    stderrs: np.ndarray
    bound_constants: np.ndarray
    slope: Optional[float]
    slope_stderr: Optional[float]
    exact_clearing: bool
    bound_ok: np.ndarray

    def summary(self) -> str:
        if self.exact_clearing:
            head = "exact clearing: all residuals vanish; slope undefined"
        else:
            head = f"log-log slope {self.slope:.3f} +- {self.slope_stderr:.3f}"
        rows = [head]
        for n, r, s, b in zip(self.N_values, self.residuals, self.stderrs, self.bound_constants):
            rows.append(f"  N={n:5d} residual={r:.6e} (se {s:.1e}) bound={b:.6e}")
        return "\n".join(rows)


def clearing_bound(model: MarketModel, N: int) -> float:
    """The market-clearing proof constant 8*T*C_B^2*sum_p (1/Lambda_p)^2, at size N."""
    s = model.informed.lam_bar ** 2 + model.standard.lam_bar ** 2
    return 8.0 * model.bounds.T * model.bounds.C_B ** 2 * s / N


def _population_batch(common, population: str, xi, w):
    """Flattened finite-market batch: common rows repeated per agent, fresh
    idiosyncratics for the given population (the other one is never read)."""
    n_rows = xi.shape[0]
    repeat = n_rows // common.count
    reps = np.repeat(np.arange(common.count), repeat)
    kw = dict(count=n_rows, b=common.b[reps], c=common.c[reps], node_path=common.node_path[reps])
    if population == "I":
        kw.update(w_I=w, xi_I=xi, w_S=w, xi_S=xi)
    else:
        kw.update(w_S=w, xi_S=xi, w_I=w, xi_I=xi)
    return replace(common, **kw)


def _agent_controls(price: DiscretePrice, model: MarketModel, common, population: str,
                    n_agents: int, seed: int, opts: Optional[dict]):
    """Per-scenario, per-agent optimal controls under the mean-field price.

    Returns (alpha, alpha_end) with shapes (M, n_agents, n_fine) and
    (M, n_agents, n_intervals)."""
    agent = model.informed if population == "I" else model.standard
    xi, w = idiosyncratic_copies(common.spec, seed, common.count, n_agents, population)
    batch = _population_batch(common, population, xi, w)
    buckets = TreeConditioner(batch.spec, batch.node_path, mode=price.mode,
                              min_count=(opts or {}).get("min_bucket", model.solver.min_bucket))
    sol = solve_agent(batch, price, agent, buckets, model.bounds, opts=opts)
    M = common.count
    return (sol.alpha.reshape(M, n_agents, -1), sol.alpha_end.reshape(M, n_agents, -1))


def _residual_from_controls(controls: dict, spec, n_use: dict) -> np.ndarray:
    """Per-scenario int |(1/N) sum_j alpha|^2 dt using the first n_use agents.

    Agents are summed in value order so the estimate is exactly invariant
    under relabeling (float addition is not associative)."""
    N = sum(n_use.values())
    parts, parts_end = [], []
    for pop, (a, a_end) in controls.items():
        k = n_use[pop]
        parts.append(np.sort(a[:, :k, :], axis=1).sum(axis=1))
        parts_end.append(np.sort(a_end[:, :k, :], axis=1).sum(axis=1))
    avg = sum(parts) / N
    avg_end = sum(parts_end) / N
    return backward_integral(avg ** 2, avg_end ** 2, spec)[:, 0]


def clearing_residual(price: DiscretePrice, model: MarketModel, N_I: int, N_S: int,
                      seed: int, n_scenarios: int = 64,
                      opts: Optional[dict] = None) -> ClearingEstimate:
    """Monte Carlo + trapezoid estimate of the squared average trading rate."""
    if N_I < 1 or N_S < 1:
        raise ValueError("population sizes must be >= 1")
    if price.spec != model.grid:
        raise PriceLabError("price and model use different grids")
    common = sample_batch(model.grid, seed, n_scenarios, model.factor)
    controls = {
        "I": _agent_controls(price, model, common, "I", N_I, seed + 1, opts),
        "S": _agent_controls(price, model, common, "S", N_S, seed + 2, opts),
    }
    vals = _residual_from_controls(controls, model.grid, {"I": N_I, "S": N_S})
    return ClearingEstimate(value=float(vals.mean()),
                            se=float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0,
                            per_scenario=vals)


def rate_study(price: DiscretePrice, model: MarketModel, N_values: list, seeds: list,
               n_scenarios: int = 48, opts: Optional[dict] = None) -> ClearingReport:
    """Residual decay across market sizes.

    Per seed, one pooled FBSDE solve at the largest size; smaller markets are
    nested subsets of the same agents (common random numbers across N).
    """
    N_values = sorted(int(n) for n in N_values)
    if len(N_values) < 4 or N_values[-1] < 4 * N_values[0]:
        raise ValueError("rate study needs >= 4 sizes spanning >= 2 octaves")
    w_I = model.informed.weight
    split = {N: (max(1, round(w_I * N)), N - max(1, round(w_I * N))) for N in N_values}
    N_max = N_values[-1]
    k_imax, k_smax = split[N_max]
    per_N_vals = {N: [] for N in N_values}
    for seed in seeds:
        common = sample_batch(model.grid, int(seed), n_scenarios, model.factor)
        controls = {
            "I": _agent_controls(price, model, common, "I", k_imax, int(seed) + 1, opts),
            "S": _agent_controls(price, model, common, "S", k_smax, int(seed) + 2, opts),
        }
        for N in N_values:
            ki, ks = split[N]
            vals = _residual_from_controls(controls, model.grid, {"I": ki, "S": ks})
            per_N_vals[N].append(vals)
    residuals = np.empty(len(N_values))
    stderrs = np.empty(len(N_values))
    for j, N in enumerate(N_values):
        allv = np.concatenate(per_N_vals[N])
        residuals[j] = allv.mean()
        stderrs[j] = allv.std(ddof=1) / np.sqrt(allv.size)
    bounds = np.array([clearing_bound(model, N) for N in N_values])
    bound_ok = residuals <= bounds + 3.0 * stderrs
    exact = bool(np.all(residuals <= 1e-14))
    slope = slope_se = None
    if not exact:
        if np.any(residuals <= 0):
            raise ModelError("degenerate regression: nonpositive residuals with noise")
        x = np.log(np.asarray(N_values, dtype=float))
        y = np.log(residuals)
        A = np.column_stack([x, np.ones_like(x)])
        coef, res_ss, *_ = np.linalg.lstsq(A, y, rcond=None)
        slope = float(coef[0])
        dof = len(N_values) - 2
        s2 = float(res_ss[0]) / dof if res_ss.size and dof > 0 else 0.0
        cov = s2 * np.linalg.inv(A.T @ A)
        slope_se = float(np.sqrt(max(cov[0, 0], 0.0)))
    return ClearingReport(N_values=N_values, residuals=residuals, stderrs=stderrs,
                          bound_constants=bounds, slope=slope, slope_stderr=slope_se,
                          exact_clearing=exact, bound_ok=bound_ok)


@dataclass
class InformedCheckResult:
    max_gap: float
    max_gap_over_tol: float
    passed: bool
    scaling: float
    fp_slack: float
    rows: list  # (interval, key, sub_time, beta_direct, beta_inferred, gap, tol)

    def summary(self) -> str:
        return (f"informed inference: max gap {self.max_gap:.3e} "
                f"(worst gap/tol {self.max_gap_over_tol:.3f}, "
                f"fixed-point slack {self.fp_slack:.1e}) -> "
                f"{'PASS' if self.passed else 'FAIL'}")


def informed_inference_check(scenario: InformedScenario, model: MarketModel,
                             batch=None, opts: Optional[dict] = None) -> InformedCheckResult:
    """Verify that the informed trading rate equals its inference from public
    information at the equilibrium: beta = (n_S/n_I) * (1/Lambda_S) * (price +
    E[Y_S | key]).  Requires the informed costs to be affine functions of
    (t, price, common noise) so the informed adjoint is key-measurable.
    """
    opts = dict(opts or {})
    if model.informed.cost_mode != AFFINE:
        raise ModelError("informed inference check requires affine informed costs")
    if model.informed.reads_factor:
        raise ModelError("informed costs must depend on (t, price, common noise) only")
    from .equilibrium import solve_fixed_point  # local to avoid cycle at import time

    if batch is None:
        factor = replace(model.factor, rho=scenario.rho)
        model = replace(model, factor=factor)
        batch = sample_batch(model.grid, model.solver.seed, model.solver.samples, model.factor)
    opts["informed_state"] = False
    report = solve_fixed_point(batch, model, opts=opts)
    price = report.price
    buckets = TreeConditioner(batch.spec, batch.node_path, mode=price.mode,
                              min_count=opts.get("min_bucket", model.solver.min_bucket))
    _, _, sols = apply_phi(price, batch, model, buckets=buckets, opts=opts,
                           return_internals=True)
    lam_bar_I = model.informed.lam_bar
    lam_bar_S = model.standard.lam_bar
    ratio = model.standard.weight / model.informed.weight
    scale = float(scenario.N_S) if scenario.penalty_scaling == FINITE_MARKET else 1.0
    # the identity gap equals (w_bar/n_I)*|Phi(theta)-theta| exactly, so the
    # converged iterate carries a deterministic displacement bounded by tol/rho
    w_bar = model.informed.weight * lam_bar_I + model.standard.weight * lam_bar_S
    fp_slack = (scale * w_bar / model.informed.weight
                * float(opts.get("tol", model.solver.tol))
                / float(opts.get("damping", model.solver.damping)))
    spec = batch.spec
    m = spec.m
    rows = []
    max_gap = 0.0
    worst = 0.0
    sub_dt = spec.interval_length / m
    for i in range(spec.n_intervals):
        mat, _ = interval_matrix(price, buckets, i)
        stats_I = buckets.bucket_stats(i, sols["I"].response[:, i * m:(i + 1) * m + 1])
        stats_S = buckets.bucket_stats(i, sols["S"].response[:, i * m:(i + 1) * m + 1])
        beta_direct = scale * (-lam_bar_I) * (stats_I.mean + mat)
        beta_inferred = scale * ratio * lam_bar_S * (mat + stats_S.mean)
        se = np.where(np.isfinite(stats_S.se), stats_S.se, np.inf)
        tol = 3.0 * scale * ratio * lam_bar_S * se + fp_slack
        gap = np.abs(beta_direct - beta_inferred)
        max_gap = max(max_gap, float(gap.max()))
        worst = max(worst, float(np.max(gap / tol)))
        for k, key in enumerate(stats_I.keys):
            for s in range(m + 1):
                rows.append((i, key.prefix, i * spec.interval_length + s * sub_dt,
                             float(beta_direct[k, s]), float(beta_inferred[k, s]),
                             float(gap[k, s]), float(tol[k, s])))
    return InformedCheckResult(max_gap=max_gap, max_gap_over_tol=worst,
                               passed=worst <= 1.0, scaling=scale, fp_slack=fp_slack,
                               rows=rows)


def clearing_report_csv(path, report: ClearingReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("N,residual,stderr,bound\n")
        for n, r, s, b in zip(report.N_values, report.residuals, report.stderrs,
                              report.bound_constants):
            fh.write(f"{n},{r:.17g},{s:.17g},{b:.17g}\n")


def informed_check_csv(path, result: InformedCheckResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("interval,key,t,beta_direct,beta_inferred,gap,tol\n")
        for (i, prefix, t, bd, bi, gap, tol) in result.rows:
            label = "|".join(str(p) for p in prefix) or "root"
            fh.write(f"{i},{label},{t:.17g},{bd:.17g},{bi:.17g},{gap:.17g},{tol:.17g}\n")

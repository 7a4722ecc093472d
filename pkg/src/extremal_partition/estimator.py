"""Maximum (penalized) pairwise likelihood estimation of a dependence field."""

from __future__ import annotations

import math

import click
import numpy as np
from scipy.optimize import minimize

from extremal_partition.domain import single_region
from extremal_partition.errors import NumericFailureError
from extremal_partition.likelihood import (
    FieldLayout,
    PairwiseData,
    fused_penalty,
    resolve_penalty,
    smoothed_penalty,
)
from extremal_partition.models import (
    DependenceField,
    FitResult,
    MaximaPanel,
    PairSet,
    Partition,
    PenaltySpec,
    SiteSet,
)

DEFAULT_STARTS = 3
START_JITTER = 0.1
FTOL = 1e-8
GTOL = 1e-5
MAX_ITER = 500
PSI_BOUND = 20.0  # |log sill|, |log range| never leave [-20, 20]

_SILL_GRID = (0.1, 0.5, 1.0, 2.0, 5.0)
_RANGE_GRID = (0.1, 0.3, 1.0, 3.0)  # sqrt(phi) in units of the median pair distance


def fit(
    panel: MaximaPanel,
    pairs: PairSet,
    sites: SiteSet,
    partition: Partition,
    spec: PenaltySpec,
    init: DependenceField | None = None,
    starts: int = DEFAULT_STARTS,
    seed: int = 0,
    verbose: bool = False,
) -> FitResult:
    """Maximize PL - penalty over psi with L-BFGS-B from several jittered starts.

    An infinite weight on coordinate k makes psi_k one shared parameter. The L1 penalty
    is smoothed as sqrt(x^2 + 1e-8); the reported ppl_value uses the exact penalty.
    """
    data = PairwiseData(panel, pairs, sites, partition)
    layout = FieldLayout(partition, spec.shared())

    if init is None:
        init = _default_init(data, spec)
    elif init.partition is not partition:
        init = DependenceField(init.psi1, init.psi2, partition)
    theta0 = layout.to_theta(init)

    scale = float(data.T * len(pairs))
    evals = [0]

    def objective(theta):
        evals[0] += 1
        field = layout.to_field(theta)
        pl = data.loglik(field)
        pen, pen_grad = smoothed_penalty(field, partition.adjacency, spec)
        value = -(pl - pen) / scale
        grad = -layout.reduce(data.gradient(field) - pen_grad) / scale
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            raise NumericFailureError("objective is not finite", tuple(np.round(theta, 6)))
        if verbose:
            click.echo("  eval {:4d}  PPL {:.6f}".format(evals[0], pl - pen))
        return value, grad

    rng = np.random.default_rng(seed)
    candidates = [theta0] + [
        theta0 + rng.normal(0.0, START_JITTER, size=theta0.size) for _ in range(max(0, starts - 1))
    ]
    bounds = [(-PSI_BOUND, PSI_BOUND)] * layout.p

    best = None
    for k, start in enumerate(candidates):
        start = np.clip(start, -PSI_BOUND, PSI_BOUND)
        try:
            res = minimize(
                objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
                options={"ftol": FTOL, "gtol": GTOL, "maxiter": MAX_ITER},
            )
        except NumericFailureError as exc:
            click.echo("Warning: start {} aborted: {}".format(k + 1, exc.message), err=True)
            continue
        if best is None or res.fun < best.fun:
            best = res

    if best is None:
        raise NumericFailureError("every optimizer start failed", (len(candidates),))

    field_hat = layout.to_field(best.x)
    pl = data.loglik(field_hat)
    ppl = pl - fused_penalty(field_hat, partition.adjacency, resolve_penalty(field_hat, spec))
    flag = None if best.success else "optimizer stopped: {}".format(_message(best))
    return FitResult(
        field_hat=field_hat,
        pl_value=pl,
        ppl_value=ppl,
        converged=bool(best.success),
        n_evals=evals[0],
        penalty=spec,
        condition_flag=flag,
    )


def fit_stationary(
    panel: MaximaPanel,
    pairs: PairSet,
    sites: SiteSet,
    init: DependenceField | None = None,
    starts: int = DEFAULT_STARTS,
    seed: int = 0,
) -> FitResult:
    """Single-region model, p = 2."""
    return fit(panel, pairs, sites, single_region(sites), PenaltySpec(math.inf, math.inf),
               init=init, starts=starts, seed=seed)


def _default_init(data: PairwiseData, spec: PenaltySpec) -> DependenceField:
    """Best constant field on a coarse grid; refined by a stationary fit when R > 1."""
    partition = data.partition
    R = partition.R
    h_med = float(np.median(data.h))
    best, best_value = None, -np.inf
    for sill in _SILL_GRID:
        for length in _RANGE_GRID:
            field = DependenceField.from_values(partition, sill, (length * h_med) ** 2)
            value = data.loglik(field)
            if value > best_value:
                best, best_value = field, value
    if R == 1 or all(spec.shared()):
        return best

    stationary = FieldLayout(partition, (True, True))
    theta = stationary.to_theta(best)
    scale = float(data.T * len(data.pairs))

    def objective(theta):
        field = stationary.to_field(theta)
        return (-data.loglik(field) / scale,
                -stationary.reduce(data.gradient(field)) / scale)

    res = minimize(objective, theta, jac=True, method="L-BFGS-B",
                   bounds=[(-PSI_BOUND, PSI_BOUND)] * 2,
                   options={"ftol": FTOL, "gtol": GTOL, "maxiter": MAX_ITER})
    return stationary.to_field(res.x)


def _message(res) -> str:
    msg = res.message
    return msg.decode() if isinstance(msg, bytes) else str(msg)

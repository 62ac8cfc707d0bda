"""
Stability and performance certificates for MPC with a trained terminal cost.

Scalars follow the usual chain: controllability constants (C, sigma) of the
initial policy, the terminal-set level d, gamma_V = C(1/(1-sigma) + 2 gamma_0),
then the horizon bounds N1(c), N2 and the coefficients alpha1(N, c), alpha2(N).
"""

from dataclasses import dataclass
from typing import Callable, Optional
import logging
import math

import numpy as np
import pandas as pd
from pydantic import BaseModel

from config.settings import settings
from control.avi import stability_margin_bound
from models.exceptions import BoundInvalidError, CertificationError, EstimationError, MarginError
from models.system import BoxSet, ControlAffineSystem, Policy, StageCost, step

logger = logging.getLogger(__name__)

MAX_ROLLOUT_LENGTH = 500


def sigma_grid(lower: float = 0.80, upper: float = 0.999, spacing: float = 0.001) -> np.ndarray:
    count = int(round((upper - lower) / spacing)) + 1
    return np.round(lower + spacing * np.arange(count), 12)


# --------------------------------------------------
# Exponential controllability of the initial policy
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class ControllabilityFit:
    C: float
    sigma: float
    M: int
    envelope: np.ndarray
    retained: int
    excluded: int

    def to_frame(self) -> pd.DataFrame:
        k = np.arange(self.envelope.shape[0])
        return pd.DataFrame({"k": k, "max_ratio": self.envelope, "bound": self.C * self.sigma ** k})


def closed_loop_ratios(sys: ControlAffineSystem, cost: StageCost, policy: Policy,
                       samples: np.ndarray, M: int, state_box: Optional[BoxSet] = None,
                       input_box: Optional[BoxSet] = None):
    """Batched rollouts; returns r[k, s] = l(x_s(k), mu(x_s(k))) / l*(x_s(0)) and a validity mask."""
    x = np.array(samples, dtype=float)
    lstar0 = cost.eval_lstar(x)
    valid = np.ones(x.shape[0], dtype=bool)
    if state_box is not None:
        valid &= state_box.contains(x)
        x = np.where(valid[:, None], x, 0.0)

    ratios = np.zeros((M, x.shape[0]))
    for k in range(M):
        u = np.asarray(policy(x), dtype=float)
        ratios[k] = cost.eval_l(x, u) / lstar0
        if input_box is not None:
            valid &= input_box.contains(u)
        x_next = step(sys, x, u)
        if state_box is not None:
            valid &= state_box.contains(x_next)
        x = np.where(valid[:, None], x_next, 0.0)
    return ratios, valid


def _envelope_constants(envelope: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """C(sigma) = max(1, max_k R_k sigma^-k) for every sigma."""
    k = np.arange(envelope.shape[0])
    with np.errstate(divide="ignore"):
        log_envelope = np.log(envelope)
    exponents = log_envelope[None, :] - np.outer(np.log(sigmas), k)
    with np.errstate(over="ignore"):
        return np.maximum(1.0, np.exp(np.max(exponents, axis=1)))


def default_objective(C: float, sigma: float) -> float:
    return C / (1.0 - sigma)


def estimate_controllability(sys: ControlAffineSystem, cost: StageCost, policy: Policy,
                             samples: np.ndarray, M: Optional[int] = None,
                             sigmas: Optional[np.ndarray] = None,
                             state_box: Optional[BoxSet] = None,
                             input_box: Optional[BoxSet] = None,
                             objective: Optional[Callable[[float, float], float]] = None,
                             delta_lstar: Optional[float] = None) -> ControllabilityFit:
    """
    Fit l(x(k), mu(x(k))) <= C sigma^k l*(x(0)) over closed-loop rollouts.

    sigma is picked from the grid by minimizing `objective(C(sigma), sigma)`,
    ties going to the smaller C. Without M, rollouts run to the cap first and M
    is then cut to the first k with C sigma^k max l*(x(0)) < delta_lstar.
    """
    delta_lstar = settings.delta_lstar if delta_lstar is None else delta_lstar
    sigmas = sigma_grid() if sigmas is None else np.asarray(sigmas, dtype=float)
    objective = objective or default_objective
    if M is not None and M < 2:
        raise ValueError(f"rollout length M must be at least 2, got {M}")

    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    samples = samples[cost.eval_lstar(samples) >= delta_lstar]
    if samples.shape[0] == 0:
        raise EstimationError(f"no sample has l* >= {delta_lstar:g}")

    def select(ratios, valid):
        if not np.any(valid):
            raise EstimationError("every rollout left X or U; omega is too large for the initial policy")
        envelope = np.max(ratios[:, valid], axis=1)
        constants = _envelope_constants(envelope, sigmas)
        scores = np.array([objective(C, s) for C, s in zip(constants, sigmas)])
        best = np.lexsort((constants, scores))[0]
        return envelope, float(constants[best]), float(sigmas[best])

    horizon = M if M is not None else MAX_ROLLOUT_LENGTH
    ratios, valid = closed_loop_ratios(sys, cost, policy, samples, horizon, state_box, input_box)
    envelope, C, sigma = select(ratios, valid)

    if M is None:
        lstar_max = float(np.max(cost.eval_lstar(samples[valid])))
        level = math.log(delta_lstar / (C * lstar_max)) / math.log(sigma)
        M = int(min(MAX_ROLLOUT_LENGTH, max(2, math.floor(level) + 1)))
        ratios, valid = closed_loop_ratios(sys, cost, policy, samples, M, state_box, input_box)
        envelope, C, sigma = select(ratios, valid)

    excluded = int(np.sum(~valid))
    if excluded:
        logger.warning(f"{excluded} of {valid.size} rollouts left X or U and were excluded")
    logger.info(f"controllability fit: C={C:.6g}, sigma={sigma:.4f}, M={M}")
    return ControllabilityFit(C=C, sigma=sigma, M=M, envelope=envelope,
                              retained=int(np.sum(valid)), excluded=excluded)


# --------------------------------------------------
# Scalar certificates
# --------------------------------------------------

def terminal_set_d(cost: StageCost, gamma0: float, omega: BoxSet) -> float:
    """Largest d with {x'Qx <= d/(2 gamma_0)} inside omega; max |x_j| on {x'Qx <= r} is sqrt(r (Q^-1)_jj)."""
    Q_inv_diag = np.diag(np.linalg.inv(cost.Qmat))
    half_width_sq = np.minimum(omega.lower ** 2, omega.upper ** 2)
    return float(2.0 * gamma0 * np.min(half_width_sq / Q_inv_diag))


def gamma_V(C: float, sigma: float, gamma0: float) -> float:
    return C * (1.0 / (1.0 - sigma) + 2.0 * gamma0)


@dataclass(frozen=True)
class HorizonN1:
    N_prime: int
    gamma_c_lower: float
    gamma_c_upper: float
    N_prime_lower: float
    N1: float
    rho: float


def _log_decay(gamma: float) -> float:
    """-log(1 - 1/gamma), kept nonzero for very large gamma."""
    return -math.log1p(-1.0 / gamma)


def _penalty_argument(c: float, gamma0: float, gamma_v: float) -> float:
    return (c * (1.0 - c) + 4.0 * c * gamma0) / (1.0 - c) ** 2 * gamma_v


def horizon_N1(c: float, beta: float, gamma_v: float, gamma0: float, epsilon: float) -> HorizonN1:
    """Stability holds for integer N > N1; nonpositive log arguments drop out of the max."""
    if gamma_v <= 1.0:
        raise MarginError(f"gamma_V must exceed 1, got {gamma_v}")
    if not 0.0 <= c < 1.0:
        raise MarginError(f"c must lie in [0, 1), got {c}")
    N_prime = int(math.ceil(max(0.0, (beta - gamma_v * epsilon) / epsilon)))
    gamma_c_lower = min(gamma_v, beta / epsilon)
    gamma_c_upper = max(gamma_v, beta / epsilon)
    decay = _log_decay(gamma_v)

    level_term = math.log(gamma_c_lower) - math.log(1.0 - c)
    argument = _penalty_argument(c, gamma0, gamma_v)
    penalty_term = math.log(argument) if argument > 0.0 else -math.inf

    return HorizonN1(
        N_prime=N_prime,
        gamma_c_lower=gamma_c_lower,
        gamma_c_upper=gamma_c_upper,
        N_prime_lower=N_prime + max(0.0, level_term) / decay,
        N1=N_prime + max(0.0, level_term, penalty_term) / decay,
        rho=(gamma_v - 1.0) / gamma_v,
    )


def alpha1(N: int, c: float, gamma_v: float, gamma0: float, N_prime: int) -> float:
    if N < N_prime:
        raise BoundInvalidError(f"alpha1 needs N >= N' = {N_prime}, got N={N}")
    rho = (gamma_v - 1.0) / gamma_v
    return 1.0 - rho ** (N - N_prime) * _penalty_argument(c, gamma0, gamma_v)


@dataclass(frozen=True)
class HorizonN2:
    N_double_prime: int
    gamma_lower: float
    N_double_prime_lower: float
    N2: float


def horizon_N2(beta: float, gamma: float, gamma0: float, epsilon: float,
               N_prime_lower: float, literal_c: Optional[float] = None) -> HorizonN2:
    """N'' uses (beta - gamma eps)/eps, or (c - gamma eps)/eps when literal_c is given."""
    if gamma <= 1.0:
        raise MarginError(f"gamma must exceed 1, got {gamma}")
    numerator = beta if literal_c is None else literal_c
    N_double_prime = int(math.ceil(max(0.0, (numerator - gamma * epsilon) / epsilon)))
    gamma_lower = min(gamma, beta / epsilon)
    lower = N_double_prime + max(math.log(gamma_lower), 0.0) / _log_decay(gamma)
    return HorizonN2(
        N_double_prime=N_double_prime,
        gamma_lower=gamma_lower,
        N_double_prime_lower=lower,
        N2=max(N_prime_lower, lower),
    )


def alpha2(N: int, gamma0: float, gamma: float, N_double_prime: int) -> float:
    if N < N_double_prime:
        raise BoundInvalidError(f"alpha2 needs N >= N'' = {N_double_prime}, got N={N}")
    return 1.0 + 2.0 * gamma0 * ((gamma - 1.0) / gamma) ** (N - N_double_prime)


# --------------------------------------------------
# Bundle
# --------------------------------------------------

class CertificateBundle(BaseModel):
    """Every certificate scalar of one training run, as written to certificates.json."""

    C: float
    sigma: float
    M: int
    gamma0: float
    c: float
    d: float
    epsilon: float
    gamma_V: float
    gamma: float
    beta: float
    rho_gamma: float
    gamma_c_lower: float
    gamma_c_upper: float
    gamma_lower: float
    N_prime: int
    N_prime_lower: float
    N1: float
    N_double_prime: int
    N_double_prime_lower: float
    N2: float
    N_double_prime_literal_c: int
    N_double_prime_lower_literal_c: float
    N2_literal_c: float
    N_lower: int
    stability_margin_bound: float
    stability_margin_passed: bool
    N_user: Optional[int] = None
    alpha1_user: Optional[float] = None
    alpha2_user: Optional[float] = None
    N_user_certified: Optional[bool] = None

    def alpha1(self, N: int) -> float:
        return alpha1(N, self.c, self.gamma_V, self.gamma0, self.N_prime)

    def alpha2(self, N: int) -> float:
        return alpha2(N, self.gamma0, self.gamma, self.N_double_prime)


def n1_objective(c: float, beta: float, gamma0: float, d: float) -> Callable[[float, float], float]:
    """sigma-selection objective: the N1 bound a candidate (C, sigma) would produce."""

    def objective(C: float, sigma: float) -> float:
        gamma_v = gamma_V(C, sigma, gamma0)
        epsilon = d / (2.0 * gamma0 * C)
        if not math.isfinite(gamma_v) or epsilon <= 0.0:
            return math.inf
        return horizon_N1(c, beta, gamma_v, gamma0, epsilon).N1

    return objective


def build_bundle(training, controllability: ControllabilityFit, cost: StageCost, omega: BoxSet,
                 beta: float, N_user: Optional[int] = None) -> CertificateBundle:
    """
    Assemble the certificates from a training result (anything with `c` and `gamma0`).

    c >= 1 is refused; a failed stability-margin test is recorded, not fatal.
    """
    c, gamma0 = float(training.c), training.gamma0
    if c >= 1.0 or gamma0 is None:
        raise CertificationError(f"error margin c = {c:.6g} >= 1: adjust omega and/or the basis and retrain")
    if beta <= 0.0:
        raise CertificationError(f"beta must be positive, got {beta}")

    C, sigma = controllability.C, controllability.sigma
    d = terminal_set_d(cost, gamma0, omega)
    epsilon = d / (2.0 * gamma0 * C)
    gv = gamma_V(C, sigma, gamma0)
    gamma = C / (1.0 - sigma)

    first = horizon_N1(c, beta, gv, gamma0, epsilon)
    second = horizon_N2(beta, gamma, gamma0, epsilon, first.N_prime_lower)
    literal = horizon_N2(beta, gamma, gamma0, epsilon, first.N_prime_lower, literal_c=c)
    N_lower = max(math.floor(first.N1) + 1, math.ceil(second.N2))
    margin_bound = stability_margin_bound(gamma0)

    bundle = CertificateBundle(
        C=C, sigma=sigma, M=controllability.M, gamma0=gamma0, c=c, d=d, epsilon=epsilon,
        gamma_V=gv, gamma=gamma, beta=beta, rho_gamma=first.rho,
        gamma_c_lower=first.gamma_c_lower, gamma_c_upper=first.gamma_c_upper,
        gamma_lower=second.gamma_lower,
        N_prime=first.N_prime, N_prime_lower=first.N_prime_lower, N1=first.N1,
        N_double_prime=second.N_double_prime, N_double_prime_lower=second.N_double_prime_lower,
        N2=second.N2,
        N_double_prime_literal_c=literal.N_double_prime,
        N_double_prime_lower_literal_c=literal.N_double_prime_lower,
        N2_literal_c=literal.N2,
        N_lower=N_lower,
        stability_margin_bound=margin_bound,
        stability_margin_passed=bool(0.0 <= c < margin_bound),
    )
    if N_user is not None:
        bundle = bundle.model_copy(update={
            "N_user": N_user,
            "alpha1_user": bundle.alpha1(N_user) if N_user >= bundle.N_prime else None,
            "alpha2_user": bundle.alpha2(N_user) if N_user >= bundle.N_double_prime else None,
            "N_user_certified": N_user >= N_lower,
        })

    if not bundle.stability_margin_passed:
        logger.warning(f"c = {c:.4g} does not satisfy the iterated-controller margin "
                       f"{margin_bound:.4g}; the MPC certificates still apply")
    logger.info(f"certificates: N1={bundle.N1:.4g}, N2={bundle.N2:.4g}, N_lower={N_lower}")
    return bundle


def performance_bound(bundle: CertificateBundle, V_N_x0: float, N: int) -> float:
    """J(x0, kappa_N) <= V_N(x0) / alpha1(N, c)."""
    a1 = bundle.alpha1(N)
    if a1 <= 0.0:
        raise BoundInvalidError(f"alpha1({N}, c) = {a1:.6g} <= 0, horizon below the stability threshold")
    return V_N_x0 / a1


def performance_ratio(bundle: CertificateBundle, N: int) -> float:
    """alpha2(N) / alpha1(N, c), the factor between closed-loop cost and V_inf."""
    a1 = bundle.alpha1(N)
    if a1 <= 0.0:
        raise BoundInvalidError(f"alpha1({N}, c) = {a1:.6g} <= 0, horizon below the stability threshold")
    return bundle.alpha2(N) / a1

"""
Exact enumeration over small discrete models.

A model is four probability tables: the data distribution p_D(x), the prior
p(z), the likelihood p(x|z) and an encoder q(z|x). Every bound and divergence
is computed by summation, including the k-sample importance-weighted bounds,
which enumerate all |Z|^k tuples.

Divergences are taken at fixed generator parameters:

    D_AVB        = −L_VAE
    D_AAE        = −L_AAE
    D_IW-AVB(k)  = −L_IWAE(k)
    D_IW-AAE(k)  = −E_{p_D} E_{q(z|x)^k} log (1/k) Σ p(x|z_i) p(z_i) / q(z_i)

D_IW-AAE is the IW-AAE objective with the optimal latent discriminator
T*(z) = log q(z) − log p(z) substituted; at k = 1 it equals D_AAE.

The joint KL in the AAE decomposition is anchored on the data distribution,
E_{p_D} KL(q(z|x) ‖ p(z|x)); the unanchored KL(q(x,z) ‖ p(x,z)) is reported
alongside it.
"""
import math
from typing import Dict, List, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import special

from configuration import TheoryConfig
from errors import EnumerationBudgetError
from events import TheorySuiteChecked
from logger import logger
from tensor import RandomSource

ENUMERATION_BUDGET = 1_000_000
_ROW_TOLERANCE = 1e-12


class EnumerableModel(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    p_data: np.ndarray
    prior: np.ndarray
    likelihood: np.ndarray
    posterior: np.ndarray

    @model_validator(mode="after")
    def _valid_tables(self) -> "EnumerableModel":
        x_size, z_size = self.p_data.size, self.prior.size
        if self.likelihood.shape != (z_size, x_size):
            raise ValueError(f"likelihood table must be (|Z|, |X|) = {(z_size, x_size)}, got {self.likelihood.shape}")
        if self.posterior.shape != (x_size, z_size):
            raise ValueError(f"posterior table must be (|X|, |Z|) = {(x_size, z_size)}, got {self.posterior.shape}")
        for name in ("p_data", "prior", "likelihood", "posterior"):
            table = getattr(self, name)
            if np.any(table < 0.0):
                raise ValueError(f"{name} has negative entries")
            if np.any(np.abs(table.sum(axis=-1) - 1.0) > _ROW_TOLERANCE):
                raise ValueError(f"{name} rows must sum to 1 within {_ROW_TOLERANCE}")
        return self

    @property
    def x_size(self) -> int:
        return self.p_data.size

    @property
    def z_size(self) -> int:
        return self.prior.size

    @property
    def joint(self) -> np.ndarray:
        """p(x, z) as an (|X|, |Z|) table."""
        return (self.prior[:, None] * self.likelihood).T

    @property
    def marginal(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    @property
    def aggregated_posterior(self) -> np.ndarray:
        return self.p_data @ self.posterior

    @property
    def true_posterior(self) -> np.ndarray:
        return self.joint / self.marginal[:, None]

    def with_posterior(self, posterior: np.ndarray) -> "EnumerableModel":
        return EnumerableModel(p_data=self.p_data, prior=self.prior, likelihood=self.likelihood, posterior=posterior)


class ExactQuantities(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    log_px: np.ndarray
    expected_log_px: float
    reconstruction: float
    l_vae: float
    l_aae: float
    l_iwae: Dict[int, float]
    mutual_information: float
    kl_joint: float
    kl_joint_unanchored: float
    kl_aggregate_prior: float
    aae_vae_gap: float
    d_avb: float
    d_aae: float
    d_iwavb: Dict[int, float]
    d_iwaae: Dict[int, float]
    w_dagger: float
    w_ddagger: Dict[int, float]
    autoencoder_loglik: float


class OrderingReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    holds: bool
    min_margin: float
    violations: List[str]
    values: Dict[str, float]
    exceptions: List[str] = Field(default_factory=list)


# table helpers

def _log(table: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(table)


def _expect(weights: np.ndarray, values: np.ndarray) -> float:
    """Σ weights·values with 0·(±inf or nan) treated as 0."""
    with np.errstate(invalid="ignore"):
        return float(np.sum(np.where(weights > 0.0, weights * values, 0.0)))


def _kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return special.rel_entr(p, q).sum(axis=-1)


def _tuples(z_size: int, k: int) -> np.ndarray:
    count = z_size ** k
    if count > ENUMERATION_BUDGET:
        raise EnumerationBudgetError(f"|Z|^k = {z_size}^{k} = {count} tuples exceeds the budget of "
                                     f"{ENUMERATION_BUDGET}; use a smaller k")
    return np.stack(np.unravel_index(np.arange(count), (z_size,) * k), axis=1)


def importance_weighted_expectation(sampling: np.ndarray, log_terms: np.ndarray, k: int) -> np.ndarray:
    """
    Per x: E_{z_1..z_k ~ sampling(z|x)} log (1/k) Σ_i exp(log_terms[x, z_i]),
    summed over every k-tuple.
    """
    idx = _tuples(sampling.shape[1], k)
    log_sampling = _log(sampling)
    with np.errstate(invalid="ignore", over="ignore"):
        tuple_log_prob = log_sampling[:, idx].sum(axis=2)
        inner = special.logsumexp(log_terms[:, idx], axis=2) - math.log(k)
        prob = np.exp(tuple_log_prob)
        return np.where(prob > 0.0, prob * inner, 0.0).sum(axis=1)


def _log_weights(model: EnumerableModel) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return _log(model.joint) - _log(model.posterior)


def _latent_log_weights(model: EnumerableModel) -> np.ndarray:
    """log p(x, z) − log q(z): the IW-AAE weights once T*(z) is substituted."""
    with np.errstate(invalid="ignore"):
        return _log(model.joint) - _log(model.aggregated_posterior)[None, :]


# exact quantities

def exact_quantities(model: EnumerableModel, k: Union[int, Sequence[int]] = 1) -> ExactQuantities:
    ks = [k] if isinstance(k, int) else list(k)
    q, p_d = model.posterior, model.p_data
    log_lik = _log(model.likelihood.T)
    log_px = _log(model.marginal)

    reconstruction = _expect(p_d, np.array([_expect(q[x], log_lik[x]) for x in range(model.x_size)]))
    aggregate = model.aggregated_posterior
    kl_post_prior = _expect(p_d, _kl(q, model.prior[None, :]))
    kl_aggregate_prior = float(_kl(aggregate, model.prior))
    mutual_information = _expect(p_d, _kl(q, aggregate[None, :]))
    kl_joint = _expect(p_d, _kl(q, model.true_posterior))
    kl_data_marginal = float(_kl(p_d, model.marginal))

    l_vae = reconstruction - kl_post_prior
    l_aae = reconstruction - kl_aggregate_prior
    log_w, log_w_latent = _log_weights(model), _latent_log_weights(model)
    l_iwae, l_iwaae, w_ddagger = {}, {}, {}
    for kk in ks:
        l_iwae[kk] = _expect(p_d, importance_weighted_expectation(q, log_w, kk))
        l_iwaae[kk] = _expect(p_d, importance_weighted_expectation(q, log_w_latent, kk))
        w_ddagger[kk] = _expect(p_d, importance_weighted_expectation(q, log_lik, kk))
    with np.errstate(divide="ignore"):
        autoencoder = _expect(p_d, np.log(np.sum(q * model.likelihood.T, axis=1)))

    return ExactQuantities(
        log_px=log_px,
        expected_log_px=_expect(p_d, log_px),
        reconstruction=reconstruction,
        l_vae=l_vae,
        l_aae=l_aae,
        l_iwae=l_iwae,
        mutual_information=mutual_information,
        kl_joint=kl_joint,
        kl_joint_unanchored=kl_joint + kl_data_marginal,
        kl_aggregate_prior=kl_aggregate_prior,
        aae_vae_gap=l_aae - l_vae,
        d_avb=-l_vae,
        d_aae=-l_aae,
        d_iwavb={kk: -v for kk, v in l_iwae.items()},
        d_iwaae={kk: -v for kk, v in l_iwaae.items()},
        w_dagger=reconstruction,
        w_ddagger=w_ddagger,
        autoencoder_loglik=autoencoder,
    )


# model generators

def random_model(rng: RandomSource, x_size: int = 4, z_size: int = 3, alpha: float = 1.0) -> EnumerableModel:
    g = rng.generator
    return EnumerableModel(p_data=g.dirichlet(np.full(x_size, alpha)),
                           prior=g.dirichlet(np.full(z_size, alpha)),
                           likelihood=g.dirichlet(np.full(x_size, alpha), size=z_size),
                           posterior=g.dirichlet(np.full(z_size, alpha), size=x_size))


def constrained_model(rng: RandomSource, x_size: int = 4, z_size: int = 3, alpha: float = 1.0) -> EnumerableModel:
    """Random model whose prior equals its aggregated posterior."""
    base = random_model(rng, x_size, z_size, alpha)
    prior = base.aggregated_posterior
    return EnumerableModel(p_data=base.p_data, prior=prior / prior.sum(), likelihood=base.likelihood,
                           posterior=base.posterior)


def uniform_model(x_size: int = 2, z_size: int = 2) -> EnumerableModel:
    return EnumerableModel(p_data=np.full(x_size, 1.0 / x_size), prior=np.full(z_size, 1.0 / z_size),
                           likelihood=np.full((z_size, x_size), 1.0 / x_size),
                           posterior=np.full((x_size, z_size), 1.0 / z_size))


def posterior_grid(model: EnumerableModel, points: int, rng: RandomSource, alpha: float = 1.0) -> List[np.ndarray]:
    """The exact posterior, the model's own encoder, the prior-for-every-x table, then random tables."""
    exact = model.true_posterior
    grid = [exact / exact.sum(axis=1, keepdims=True), model.posterior, np.tile(model.prior, (model.x_size, 1))]
    while len(grid) < points:
        grid.append(rng.generator.dirichlet(np.full(model.z_size, alpha), size=model.x_size))
    return grid[:points]


# checks

def check_theorem1(model: EnumerableModel) -> float:
    """|L_AAE − (E log p(x) + I[x,z] − E_{p_D} KL(q(z|x) ‖ p(z|x)))|."""
    e = exact_quantities(model)
    return abs(e.l_aae - (e.expected_log_px + e.mutual_information - e.kl_joint))


def check_theorem2(model: EnumerableModel) -> float:
    """|(L_AAE − L_VAE) − E_{p_D} KL(q(z|x) ‖ q(z))|."""
    e = exact_quantities(model)
    return abs((e.l_aae - e.l_vae) - e.mutual_information)


def _chain(values: Sequence[float], names: Sequence[str], increasing: bool, tolerance: float,
           violations: List[str]) -> float:
    margin = math.inf
    for (a, name_a), (b, name_b) in zip(zip(values, names), zip(values[1:], names[1:])):
        step = (b - a) if increasing else (a - b)
        margin = min(margin, step)
        if step < -tolerance:
            violations.append(f"{name_a}={a:.15g} vs {name_b}={b:.15g}")
    return margin


def check_k_monotonicity(model: EnumerableModel, k_list: Sequence[int], tolerance: float = 1e-12) -> OrderingReport:
    """
    L_IWAE(k) non-decreasing and capped by E log p(x); D_IW-AVB(k) non-increasing
    down to −E log p(x); D_IW-AAE(k) non-increasing from D_AAE.

    The −E log p(x) − I floor for D_IW-AAE is not a bound at fixed tables, so
    its margin is returned in ``values`` and never counted as a violation.
    """
    ks = sorted(k_list)
    e = exact_quantities(model, ks)
    violations: List[str] = []
    names = [f"k={k}" for k in ks]
    margins = [
        _chain([e.l_iwae[k] for k in ks] + [e.expected_log_px], names + ["log p"], True, tolerance, violations),
        _chain([e.d_iwavb[k] for k in ks] + [-e.expected_log_px], names + ["-log p"], False, tolerance, violations),
        _chain([e.d_aae] + [e.d_iwaae[k] for k in ks], ["D_AAE"] + names, False, tolerance, violations),
    ]
    if abs(e.l_iwae.get(1, e.l_vae) - e.l_vae) > tolerance:
        violations.append(f"L_IWAE(1)={e.l_iwae[1]:.15g} differs from L_VAE={e.l_vae:.15g}")
    values = {f"l_iwae_{k}": e.l_iwae[k] for k in ks}
    values.update({f"d_iwaae_{k}": e.d_iwaae[k] for k in ks})
    values.update({"expected_log_px": e.expected_log_px, "l_vae": e.l_vae,
                   "iwaae_floor_margin": e.d_iwaae[ks[-1]] + e.expected_log_px + e.mutual_information})
    return OrderingReport(holds=not violations, min_margin=min(margins), violations=violations, values=values)


def check_divergence_ordering(model: EnumerableModel, k: int, grid_points: int, rng: RandomSource,
                              tolerance: float = 1e-12) -> OrderingReport:
    """
    Divergence ordering over a grid of posterior tables standing in for the
    posterior family.

    At every grid point D_IW-AAE ≤ D_AAE ≤ D_AVB, D_IW-AVB ≤ D_AVB and the
    reconstruction Jensen chain must hold. D_IW-AAE ≤ D_IW-AVB compares
    infima over the family, so it is asserted on the grid infima; grid points
    where it fails pointwise are listed in ``exceptions``. The grid always
    holds the exact posterior.
    """
    violations: List[str] = []
    exceptions: List[str] = []
    margin = math.inf
    infima = {"d_avb": math.inf, "d_aae": math.inf, "d_iwavb": math.inf, "d_iwaae": math.inf}
    for i, table in enumerate(posterior_grid(model, grid_points, rng)):
        e = exact_quantities(model.with_posterior(table), k)
        label = f"grid[{i}]"
        margin = min(
            margin,
            _chain([e.d_iwaae[k], e.d_aae, e.d_avb], [f"{label} D_IW-AAE", "D_AAE", "D_AVB"], True, tolerance,
                   violations),
            _chain([e.d_iwavb[k], e.d_avb], [f"{label} D_IW-AVB", "D_AVB"], True, tolerance, violations),
            _chain([e.w_dagger, e.w_ddagger[k], e.autoencoder_loglik],
                   [f"{label} W_dagger", "W_ddagger", "AE loglik"], True, tolerance, violations),
        )
        _chain([e.d_iwaae[k], e.d_iwavb[k]], [f"{label} D_IW-AAE", "D_IW-AVB"], True, tolerance, exceptions)
        infima["d_avb"] = min(infima["d_avb"], e.d_avb)
        infima["d_aae"] = min(infima["d_aae"], e.d_aae)
        infima["d_iwavb"] = min(infima["d_iwavb"], e.d_iwavb[k])
        infima["d_iwaae"] = min(infima["d_iwaae"], e.d_iwaae[k])
    margin = min(
        margin,
        _chain([infima["d_iwaae"], infima["d_aae"], infima["d_avb"]], ["inf D_IW-AAE", "inf D_AAE", "inf D_AVB"],
               True, tolerance, violations),
        _chain([infima["d_iwaae"], infima["d_iwavb"], infima["d_avb"]], ["inf D_IW-AAE", "inf D_IW-AVB", "inf D_AVB"],
               True, tolerance, violations),
    )
    if exceptions:
        logger.debug(f"D_IW-AAE above D_IW-AVB at {len(exceptions)} of {grid_points} grid points")
    return OrderingReport(holds=not violations, min_margin=margin, violations=violations, values=infima,
                          exceptions=exceptions)


class SubstitutionReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int
    iwavb_value: float
    iwae_value: float
    iwavb_residual: float
    iwaae_value: float
    primal_marginal: float
    iwaae_residual: float
    primal_conditional: float


def adversarial_value(model: EnumerableModel, k: int, log_ratio: np.ndarray) -> float:
    """E_{p_D} E_{q(z|x)^k} log (1/k) Σ p(x|z_i) exp(−T(x, z_i)) for a (|X|, |Z|) table T."""
    log_terms = _log(model.likelihood.T) - log_ratio
    return _expect(model.p_data, importance_weighted_expectation(model.posterior, log_terms, k))


def _primal_value(model: EnumerableModel, k: int, reference: np.ndarray) -> float:
    """
    E_{p_D} E_{q(z|x)^k} (1/k) Σ_i log [p(x, z_i) / q_IW(z_i)] with
    q_IW(z_i) = p(x, z_i) / ((1/k) Σ_j p(x, z_j) / reference(z_j)); ``reference``
    is an (|X|, |Z|) table.
    """
    idx = _tuples(model.z_size, k)
    log_joint = _log(model.joint)
    with np.errstate(invalid="ignore", over="ignore"):
        log_ratio = log_joint - _log(reference)
        normalizer = special.logsumexp(log_ratio[:, idx], axis=2) - math.log(k)
        log_q_iw = log_joint[:, idx] - normalizer[:, :, None]
        inner = np.mean(log_joint[:, idx] - log_q_iw, axis=2)
        prob = np.exp(_log(model.posterior)[:, idx].sum(axis=2))
        per_x = np.where(prob > 0.0, prob * inner, 0.0).sum(axis=1)
    return _expect(model.p_data, per_x)


def check_optimal_discriminator_substitution(model: EnumerableModel, k: int, perturbation: float = 0.0) -> SubstitutionReport:
    """
    Plugs T* = log q(z|x) − log p(z) into the IW-AVB objective and
    T*(z) = log q(z) − log p(z) into the IW-AAE objective. ``perturbation`` is
    added to both T* tables to confirm the check's sensitivity.
    """
    e = exact_quantities(model, k)
    log_prior = _log(model.prior)[None, :]
    with np.errstate(invalid="ignore"):
        t_joint = _log(model.posterior) - log_prior + perturbation
        t_latent = np.tile(_log(model.aggregated_posterior)[None, :] - log_prior, (model.x_size, 1)) + perturbation
    iwavb = adversarial_value(model, k, t_joint)
    iwaae = adversarial_value(model, k, t_latent)
    aggregate_table = np.tile(model.aggregated_posterior, (model.x_size, 1))
    primal_marginal = _primal_value(model, k, aggregate_table)
    return SubstitutionReport(k=k, iwavb_value=iwavb, iwae_value=e.l_iwae[k], iwavb_residual=abs(iwavb - e.l_iwae[k]),
                              iwaae_value=iwaae, primal_marginal=primal_marginal,
                              iwaae_residual=abs(iwaae - primal_marginal),
                              primal_conditional=_primal_value(model, k, model.posterior))


# suites

def _suite(name: str, instances: int, residuals: List[float], violations: int) -> TheorySuiteChecked:
    worst = max(residuals) if residuals else 0.0
    return TheorySuiteChecked(suite=name, instances=instances, max_residual=worst, violations=violations,
                              passed=violations == 0)


def run_theory_suites(config: TheoryConfig, seed: int) -> List[TheorySuiteChecked]:
    """Every identity and inequality check on seeded random models."""
    rng = RandomSource(seed)
    tol = config.tolerance
    models = [random_model(rng, config.x_size, config.z_size, config.dirichlet_alpha) for _ in range(config.n_models)]
    constrained = [constrained_model(rng, config.x_size, config.z_size, config.dirichlet_alpha)
                   for _ in range(config.n_models)]
    results = []

    for name, check in (("theorem1", check_theorem1), ("theorem2", check_theorem2)):
        residuals = [check(m) for m in models + constrained]
        results.append(_suite(name, len(residuals), residuals, sum(r >= tol for r in residuals)))

    residuals = []
    for m in models:
        for k in config.substitution_k:
            report = check_optimal_discriminator_substitution(m, k)
            residuals.extend([report.iwavb_residual, report.iwaae_residual])
    results.append(_suite("substitution", len(models) * len(config.substitution_k), residuals,
                          sum(r >= tol for r in residuals)))

    reports = [check_k_monotonicity(m, config.k_list) for m in models]
    results.append(TheorySuiteChecked(suite="k_monotonicity", instances=len(reports),
                                      max_residual=min(r.min_margin for r in reports),
                                      violations=sum(not r.holds for r in reports),
                                      passed=all(r.holds for r in reports)))

    reports = [check_divergence_ordering(m, config.ordering_k, config.grid_points, rng)
               for m in models[:config.ordering_models]]
    results.append(TheorySuiteChecked(suite="divergence_ordering", instances=len(reports),
                                      max_residual=min(r.min_margin for r in reports),
                                      violations=sum(not r.holds for r in reports),
                                      passed=all(r.holds for r in reports)))

    jensen_violations, margins = 0, []
    for m in models + constrained:
        e = exact_quantities(m, config.k_list)
        chain = [e.w_dagger] + [e.w_ddagger[k] for k in sorted(config.k_list)] + [e.autoencoder_loglik]
        steps = np.diff(chain)
        margins.append(float(steps.min()))
        jensen_violations += int(np.any(steps < -1e-12))
    results.append(TheorySuiteChecked(suite="jensen", instances=len(margins), max_residual=min(margins),
                                      violations=jensen_violations, passed=jensen_violations == 0))

    for suite in results:
        level = logger.info if suite.passed else logger.error
        level(f"{suite.suite}: {suite.instances} instances, residual/margin {suite.max_residual:.3e}, "
              f"{suite.violations} violations")
    return results

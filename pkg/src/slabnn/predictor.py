"""Prediction regimes and calibrated abstention.

Four fitted-model readouts, named by how indicators (first) and slab
weights (second) are handled:

* sim/sim : fully Bayesian model averaging; R replicates, each with
  hard Bernoulli indicators (the temperature-zero limit) and fresh slab
  draws; class probabilities are averaged across replicates.
* all/mea : the deterministic posterior-mean network, weights
  alpha_hat * kappa, every connection kept.
* med/sim : the median probability model; the mask alpha_hat > 1/2 is
  fixed and slab weights are redrawn per replicate.
* med/mea : the median mask applied to the slab means; deterministic.

all/sim (every connection kept but slabs sampled) only makes sense for
fixed-dense states and is rejected otherwise.  Prediction never uses
the Concrete relaxation: indicators are exact Bernoulli draws.

Replicate r consumes stream (seed, stream_id + 1 + r) derived from the
passed rng's key, so the first replicates of an R=1 and an R=10 call
with the same rng are identical, and the inclusion-probability Monte
Carlo (correlated families) uses the passed stream itself.  A result
records the masks each replicate used, which is what the density level
summarizes (union across replicates, biases included).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .elbo import forward_logits
from .errors import ConfigError, DomainError, ShapeError
from .model import (Family, SampledLayer, SampledNetwork, VariationalState,
                    marginal_inclusion, median_model, posterior_mean_weights,
                    sample_network)
from .numkernel import RngStream, log_softmax

__all__ = [
    "PredictionMode",
    "PredictiveResult",
    "DoubtDecisions",
    "predict",
    "classify_with_doubt",
    "density_level",
    "export_predictions_csv",
    "DOUBT_THRESHOLD",
]

GAMMA_RULES = ("sim", "all", "med")
BETA_RULES = ("sim", "mea")

# Classify only when the top model-averaged probability exceeds this.
DOUBT_THRESHOLD = 0.95


@dataclass(frozen=True)
class PredictionMode:
    """(gamma_rule, beta_rule, replicates); see module docstring."""

    gamma: str
    beta: str
    replicates: int = 1

    def __post_init__(self):
        if self.gamma not in GAMMA_RULES:
            raise ConfigError(f"gamma rule must be one of {GAMMA_RULES}, got {self.gamma!r}")
        if self.beta not in BETA_RULES:
            raise ConfigError(f"beta rule must be one of {BETA_RULES}, got {self.beta!r}")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")

    @property
    def deterministic(self) -> bool:
        return self.beta == "mea"


@dataclass
class PredictiveResult:
    """Averaged class probabilities plus per-replicate detail."""

    probs: np.ndarray                # (n, classes), rows sum to 1
    replicate_probs: np.ndarray      # (R, n, classes) or None for deterministic modes
    masks: list                      # per replicate: list of per-layer 0/1 masks


@dataclass
class DoubtDecisions:
    """Argmax decisions with abstention; -1 marks an abstained row."""

    decisions: np.ndarray
    threshold: float

    @property
    def classified(self) -> np.ndarray:
        return np.nonzero(self.decisions >= 0)[0]

    @property
    def n_classified(self) -> int:
        return int(np.sum(self.decisions >= 0))

    @property
    def n_abstained(self) -> int:
        return int(np.sum(self.decisions < 0))


def _forward_probs_from_weights(state, weights, features):
    """Softmax probabilities of a deterministic weight assignment."""
    layers = [
        SampledLayer(alpha=np.ones_like(w), gamma_tilde=np.ones_like(w), beta=w,
                     effective=w, eps=np.zeros_like(w), tau=np.zeros_like(w),
                     fixed_indicators=True)
        for w in weights
    ]
    net = SampledNetwork(layers=layers, spec=state.spec, family=state.family,
                         delta=0.0, mode="hard")
    logits, _ = forward_logits(net, features)
    return np.exp(log_softmax(logits))


def predict(state: VariationalState, features, mode: PredictionMode,
            rng: RngStream = None, alpha_mc: int = 1000) -> PredictiveResult:
    """Class probabilities for a design block under the given mode.

    Needs an rng whenever anything is sampled (sim replicates) or the
    inclusion probabilities require Monte Carlo (correlated families);
    deterministic mean-field modes run without one.  Given the same
    rng key the result is reproducible draw for draw.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != state.spec.widths[0]:
        raise ShapeError(f"features must be (n, {state.spec.widths[0]}), got {x.shape}")
    if mode.gamma == "all" and mode.beta == "sim" and not state.prior.fixed_dense:
        raise ConfigError(
            "all/sim keeps every connection while sampling slabs, which this "
            "model family only defines for fixed-dense states"
        )
    needs_alpha = mode.gamma == "med" or (mode.gamma == "all" and mode.beta == "mea")
    needs_mc_alpha = (needs_alpha and state.family is not Family.MF
                      and not state.prior.fixed_dense)
    needs_rng = mode.beta == "sim" or mode.gamma == "sim" or needs_mc_alpha
    if needs_rng and rng is None:
        raise DomainError("this prediction mode needs an rng")

    alpha_hat = None
    if needs_alpha:
        alpha_hat = marginal_inclusion(state, n_mc=alpha_mc, rng=rng)

    if mode.beta == "mea":
        if mode.gamma == "all":
            weights = posterior_mean_weights(state, alpha_hat=alpha_hat)
            masks = [[np.ones(layer.shape) for layer in state.layers]]
        else:
            mask = median_model(state, alpha_hat=alpha_hat)
            weights = [m * layer.kappa for m, layer in zip(mask, state.layers)]
            masks = [mask]
        probs = _forward_probs_from_weights(state, weights, x)
        return PredictiveResult(probs=probs, replicate_probs=None, masks=masks)

    # Sampled slabs: one derived stream per replicate.
    mask = median_model(state, alpha_hat=alpha_hat) if mode.gamma == "med" else None
    rep_probs = []
    rep_masks = []
    for r in range(mode.replicates):
        sub = RngStream(rng.seed, rng.stream_id + 1 + r)
        if mode.gamma == "med":
            net = sample_network(state, 0.0, "hard", sub, fixed_masks=mask)
            used = mask
        elif mode.gamma == "all":  # fixed_dense only, checked above
            net = sample_network(state, 0.0, "hard", sub)
            used = [np.ones(layer.shape) for layer in state.layers]
        else:
            net = sample_network(state, 0.0, "hard", sub)
            used = [lay.gamma_tilde.copy() for lay in net.layers]
        logits, _ = forward_logits(net, x)
        rep_probs.append(np.exp(log_softmax(logits)))
        rep_masks.append(used)
    stacked = np.stack(rep_probs, axis=0)
    return PredictiveResult(probs=stacked.mean(axis=0), replicate_probs=stacked,
                            masks=rep_masks)


def classify_with_doubt(probs, threshold: float = DOUBT_THRESHOLD) -> DoubtDecisions:
    """Argmax decisions, abstaining when the top probability is not above threshold.

    The comparison is strict, so a top probability exactly at the
    threshold abstains; ties pick the lowest class index.
    """
    p = np.ascontiguousarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError("probs must be a (n, classes) matrix")
    if not (0.0 <= threshold < 1.0):
        raise DomainError("threshold must lie in [0, 1)")
    decisions = np.argmax(p, axis=1).astype(np.int64)
    decisions[np.max(p, axis=1) <= threshold] = -1
    return DoubtDecisions(decisions=decisions, threshold=float(threshold))


def density_level(masks) -> float:
    """Fraction of connections used by at least one replicate.

    ``masks`` is the PredictiveResult.masks list (per replicate, per
    layer); bias rows count like any other connection.  Deterministic
    all-connection modes give exactly 1.0.
    """
    if not masks:
        raise DomainError("need at least one replicate's masks")
    union = [np.zeros_like(m) for m in masks[0]]
    for rep in masks:
        if len(rep) != len(union):
            raise ShapeError("replicates disagree on the number of layers")
        for u, m in zip(union, rep):
            np.maximum(u, m, out=u)
    used = sum(float(np.sum(u)) for u in union)
    total = sum(u.size for u in union)
    return used / total


def export_predictions_csv(path, result: PredictiveResult,
                           decisions: DoubtDecisions = None):
    """Write one row per observation: probabilities, decision, abstain flag."""
    probs = result.probs
    n, c = probs.shape
    with open(path, "w") as fh:
        cols = ["row"] + [f"p_class{j}" for j in range(c)] + ["decision", "abstained"]
        fh.write(",".join(cols) + "\n")
        for i in range(n):
            if decisions is None:
                dec, flag = int(np.argmax(probs[i])), 0
            else:
                d = int(decisions.decisions[i])
                dec, flag = (d, 0) if d >= 0 else (-1, 1)
            row = [str(i)] + [repr(float(v)) for v in probs[i]] + [str(dec), str(flag)]
            fh.write(",".join(row) + "\n")

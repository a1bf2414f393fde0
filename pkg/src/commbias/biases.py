"""Inductive biases for emergent communication and their diagnostics.

Positive signalling pushes a speaker's batch-average message distribution
towards high entropy while holding each per-state message distribution near a
target entropy, so messages end up informative about the state. Positive
listening compares a listener's policy with a counterfactual pass in which
the incoming messages are zeroed and rewards the gap between the two.

Loss functions take probabilities shaped ``[T, B, K]`` (or ``[B, K]`` for a
single step). They sum over time and over the K outcomes and average over
the batch. All entropies are Shannon entropies in nats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nets import one_hot

EPS = 1e-10
ALL_MESSAGES = "all-messages-zeroed"
FINAL_MESSAGE = "final-message-zeroed"


@dataclass(frozen=True)
class BiasTerms:
    l_ps: float = 0.0
    l_pl: float = 0.0
    l_ce: float = 0.0
    marginal_entropy: float = float("nan")
    conditional_entropy: float = float("nan")
    cic: float = float("nan")
    mutual_information: float = float("nan")


# ------------------------------------------------------------------ numpy side

def _check_probs(p: np.ndarray, what: str = "distribution") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise ValueError(f"{what} must have a non-empty last axis")
    if np.any(p < 0):
        raise ValueError(f"{what} has negative entries")
    return p


def entropy(p) -> np.ndarray:
    """Entropy of the distribution(s) along the last axis."""
    p = _check_probs(p)
    return -(p * np.log(np.maximum(p, EPS))).sum(axis=-1)


def message_mutual_information(policies) -> float:
    """Plug-in estimate of I(m; x) from per-state message policies: the entropy of
    the average policy minus the average per-state entropy."""
    p = _check_probs(policies, "message policies")
    rows = p.reshape(-1, p.shape[-1])
    if len(rows) == 0:
        raise ValueError("empty batch of message policies")
    return float(entropy(rows.mean(axis=0)) - entropy(rows).mean())


def kl_divergence(p, q) -> np.ndarray:
    p = _check_probs(p)
    q = _check_probs(q)
    return (p * (np.log(np.maximum(p, EPS)) - np.log(np.maximum(q, EPS)))).sum(axis=-1)


def estimate_cic(actual, counterfactual) -> float:
    """Mean KL between message-conditioned and message-ablated action policies."""
    actual = np.asarray(actual.values if isinstance(actual, Tensor) else actual)
    counterfactual = np.asarray(counterfactual.values if isinstance(counterfactual, Tensor)
                                else counterfactual)
    if actual.shape != counterfactual.shape:
        raise ShapeError(f"cic: shapes {actual.shape} and {counterfactual.shape} differ")
    return float(np.mean(kl_divergence(actual, counterfactual)))


def cic_per_step(actual, counterfactual) -> np.ndarray:
    """Per-row KL, kept in the leading shape (e.g. [T, B])."""
    actual = np.asarray(actual)
    counterfactual = np.asarray(counterfactual)
    if actual.shape != counterfactual.shape:
        raise ShapeError(f"cic: shapes {actual.shape} and {counterfactual.shape} differ")
    return kl_divergence(actual, counterfactual)


def social_influence_reward(listener_cic, weight: float) -> np.ndarray:
    """Intrinsic speaker reward: ``weight`` times the listener's per-step CIC.

    This baseline is centralized: the speaker's reward reads the listener's
    policies.
    """
    return float(weight) * np.asarray(listener_cic, dtype=np.float64)


# --------------------------------------------------------------- tensor losses

def _as_steps(x: Tensor, what: str) -> Tensor:
    if x.values.ndim == 2:
        return ad.reshape(x, (1,) + x.shape)
    if x.values.ndim != 3:
        raise ShapeError(f"{what}: expected [T, B, K] or [B, K], got {x.shape}")
    return x


def _reduce(per_row: Tensor) -> Tensor:
    """[T, B] -> scalar: sum over time, mean over the batch."""
    return ad.mean(ad.sum(per_row, axis=0))


def entropy_tensor(p: Tensor) -> Tensor:
    """Row entropies of a probability tensor along its last axis."""
    return -ad.sum(ad.multiply(p, ad.log(p)), axis=-1)


def positive_signalling_loss(message_probs: Tensor, h_target: float,
                             lambda_marginal: float, lambda_conditional: float):
    """Returns ``(loss, marginal_entropy, mean_conditional_entropy)``.

    loss = -lambda_marginal * H(mean policy) + lambda_conditional * mean (H_t - h_target)^2,
    with the mean policy taken over every row of the batch.
    """
    p = ad.as_tensor(message_probs)
    k = p.shape[-1]
    if not 0.0 <= h_target <= np.log(k) + 1e-12:
        raise ValueError(f"h_target {h_target} outside [0, ln {k}]")
    rows = ad.reshape(p, (-1, k))
    marginal = ad.mean(rows, axis=0)
    h_marg = entropy_tensor(marginal)
    h_rows = entropy_tensor(rows)
    dev = ad.mean(ad.square(ad.subtract(h_rows, h_target)))
    loss = ad.add(ad.multiply(h_marg, -float(lambda_marginal)),
                  ad.multiply(dev, float(lambda_conditional)))
    return loss, float(h_marg.values), float(h_rows.values.mean())


def cross_entropy_fit_loss(actual_probs: Tensor, counterfactual_probs: Tensor) -> Tensor:
    """Trains the counterfactual pass to predict the actual policy.

    Gradients reach only ``counterfactual_probs``.
    """
    a = _as_steps(ad.as_tensor(actual_probs), "cross-entropy")
    c = _as_steps(ad.as_tensor(counterfactual_probs), "cross-entropy")
    if a.shape != c.shape:
        raise ShapeError(f"cross-entropy: shapes {a.shape} and {c.shape} differ")
    per_row = ad.sum(ad.multiply(ad.stop_gradient(a), ad.log(c)), axis=-1)
    return -_reduce(per_row)


def positive_listening_loss(actual_probs: Tensor, counterfactual_probs: Tensor) -> Tensor:
    """Negative L1 gap between actual and counterfactual policies.

    Gradients reach only ``actual_probs``. Bounded in [-2T, 0].
    """
    a = _as_steps(ad.as_tensor(actual_probs), "positive-listening")
    c = _as_steps(ad.as_tensor(counterfactual_probs), "positive-listening")
    if a.shape != c.shape:
        raise ShapeError(f"positive-listening: shapes {a.shape} and {c.shape} differ")
    per_row = ad.sum(ad.abs(ad.subtract(a, ad.stop_gradient(c))), axis=-1)
    return -_reduce(per_row)


# ------------------------------------------------------ counterfactual rollout

def counterfactual_rollout(net, obs, prev_actions=None, state=None, mode: str = ALL_MESSAGES,
                           params=None, actual_states=None):
    """Action logits of ``net`` with message inputs replaced by zero vectors.

    Single-step listeners (anything with ``logits(obs, message)``) take
    encoded observations ``[B, ...]`` and return ``[B, K]`` logits; both
    modes coincide. Recurrent nets take ``obs`` ``[T, B, ...]`` and
    ``prev_actions`` ``[T, B]`` symbols. In all-messages mode a separate
    hidden state starts from ``state`` and evolves under the zeroed inputs;
    returns ``(logits [T, B, K] list, final state)``. In final-message mode
    step t restarts from the actual state before t, ``actual_states[t]``,
    and only that step's message is zeroed.
    """
    if mode not in (ALL_MESSAGES, FINAL_MESSAGE):
        raise ValueError(f"unknown counterfactual mode {mode!r}")
    if not hasattr(net, "step"):
        x = ad.as_tensor(obs)
        zeros = np.zeros((x.shape[0], net.n_messages), dtype=np.float32)
        return net.logits(x, zeros, params=params)
    obs = list(obs)
    if prev_actions is None or len(prev_actions) != len(obs):
        raise ShapeError("counterfactual rollout: observations and actions differ in length")
    n = np.asarray(obs[0].values if isinstance(obs[0], Tensor) else obs[0]).shape[0]
    zeros = np.zeros((n, net.n_messages), dtype=np.float32)
    out = []
    if mode == ALL_MESSAGES:
        h = state if state is not None else net.initial_state(n)
        for o, pa in zip(obs, prev_actions):
            la, _, _, h = net.step(o, zeros, one_hot(pa, net.n_actions), h, params=params)
            out.append(la)
        return out, h
    if actual_states is None or len(actual_states) != len(obs):
        raise ShapeError("final-message mode needs one actual state per step")
    for o, pa, (h, c) in zip(obs, prev_actions, actual_states):
        hs = (ad.stop_gradient(ad.as_tensor(h)), ad.stop_gradient(ad.as_tensor(c)))
        la, _, _, _ = net.step(o, zeros, one_hot(pa, net.n_actions), hs, params=params)
        out.append(la)
    return out, None

"""Decentralized training: REINFORCE for the digit game, synchronous
advantage actor-critic with V-trace targets for Treasure Hunt.

Every agent owns its parameters, its optimizer and its own tape; the only
thing that crosses between agents is sampled message symbols (and, in the
deliberately centralized social-influence baseline, the listener's influence
measured as an intrinsic speaker reward).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import biases
from .autodiff import Tape, Tensor
from .checkpoint import check_shapes, load_checkpoint, restore_rng, rng_state, save_checkpoint
from .config import ExperimentConfig, classify_good_run  # noqa: F401 - re-exported
from .digits import N_ACTIONS, N_DIGITS, DigitBatch, batch_rewards, load_idx, sample_batch
from .nets import (Adam, DigitAgentNet, NonFiniteError, RMSProp, TreasureAgentNet,
                   clip_by_global_norm, one_hot)
from .treasure import (COLLECTOR, EPISODE_LENGTH, FINDER, NO_MESSAGE, TREASURE, TUNNEL_BOTTOM,
                       ScriptedFinder, TreasureMap, VecTreasureEnv, base_grid)


class RunExistsError(FileExistsError):
    pass


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` by inverse CDF (deterministic given ``rng``)."""
    p = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1])[..., None] * cdf[..., -1:]
    return np.minimum((cdf <= u).sum(axis=-1), p.shape[-1] - 1)


def _policy_entropy(logits: Tensor) -> Tensor:
    """Row entropies computed from logits (stable log-softmax)."""
    return -ad.sum(ad.multiply(ad.softmax(logits), ad.log_softmax(logits)), axis=-1)


def _check_loss(loss: Tensor, what: str, parts: dict) -> None:
    if not np.isfinite(loss.values):
        detail = ", ".join(f"{k}={float(np.asarray(v.values if isinstance(v, Tensor) else v)):.4g}"
                           for k, v in parts.items())
        raise NonFiniteError(f"non-finite {what} loss ({detail})")


# ===================================================================== digit game

@dataclass
class DigitStepResult:
    speaker_loss: Tensor | None
    listener_loss: Tensor
    reward: np.ndarray
    terms: biases.BiasTerms
    parts: dict = field(default_factory=dict)


def digit_losses(cfg: ExperimentConfig, speaker: DigitAgentNet, listener: DigitAgentNet,
                 sp: dict, lp: dict, batch: DigitBatch, rng: np.random.Generator) -> DigitStepResult:
    """Sample one round per batch element and build both agents' losses.

    ``sp``/``lp`` are bound parameter mappings; binding them to separate tapes
    keeps the two updates independent.
    """
    n = len(batch)
    xs = speaker.encode_inputs(batch.speaker_obs)
    xl = listener.encode_inputs(batch.listener_obs)
    ls = speaker.logits(xs, params=sp)
    ps = ad.softmax(ls)
    msgs = sample_categorical(ps.values, rng)
    zeros = np.zeros((n, listener.n_messages), dtype=np.float32)
    msg_in = one_hot(msgs, listener.n_messages) if cfg.communicates else zeros
    ll = listener.logits(xl, msg_in, params=lp)
    pl = ad.softmax(ll)
    acts = sample_categorical(pl.values, rng)
    reward = batch_rewards(batch, acts)

    needs_cf = cfg.pl_weight > 0 or cfg.ce_weight > 0
    cf_logits = listener.logits(xl, zeros, params=lp if needs_cf else None)
    pcf = ad.softmax(cf_logits)
    cic = biases.cic_per_step(pl.values, pcf.values)

    speaker_reward = reward.astype(np.float64)
    if cfg.bias == "si":
        speaker_reward = speaker_reward + biases.social_influence_reward(cic, cfg.si_weight)
    base_l = reward.mean() if cfg.reinforce_baseline else 0.0
    base_s = speaker_reward.mean() if cfg.reinforce_baseline else 0.0

    parts = {}
    h_l = ad.mean(_policy_entropy(ll))
    logp_a = ad.gather(ad.log_softmax(ll), acts)
    pg_l = -ad.mean(ad.multiply(logp_a, (reward - base_l).astype(np.float32)))
    loss_l = pg_l - cfg.action_entropy * h_l
    parts.update(listener_pg=pg_l, listener_entropy=h_l)
    l_pl = l_ce = 0.0
    if cfg.pl_weight > 0:
        t = biases.positive_listening_loss(pl, pcf)
        loss_l = loss_l + cfg.pl_weight * t
        l_pl = float(t.values)
    if cfg.ce_weight > 0:
        t = biases.cross_entropy_fit_loss(pl, pcf)
        loss_l = loss_l + cfg.ce_weight * t
        l_ce = float(t.values)

    loss_s = None
    l_ps = 0.0
    h_marg = float(biases.entropy(ps.values.mean(axis=0)))
    h_cond = float(biases.entropy(ps.values).mean())
    if cfg.communicates:
        h_s = ad.mean(_policy_entropy(ls))
        logp_m = ad.gather(ad.log_softmax(ls), msgs)
        pg_s = -ad.mean(ad.multiply(logp_m, (speaker_reward - base_s).astype(np.float32)))
        loss_s = pg_s - cfg.message_entropy * h_s
        parts.update(speaker_pg=pg_s, speaker_entropy=h_s)
        if cfg.ps_weight > 0:
            t, h_marg, h_cond = biases.positive_signalling_loss(
                ps, cfg.h_target, cfg.lambda_marginal, cfg.lambda_conditional)
            loss_s = loss_s + t
            l_ps = float(t.values)
    terms = biases.BiasTerms(l_ps=l_ps, l_pl=l_pl, l_ce=l_ce, marginal_entropy=h_marg,
                             conditional_entropy=h_cond, cic=float(cic.mean()),
                             mutual_information=biases.message_mutual_information(ps.values))
    return DigitStepResult(loss_s, loss_l, reward, terms, parts)


def _apply(net, opt, tape: Tape, bound: dict, loss: Tensor, cfg, global_step, what: str, parts):
    _check_loss(loss, what, parts)
    ad.backward(tape, loss)
    grads = {k: t.grad for k, t in bound.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {what} parameter {k!r}")
    if cfg.grad_clip > 0:
        grads = clip_by_global_norm(grads, cfg.grad_clip)
    opt.step(net.params, grads, global_step=global_step)


def reinforce_update(cfg: ExperimentConfig, batch: DigitBatch, speaker: DigitAgentNet,
                     listener: DigitAgentNet, opt_s: Adam, opt_l: Adam,
                     rng: np.random.Generator) -> DigitStepResult:
    """One independent REINFORCE step for each agent on a fresh batch of rounds."""
    tape_s, tape_l = Tape(), Tape()
    sp, lp = speaker.bind(tape_s), listener.bind(tape_l)
    res = digit_losses(cfg, speaker, listener, sp, lp, batch, rng)
    if res.speaker_loss is not None:
        _apply(speaker, opt_s, tape_s, sp, res.speaker_loss, cfg, None, "speaker", res.parts)
    _apply(listener, opt_l, tape_l, lp, res.listener_loss, cfg, None, "listener", res.parts)
    return res


def exact_digit_reward(speaker: DigitAgentNet, listener: DigitAgentNet,
                       communicates: bool = True) -> float:
    """Expected reward of the stochastic symbolic policies under uniform digits."""
    d = np.arange(N_DIGITS)
    ps = ad.softmax(speaker.logits(speaker.encode_inputs(d))).values.astype(np.float64)
    k = listener.n_messages
    dl, m = np.meshgrid(d, np.arange(k), indexing="ij")
    msg = one_hot(m.ravel(), k) if communicates else np.zeros((dl.size, k), np.float32)
    pl = ad.softmax(listener.logits(listener.encode_inputs(dl.ravel()), msg)).values
    pl = pl.astype(np.float64).reshape(N_DIGITS, k, N_ACTIONS)   # [dl, m, a]
    total = 0.0
    for ds in range(N_DIGITS):
        for dlv in range(N_DIGITS):
            total += ps[ds] @ pl[dlv, :, ds + dlv]
    return total / N_DIGITS ** 2


class DigitTrainer:
    def __init__(self, cfg: ExperimentConfig, dataset=None):
        self.cfg = cfg
        init, data, policy, evaluation = np.random.SeedSequence(cfg.seed).spawn(4)
        init_rng = np.random.default_rng(init)
        kw = dict(symbolic=cfg.symbolic, n_messages=cfg.n_messages, hidden=cfg.digit_hidden,
                  mlp=cfg.mlp_sizes)
        self.speaker = DigitAgentNet("speaker", init_rng, **kw)
        self.listener = DigitAgentNet("listener", init_rng, **kw)
        if cfg.bias == "no-comm":
            self.listener.zero_message_path()
        self.opt_s = Adam(lr=cfg.lr)
        self.opt_l = Adam(lr=cfg.lr)
        self.data_rng = np.random.default_rng(data)
        self.policy_rng = np.random.default_rng(policy)
        self.eval_rng = np.random.default_rng(evaluation)
        self.dataset = dataset
        if not cfg.symbolic and dataset is None:
            if not cfg.mnist_dir:
                raise ValueError("image mode needs mnist_dir (see the fetch-mnist command)")
            root = Path(cfg.mnist_dir)
            self.dataset = load_idx(root / "train-images-idx3-ubyte.gz",
                                    root / "train-labels-idx1-ubyte.gz")
        self.step = 0

    @property
    def nets(self):
        return {"speaker": self.speaker, "listener": self.listener}

    @property
    def optimizers(self):
        return {"speaker": self.opt_s, "listener": self.opt_l}

    def update(self) -> dict:
        batch = sample_batch(self.dataset, self.data_rng, self.cfg.batch_size)
        res = reinforce_update(self.cfg, batch, self.speaker, self.listener, self.opt_s,
                               self.opt_l, self.policy_rng)
        self.step += 1
        t = res.terms
        return {"reward": float(res.reward.mean()), "l_ps": t.l_ps, "l_pl": t.l_pl,
                "l_ce": t.l_ce, "marginal_entropy": t.marginal_entropy,
                "conditional_entropy": t.conditional_entropy, "cic": t.cic,
                "mutual_information": t.mutual_information,
                "listener_entropy": float(res.parts["listener_entropy"].values)}

    def learning_rate(self) -> float:
        return self.opt_l.learning_rate()

    def evaluate(self) -> float:
        if self.cfg.symbolic:
            return exact_digit_reward(self.speaker, self.listener, self.cfg.communicates)
        batch = sample_batch(self.dataset, self.eval_rng, self.cfg.eval_rounds)
        ms = sample_categorical(ad.softmax(self.speaker.logits(
            self.speaker.encode_inputs(batch.speaker_obs))).values, self.eval_rng)
        msg = one_hot(ms, self.cfg.n_messages) if self.cfg.communicates else \
            np.zeros((len(batch), self.cfg.n_messages), np.float32)
        acts = sample_categorical(ad.softmax(self.listener.logits(
            self.listener.encode_inputs(batch.listener_obs), msg)).values, self.eval_rng)
        return float(batch_rewards(batch, acts).mean())

    # checkpoint state
    def state(self) -> tuple[dict, dict]:
        arrays, meta = _nets_opts_state(self.nets, self.optimizers)
        meta.update(step=self.step, rngs={k: rng_state(getattr(self, k + "_rng"))
                                          for k in ("data", "policy", "eval")})
        return arrays, meta

    def load_state(self, arrays: dict, meta: dict) -> None:
        _load_nets_opts(self.nets, self.optimizers, arrays, meta)
        self.step = meta["step"]
        for k, s in meta["rngs"].items():
            setattr(self, k + "_rng", restore_rng(s))


# ================================================================ treasure hunt

@dataclass
class AgentRollout:
    obs: np.ndarray          # [T, n, 5, 5, 3]
    incoming: np.ndarray     # [T, n] symbols received (-1 = none)
    prev_action: np.ndarray  # [T, n] (-1 at episode start)
    action: np.ndarray       # [T, n]
    message: np.ndarray      # [T, n]
    logp_action: np.ndarray  # [T, n] behaviour log-probabilities
    logp_message: np.ndarray
    state0: tuple            # (h, c) at unroll start
    cf_state0: tuple         # counterfactual (h, c) at unroll start
    bootstrap: np.ndarray    # [n] value after the last step (0 at episode end)


@dataclass
class TrajectoryRecord:
    rewards: np.ndarray              # [T, n] shared by both agents
    agents: list                     # AgentRollout or None for scripted agents
    episode_done: bool
    intrinsic: list = field(default_factory=lambda: [None, None])
    cic: list = field(default_factory=lambda: [float("nan"), float("nan")])

    @property
    def transitions(self) -> int:
        return self.rewards.size


def _stack(tensors: list[Tensor]) -> Tensor:
    return ad.concat([ad.reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def vtrace(values: np.ndarray, bootstrap: np.ndarray, rewards: np.ndarray, gamma: float,
           log_rhos: np.ndarray, rho_bar: float = 1.0, c_bar: float = 1.0):
    """V-trace targets and policy-gradient advantages, all arrays [T, B].

    With ``log_rhos == 0`` this is the on-policy n-step return.
    """
    rhos = np.exp(log_rhos)
    clipped_rho = np.minimum(rho_bar, rhos)
    cs = np.minimum(c_bar, rhos)
    next_values = np.concatenate([values[1:], bootstrap[None]], axis=0)
    deltas = clipped_rho * (rewards + gamma * next_values - values)
    acc = np.zeros_like(bootstrap, dtype=np.float64)
    vs_minus_v = np.zeros_like(values, dtype=np.float64)
    for t in range(len(values) - 1, -1, -1):
        acc = deltas[t] + gamma * cs[t] * acc
        vs_minus_v[t] = acc
    vs = values + vs_minus_v
    next_vs = np.concatenate([vs[1:], bootstrap[None]], axis=0)
    advantages = clipped_rho * (rewards + gamma * next_vs - values)
    return vs, advantages


class TreasureTrainer:
    """Both Treasure Hunt agents, their optimizers, the vector env and all carried state."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        init, env, policy, evaluation = np.random.SeedSequence(cfg.seed).spawn(4)
        init_rng = np.random.default_rng(init)
        self.nets = [None if (i == FINDER and cfg.scripted_finder) else
                     TreasureAgentNet(init_rng, lstm=cfg.lstm, mlp=cfg.mlp_sizes)
                     for i in (FINDER, COLLECTOR)]
        self.opts = [None if net is None else RMSProp(lr=cfg.lr) for net in self.nets]
        self.scripted = ScriptedFinder() if cfg.scripted_finder else None
        self.env = VecTreasureEnv.from_seed(env, cfg.env_copies)
        self.policy_rng = np.random.default_rng(policy)
        self.eval_seed = evaluation
        self.step = 0
        self.frames = 0
        self._reset_carry()
        self.finished: list[float] = []

    def _reset_carry(self) -> None:
        n = self.cfg.env_copies
        self.states = [None if net is None else net.initial_state(n) for net in self.nets]
        self.cf_states = [None if net is None else net.initial_state(n) for net in self.nets]
        self.prev_actions = np.full((2, n), -1, dtype=np.int64)
        self.episode_reward = np.zeros(n)

    @property
    def learners(self):
        return [i for i, net in enumerate(self.nets) if net is not None]

    # ------------------------------------------------------------ collection
    def _incoming(self, agent: int) -> np.ndarray:
        if not self.cfg.communicates:
            return np.full(self.env.n, NO_MESSAGE)
        return self.env.inbox[:, agent].copy()

    def collect_unrolls(self) -> TrajectoryRecord:
        """Advance all copies ``unroll`` steps, carrying recurrent state across calls."""
        cfg, env, n, T = self.cfg, self.env, self.env.n, self.cfg.unroll
        if env.done:
            raise RuntimeError("environment left in a finished episode; state desync")
        # the message-free state is carried on every unroll so the counterfactual
        # pass always ablates the whole history
        need_cf = cfg.communicates
        rec = {i: dict(obs=[], incoming=[], prev=[], act=[], msg=[], lpa=[], lpm=[])
               for i in self.learners}
        cic_steps = {i: [] for i in self.learners}
        state0 = {i: self.states[i] for i in self.learners}
        cf0 = {i: self.cf_states[i] for i in self.learners}
        rewards = np.zeros((T, n), dtype=np.float32)
        for t in range(T):
            actions = np.zeros((n, 2), dtype=np.int64)
            messages = np.full((n, 2), NO_MESSAGE, dtype=np.int64)
            for i in (FINDER, COLLECTOR):
                inc = self._incoming(i)
                net = self.nets[i]
                if net is None:
                    a, m = self.scripted.act(env, inc)
                    actions[:, i], messages[:, i] = a, m
                    continue
                obs = env.observe(i)
                prev = self.prev_actions[i]
                la, lm, _, (h, c) = net.step(obs, one_hot(inc, net.n_messages),
                                             one_hot(prev, net.n_actions), self.states[i])
                self.states[i] = (h.values, c.values)
                pa = ad.softmax(la).values
                pm = ad.softmax(lm).values
                a = sample_categorical(pa, self.policy_rng)
                m = sample_categorical(pm, self.policy_rng)
                rows = np.arange(n)
                if need_cf:
                    zero = np.zeros((n, net.n_messages), np.float32)
                    lcf, _, _, (hc, cc) = net.step(obs, zero, one_hot(prev, net.n_actions),
                                                   self.cf_states[i])
                    self.cf_states[i] = (hc.values, cc.values)
                    cic_steps[i].append(biases.cic_per_step(pa, ad.softmax(lcf).values))
                r = rec[i]
                r["obs"].append(obs)
                r["incoming"].append(inc)
                r["prev"].append(prev.copy())
                r["act"].append(a)
                r["msg"].append(m)
                r["lpa"].append(np.log(np.maximum(pa[rows, a], 1e-10)))
                r["lpm"].append(np.log(np.maximum(pm[rows, m], 1e-10)))
                actions[:, i], messages[:, i] = a, m
            rewards[t] = env.step(actions, messages)
            self.prev_actions = actions.T.copy()
            self.episode_reward += rewards[t]
        self.frames += T * n
        done = env.done
        agents: list = [None, None]
        for i in self.learners:
            net, r = self.nets[i], rec[i]
            if done:
                boot = np.zeros(n, dtype=np.float32)
            else:
                _, _, v, _ = net.step(env.observe(i), one_hot(self._incoming(i), net.n_messages),
                                      one_hot(self.prev_actions[i], net.n_actions), self.states[i])
                boot = v.values
            agents[i] = AgentRollout(np.stack(r["obs"]), np.stack(r["incoming"]),
                                     np.stack(r["prev"]), np.stack(r["act"]), np.stack(r["msg"]),
                                     np.stack(r["lpa"]), np.stack(r["lpm"]), state0[i], cf0[i],
                                     boot)
        record = TrajectoryRecord(rewards, agents, done)
        for i in self.learners:
            if cic_steps[i]:
                per_step = np.stack(cic_steps[i])
                record.cic[i] = float(per_step.mean())
                if cfg.bias == "si":
                    # the other agent is rewarded for its influence on agent i
                    record.intrinsic[1 - i] = biases.social_influence_reward(per_step, cfg.si_weight)
        if done:
            self.finished.extend(self.episode_reward.tolist())
            env.reset()
            self._reset_carry()
        return record

    # ------------------------------------------------------------ learning
    def agent_loss(self, agent: int, params: dict, roll: AgentRollout, rewards: np.ndarray,
                   cols: slice):
        """Loss of one agent on copies ``cols`` of an unroll. Returns (loss, diagnostics)."""
        cfg, net = self.cfg, self.nets[agent]
        T = roll.obs.shape[0]
        h = (roll.state0[0][cols], roll.state0[1][cols])
        la_list, lm_list, v_list, states = [], [], [], []
        for t in range(T):
            states.append(h)
            la, lm, v, h = net.step(roll.obs[t, cols], one_hot(roll.incoming[t, cols], net.n_messages),
                                    one_hot(roll.prev_action[t, cols], net.n_actions), h, params=params)
            la_list.append(la)
            lm_list.append(lm)
            v_list.append(v)
        la, lm, v = _stack(la_list), _stack(lm_list), _stack(v_list)   # [T, B, .]
        acts, msgs = roll.action[:, cols], roll.message[:, cols]
        logp_a = ad.gather(ad.log_softmax(la), acts)
        logp_m = ad.gather(ad.log_softmax(lm), msgs)
        learn_msgs = cfg.communicates
        logp = ad.add(logp_a, logp_m) if learn_msgs else logp_a
        behaviour = roll.logp_action[:, cols]
        if learn_msgs:
            behaviour = behaviour + roll.logp_message[:, cols]
        # targets and importance weights are constants of the update
        log_rhos = ad.stop_gradient(logp).values.astype(np.float64) - behaviour
        v_const = ad.stop_gradient(v).values.astype(np.float64)
        vs, adv = vtrace(v_const, roll.bootstrap[cols].astype(np.float64),
                         rewards[:, cols].astype(np.float64), cfg.gamma, log_rhos)
        b = acts.shape[1]
        pg = -ad.sum(ad.multiply(logp, (adv / b).astype(np.float32)))
        value = ad.multiply(ad.sum(ad.square(ad.subtract(v, vs.astype(np.float32)))),
                            cfg.value_weight / b)
        h_a = ad.sum(_policy_entropy(la)) * (1.0 / b)
        loss = pg + value - cfg.action_entropy * h_a
        diag = {"pg": float(pg.values), "value": float(value.values),
                "action_entropy": float(h_a.values) / T}
        pm = ad.softmax(lm)
        h_marg = float(biases.entropy(pm.values.reshape(-1, 5).mean(0)))
        h_cond = float(biases.entropy(pm.values).mean())
        if learn_msgs:
            h_m = ad.sum(_policy_entropy(lm)) * (1.0 / b)
            loss = loss - cfg.message_entropy * h_m
            if cfg.ps_weight > 0:
                l_ps, h_marg, h_cond = biases.positive_signalling_loss(
                    pm, cfg.h_target, cfg.lambda_marginal, cfg.lambda_conditional)
                # per-row average scaled to the per-unroll sums used above
                loss = loss + l_ps * float(T)
                diag["l_ps"] = float(l_ps.values)
            if cfg.pl_weight > 0 or cfg.ce_weight > 0:
                acts_prev = roll.prev_action[:, cols]
                if cfg.cic_mode == biases.ALL_MESSAGES:
                    cf_state = (roll.cf_state0[0][cols], roll.cf_state0[1][cols])
                    cf, _ = biases.counterfactual_rollout(net, list(roll.obs[:, cols]), acts_prev,
                                                          cf_state, biases.ALL_MESSAGES, params)
                else:
                    cf, _ = biases.counterfactual_rollout(net, list(roll.obs[:, cols]), acts_prev,
                                                          None, biases.FINAL_MESSAGE, params,
                                                          actual_states=states)
                pa, pcf = ad.softmax(la), ad.softmax(_stack(cf))
                if cfg.pl_weight > 0:
                    t = biases.positive_listening_loss(pa, pcf)
                    loss = loss + cfg.pl_weight * t
                    diag["l_pl"] = float(t.values)
                if cfg.ce_weight > 0:
                    t = biases.cross_entropy_fit_loss(pa, pcf)
                    loss = loss + cfg.ce_weight * t
                    diag["l_ce"] = float(t.values)
                diag["cic"] = biases.estimate_cic(pa.values, pcf.values)
        diag.update(marginal_entropy=h_marg, conditional_entropy=h_cond,
                    mutual_information=biases.message_mutual_information(pm.values))
        return loss, diag

    def actor_critic_update(self, record: TrajectoryRecord) -> dict:
        """Independent update of every learning agent, one gradient step per minibatch."""
        cfg, n = self.cfg, self.env.n
        out = {}
        for i in self.learners:
            net, opt, roll = self.nets[i], self.opts[i], record.agents[i]
            rewards = record.rewards.astype(np.float64)
            if record.intrinsic[i] is not None:
                rewards = rewards + record.intrinsic[i]
            diags = []
            for start in range(0, n, cfg.batch_size):
                cols = slice(start, start + cfg.batch_size)
                tape = Tape()
                params = net.bind(tape)
                loss, diag = self.agent_loss(i, params, roll, rewards, cols)
                _apply(net, opt, tape, params, loss, cfg, self.frames, f"agent {i}", diag)
                diags.append(diag)
            out[i] = {k: float(np.mean([d[k] for d in diags])) for k in diags[0]}
            if "cic" not in out[i] and not math.isnan(record.cic[i]):
                out[i]["cic"] = record.cic[i]
        return out

    def update(self) -> dict:
        record = self.collect_unrolls()
        per_agent = self.actor_critic_update(record)
        self.step += 1
        names = {FINDER: "finder", COLLECTOR: "collector"}
        row = {"reward_per_step": float(record.rewards.mean())}
        for i, d in per_agent.items():
            row[names[i]] = d
        return row

    def take_finished(self) -> list[float]:
        done, self.finished = self.finished, []
        return done

    def learning_rate(self) -> float:
        opt = self.opts[self.learners[0]]
        return opt.learning_rate(self.frames)

    def evaluate(self, episodes: int | None = None) -> float:
        """Mean reward of fresh 500-step episodes with sampled actions (no learning)."""
        return float(np.mean(rollout_episodes(self.nets, self.cfg, self.eval_seed,
                                              episodes or self.cfg.env_copies,
                                              scripted=self.scripted)["rewards"]))

    # checkpoint state
    def state(self) -> tuple[dict, dict]:
        nets = {f"agent{i}": self.nets[i] for i in self.learners}
        opts = {f"agent{i}": self.opts[i] for i in self.learners}
        arrays, meta = _nets_opts_state(nets, opts)
        for i in self.learners:
            for tag, st in (("state", self.states[i]), ("cf", self.cf_states[i])):
                arrays[f"carry/{tag}{i}/h"], arrays[f"carry/{tag}{i}/c"] = st
        env = self.env
        meta.update(step=self.step, frames=self.frames,
                    policy_rng=rng_state(self.policy_rng),
                    env=dict(rngs=[rng_state(r) for r in env.rngs],
                             cols=env.maps_cols.tolist(), treasure=env.treasure.tolist(),
                             pos=env.pos.tolist(), inbox=env.inbox.tolist(), t=env.t),
                    prev_actions=self.prev_actions.tolist(),
                    episode_reward=self.episode_reward.tolist(), finished=self.finished)
        return arrays, meta

    def load_state(self, arrays: dict, meta: dict) -> None:
        nets = {f"agent{i}": self.nets[i] for i in self.learners}
        opts = {f"agent{i}": self.opts[i] for i in self.learners}
        _load_nets_opts(nets, opts, arrays, meta)
        self.step, self.frames = meta["step"], meta["frames"]
        self.policy_rng = restore_rng(meta["policy_rng"])
        e = meta["env"]
        self.env.rngs = [restore_rng(s) for s in e["rngs"]]
        maps = []
        for cols, tr, pos, inbox in zip(e["cols"], e["treasure"], e["pos"], e["inbox"]):
            grid = base_grid(cols)
            grid[TUNNEL_BOTTOM, cols[tr]] = TREASURE
            maps.append(TreasureMap(grid, tuple(cols), tr, tuple(map(tuple, pos)), e["t"],
                                    tuple(inbox)))
        self.env.load_maps(maps)
        for i in self.learners:
            self.states[i] = (arrays[f"carry/state{i}/h"], arrays[f"carry/state{i}/c"])
            self.cf_states[i] = (arrays[f"carry/cf{i}/h"], arrays[f"carry/cf{i}/c"])
        self.prev_actions = np.array(meta["prev_actions"], dtype=np.int64)
        self.episode_reward = np.array(meta["episode_reward"])
        self.finished = list(meta["finished"])


def rollout_episodes(nets, cfg: ExperimentConfig, seed, episodes: int, scripted=None,
                     force_symbol: int | None = None, force_after: int = 0, collector=None,
                     record_positions: bool = False) -> dict:
    """Play whole episodes with sampled actions, no learning.

    ``nets`` holds a TreasureAgentNet (or None) per agent; ``scripted`` and
    ``collector`` substitute scripted finder/collector policies. With
    ``force_symbol`` the collector receives that symbol on every step from
    ``force_after`` on. Returns per-episode rewards plus, optionally, the
    collector's positions and received/emitted symbols per step.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env_seed, pol_seed = ss.spawn(2)
    rng = np.random.default_rng(pol_seed)
    env = VecTreasureEnv.from_seed(env_seed, episodes)
    n = episodes
    states = [None if net is None else net.initial_state(n) for net in nets]
    prev = np.full((2, n), -1, dtype=np.int64)
    total = np.zeros(n)
    trace = {"collector_pos": [], "finder_symbol": [], "collector_received": [],
             "collector_action": [], "treasure_tunnel": []}
    while not env.done:
        actions = np.zeros((n, 2), dtype=np.int64)
        messages = np.full((n, 2), NO_MESSAGE, dtype=np.int64)
        for i in (FINDER, COLLECTOR):
            inc = env.inbox[:, i].copy() if cfg.communicates else np.full(n, NO_MESSAGE)
            if i == COLLECTOR and force_symbol is not None and env.t >= force_after:
                inc = np.full(n, force_symbol)
            if i == COLLECTOR:
                trace["collector_received"].append(inc)
            policy = nets[i]
            if policy is None:
                agent = scripted if i == FINDER else collector
                a, m = agent.act(env, inc)
            else:
                la, lm, _, (h, c) = policy.step(env.observe(i), one_hot(inc, policy.n_messages),
                                                one_hot(prev[i], policy.n_actions), states[i])
                states[i] = (h.values, c.values)
                a = sample_categorical(ad.softmax(la).values, rng)
                m = sample_categorical(ad.softmax(lm).values, rng)
            actions[:, i], messages[:, i] = a, m
        if record_positions:
            trace["collector_pos"].append(env.pos[:, COLLECTOR].copy())
            trace["treasure_tunnel"].append(env.treasure.copy())
            trace["finder_symbol"].append(messages[:, FINDER].copy())
            trace["collector_action"].append(actions[:, COLLECTOR].copy())
        total += env.step(actions, messages)
        prev = actions.T.copy()
    out = {"rewards": total, "tunnel_cols": env.maps_cols.copy()}
    if record_positions:
        out.update({k: np.stack(v) for k, v in trace.items() if v})
    return out


# ================================================================ checkpoints

def _nets_opts_state(nets: dict, opts: dict) -> tuple[dict, dict]:
    arrays, steps = {}, {}
    for name, net in nets.items():
        for k, v in net.params.items():
            arrays[f"{name}/param/{k}"] = v
    for name, opt in opts.items():
        for k, v in opt.state_arrays().items():
            arrays[f"{name}/opt/{k}"] = v
        steps[name] = opt.steps
    return arrays, {"opt_steps": steps}


def _load_nets_opts(nets: dict, opts: dict, arrays: dict, meta: dict) -> None:
    for name, net in nets.items():
        prefix = f"{name}/param/"
        loaded = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        check_shapes(net.params, loaded, prefix)
        net.load_params(loaded)
    for name, opt in opts.items():
        prefix = f"{name}/opt/"
        loaded = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        opt.load_state_arrays(loaded, meta["opt_steps"][name])


# ================================================================ runs

def make_trainer(cfg: ExperimentConfig, dataset=None):
    return DigitTrainer(cfg, dataset) if cfg.env == "digit" else TreasureTrainer(cfg)


def _flatten(row: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in row.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


class _Window:
    """Running means of logged values between metrics rows."""

    def __init__(self):
        self.sums: dict = {}
        self.count = 0

    def add(self, row: dict) -> None:
        for k, v in _flatten(row).items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)
        self.count += 1

    def means(self) -> dict:
        return {k: v / self.count for k, v in self.sums.items()}

    def state(self) -> dict:
        return {"sums": self.sums, "count": self.count}

    def load(self, s: dict) -> None:
        self.sums, self.count = dict(s["sums"]), s["count"]


def _unflatten(flat: dict) -> dict:
    out: dict = {}
    for k, v in flat.items():
        parts = k.split(".")
        d = out
        for p in parts[:-1]:
            d = d.setdefault(p, {})
        d[parts[-1]] = v
    return out


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("step_*.ecl"))
    return ckpts[-1] if ckpts else None


def run_experiment(cfg: ExperimentConfig, run_dir, resume: bool = False, force: bool = False,
                   dataset=None, stop_after: int | None = None, log=None) -> Path:
    """Train to ``cfg.total_updates``, writing metrics, checkpoints and a report.

    ``stop_after`` halts early after that many updates (used to simulate an
    interrupted run); ``resume`` continues from the newest checkpoint.
    """
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.jsonl"
    if run_dir.exists() and any(run_dir.iterdir()) and not (resume or force):
        raise RunExistsError(f"{run_dir} already holds a run; pass force or resume")
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    trainer = make_trainer(cfg, dataset)
    window = _Window()
    ckpt = latest_checkpoint(run_dir) if resume else None
    if resume and ckpt is None and metrics_path.exists():
        raise FileNotFoundError(f"{run_dir}: nothing to resume from (no checkpoints)")
    if ckpt is not None:
        arrays, meta = load_checkpoint(ckpt)
        trainer.load_state(arrays, meta["trainer"])
        window.load(meta["window"])
        rows = [line for line in metrics_path.read_text().splitlines()
                if json.loads(line)["global_step"] <= trainer.step] if metrics_path.exists() else []
        metrics_path.write_text("".join(r + "\n" for r in rows))
    else:
        for old in (run_dir / "checkpoints").glob("*.ecl"):
            old.unlink()
        metrics_path.write_text("")
    cfg.save(run_dir / "config.cfg")
    run_id = f"{cfg.env}-{cfg.bias}-seed{cfg.seed}"
    t0 = time.perf_counter()
    with open(metrics_path, "a") as fh:
        while trainer.step < cfg.total_updates:
            if stop_after is not None and trainer.step >= stop_after:
                return run_dir
            window.add(trainer.update())
            last = trainer.step == cfg.total_updates
            if (cfg.log_every and trainer.step % cfg.log_every == 0) or last:
                row = _unflatten(window.means())
                if cfg.env == "treasure":
                    eps = trainer.take_finished()
                    row["mean_episode_reward"] = float(np.mean(eps)) if eps else None
                    row["episodes"] = len(eps)
                else:
                    row["mean_episode_reward"] = row.pop("reward")
                row.update(run_id=run_id, global_step=trainer.step,
                           learning_rate=trainer.learning_rate(),
                           wall_clock=round(time.perf_counter() - t0, 3))
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                fh.flush()
                window = _Window()
                if log:
                    log(row)
            if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                arrays, meta = trainer.state()
                save_checkpoint(run_dir / "checkpoints" / f"step_{trainer.step:08d}.ecl",
                                arrays, {"trainer": meta, "window": window.state(),
                                         "config": cfg.to_dict()})
    arrays, meta = trainer.state()
    save_checkpoint(run_dir / "final.ecl", arrays,
                    {"trainer": meta, "window": window.state(), "config": cfg.to_dict()})
    final = trainer.evaluate()
    report = {"run_id": run_id, "env": cfg.env, "bias": cfg.bias, "seed": cfg.seed,
              "updates": trainer.step, "final_reward": final,
              "good_run": classify_good_run(cfg.env, final)}
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return run_dir


def load_trainer(run_dir, checkpoint: str = "final.ecl", dataset=None):
    """Rebuild a trainer from a run directory's config and checkpoint."""
    from .config import load_config
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.cfg")
    trainer = make_trainer(cfg, dataset)
    arrays, meta = load_checkpoint(run_dir / checkpoint)
    trainer.load_state(arrays, meta["trainer"])
    return trainer


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


__all__ = ["DigitTrainer", "TreasureTrainer", "TrajectoryRecord", "AgentRollout",
           "reinforce_update", "digit_losses", "exact_digit_reward", "vtrace", "run_experiment",
           "rollout_episodes", "classify_good_run", "sample_categorical", "load_trainer",
           "read_metrics", "EPISODE_LENGTH"]

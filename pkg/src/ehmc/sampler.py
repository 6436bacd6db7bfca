"""Chain driver: single HMC transitions, the multi-chain adaptive step,
run orchestration (adapt, freeze, sample) and checkpointing.

Every chain owns three RNG substreams (velocity, acceptance uniform,
roulette) spawned from one master seed, so switching the objective on or
off never perturbs the chain path itself.  Updates to the shared
adaptation state happen once per step after all chains have moved, which
makes single-machine runs bit-reproducible.
"""

import json
import time
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .precond import Preconditioner, make_preconditioner
from .integrator import trajectory_reparam, DivergenceError
from .entropy import dl_operator, roulette_pass, penalty_h
from .objective import (
    AdaptConfig,
    AdaptState,
    adam_update,
    default_adapt_config,
    esjd_gradient,
    gsm_gradient,
    l2hmc_gradient,
    make_adapt_state,
    update_beta,
    update_gamma,
    update_lambda,
)

DIVERGENCE_DELTA = 1e3

OBJECTIVES = ("gsm", "esjd", "l2hmc", "none")


@dataclass
class ChainState:
    """One chain's position, RNG streams and counters."""

    q: np.ndarray
    rng_velocity: np.random.Generator
    rng_accept: np.random.Generator
    rng_roulette: np.random.Generator
    accept_count: int = 0
    transition_count: int = 0
    divergence_count: int = 0
    last_delta: float = 0.0


def make_chains(model, n_chains, seed, init=None, init_scale=1.0):
    """Spawn chains with disjoint substreams from one master seed.

    Initial positions come from the velocity stream: init_scale-spread
    standard normals, or copies of an explicit init vector.
    """
    if n_chains < 1:
        raise ValueError("need at least one chain")
    master = np.random.SeedSequence(seed)
    chains = []
    for child in master.spawn(n_chains):
        vel_ss, acc_ss, rou_ss = child.spawn(3)
        rng_v = np.random.Generator(np.random.PCG64(vel_ss))
        rng_a = np.random.Generator(np.random.PCG64(acc_ss))
        rng_r = np.random.Generator(np.random.PCG64(rou_ss))
        if init is None:
            q0 = init_scale * rng_v.standard_normal(model.dim)
        else:
            q0 = np.array(init, dtype=float).copy()
            if q0.shape != (model.dim,):
                raise ValueError("init vector has wrong length")
        chains.append(ChainState(q=q0, rng_velocity=rng_v, rng_accept=rng_a,
                                 rng_roulette=rng_r))
    return chains


def hmc_transition(chain, precond, model, h, L):
    """One Metropolis-adjusted leapfrog proposal.

    Divergent proposals (integration failure, non-finite energy error, or
    an error above DIVERGENCE_DELTA) are rejected and counted; rejection
    leaves the position array untouched.  Exactly one velocity draw and
    one acceptance uniform are consumed per call regardless of outcome.
    """
    v = chain.rng_velocity.standard_normal(model.dim)
    traj = None
    try:
        traj = trajectory_reparam(chain.q, v, h, L, precond, model)
        delta = traj.delta
    except DivergenceError:
        delta = np.inf
    divergent = not np.isfinite(delta) or delta > DIVERGENCE_DELTA
    a = 0.0 if divergent else min(1.0, float(np.exp(-max(delta, -700.0))))
    u = chain.rng_accept.uniform()
    chain.transition_count += 1
    chain.last_delta = delta
    if divergent:
        chain.divergence_count += 1
    elif u <= a:
        chain.q = traj.q[L].copy()
        chain.accept_count += 1
    return chain, traj, a


def adaptive_step(chains, state, model, h, L, objective="gsm", record=None):
    """Advance every chain once, then apply one shared parameter update.

    GSM runs one roulette pass per chain and updates theta, beta, gamma;
    ESJD and L2HMC update theta (and lambda) only; "none" disables all
    adaptation.  Chains whose trajectory failed outright are left out of
    the averages; if no chain produced a usable gradient the parameters
    stay untouched for this step.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    precond = state.precond
    cfg = state.config
    trajs = []
    a_vals = []
    step_divergences = 0
    for chain in chains:
        before = chain.divergence_count
        _, traj, a = hmc_transition(chain, precond, model, h, L)
        step_divergences += chain.divergence_count - before
        trajs.append(traj)
        a_vals.append(a)
    mean_a = float(np.mean(a_vals))
    stats = {"accept": mean_a, "divergences": step_divergences,
             "mu": np.nan, "pen": np.nan}
    if objective == "none":
        if record is not None:
            record.update(stats)
        return chains, state
    live = [(c, t) for c, t in zip(chains, trajs) if t is not None]
    grads = []
    if objective == "gsm":
        pd, pd2 = cfg.penalty_args()
        pens = []
        mus = []
        for chain, traj in live:
            dl = dl_operator(traj.midpoint, precond, model, h, L)
            try:
                draw = roulette_pass(dl, model.dim, chain.rng_roulette,
                                     cfg.delta_prime, cfg.n_min)
                g = gsm_gradient(traj, draw, state, precond, model)
            except FloatingPointError:
                state.skip_count += 1
                continue
            if np.all(np.isfinite(g)):
                grads.append(g)
            else:
                state.skip_count += 1
            pens.append(penalty_h(abs(draw.mu), pd, pd2))
            mus.append(abs(draw.mu))
        if grads:
            adam_update(state, np.mean(grads, axis=0))
        update_beta(state, mean_a)
        if pens:
            stats["pen"] = float(np.mean(pens))
            stats["mu"] = float(np.mean(mus))
            update_gamma(state, stats["pen"])
    elif objective == "esjd":
        for chain, traj in live:
            g = esjd_gradient(traj, precond)
            if np.all(np.isfinite(g)):
                grads.append(g)
            else:
                state.skip_count += 1
        if grads:
            adam_update(state, np.mean(grads, axis=0))
    else:
        jumps = []
        for chain, traj in live:
            jump = traj.q[traj.L] - traj.q[0]
            jumps.append(traj.accept_prob * float(jump @ jump))
        fresh_lambda = state.lambda_ma is None
        if fresh_lambda and jumps:
            update_lambda(state, float(np.mean(jumps)))
        for chain, traj in live:
            g = l2hmc_gradient(traj, state, precond)
            if np.all(np.isfinite(g)):
                grads.append(g)
            else:
                state.skip_count += 1
        if grads:
            adam_update(state, np.mean(grads, axis=0))
        if jumps and not fresh_lambda:
            update_lambda(state, float(np.mean(jumps)))
    if record is not None:
        record.update(stats)
    return chains, state


def dual_averaging_step_size(target_rate, history, h0=1.0, gamma=0.05,
                             t0=10.0, kappa=0.75, final=False):
    """Replay the dual-averaging recursion over an acceptance history.

    The shrink target is log h0, so a history sitting exactly on
    target_rate leaves the step size at its initial value.  Returns the
    current iterate, or the averaged iterate when final is set.
    """
    mu = np.log(h0)
    g_bar = 0.0
    log_h = mu
    log_h_bar = mu
    for t, a in enumerate(history, start=1):
        eta = 1.0 / (t + t0)
        g_bar = (1.0 - eta) * g_bar + eta * (target_rate - a)
        log_h = mu - np.sqrt(t) / gamma * g_bar
        w = t ** (-kappa)
        log_h_bar = w * log_h + (1.0 - w) * log_h_bar
    return float(np.exp(log_h_bar if final else log_h))


@dataclass
class SamplerSettings:
    """Everything run_experiment needs, independent of any config file."""

    model: object
    kind: str = "diagonal"
    h: float = 0.1
    L: int = 5
    objective: str = "gsm"
    adapt_steps: int = 1000
    sample_steps: int = 1000
    chains: int = 10
    seed: int = 0
    thin: int = 1
    init: Optional[np.ndarray] = None
    init_scale: float = 1.0
    precond_init_scale: float = 1.0
    adapt_config: Optional[AdaptConfig] = None
    precond: Optional[Preconditioner] = None
    step_size_adapt: bool = False
    target_accept: float = 0.65

    def validate(self):
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.L < 1:
            raise ValueError("L must be a positive integer")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.adapt_steps < 0 or self.sample_steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if self.thin < 1:
            raise ValueError("thin must be a positive integer")


def run_experiment(settings):
    """Adapt, freeze, sample; return the summary report.

    Phase 1 runs settings.adapt_steps adaptive steps (a no-op kernel-wise
    when the objective is "none" and step-size adaptation is off).  Phase
    2 freezes all parameters and records every thin-th position per
    chain.  The report's acceptance rate refers to the sampling phase
    when it is nonempty.
    """
    from .diagnostics import build_report, condition_number

    settings.validate()
    t_start = time.perf_counter()
    model = settings.model
    if settings.precond is not None:
        precond = settings.precond
    else:
        precond = make_preconditioner(settings.kind, model.dim,
                                      settings.precond_init_scale)
    config = settings.adapt_config or default_adapt_config(precond.kind)
    state = make_adapt_state(precond, config)
    chains = make_chains(model, settings.chains, settings.seed,
                         settings.init, settings.init_scale)
    h = settings.h
    mu_trace = []
    accept_hist = []
    for _ in range(settings.adapt_steps):
        if settings.step_size_adapt:
            h = dual_averaging_step_size(settings.target_accept, accept_hist,
                                         settings.h)
        rec = {}
        chains, state = adaptive_step(chains, state, model, h, settings.L,
                                      settings.objective, rec)
        accept_hist.append(rec["accept"])
        if settings.objective == "gsm":
            mu_trace.append(rec["mu"])
    if settings.step_size_adapt and settings.adapt_steps > 0:
        h = dual_averaging_step_size(settings.target_accept, accept_hist,
                                     settings.h, final=True)
    adapt_accepts = sum(c.accept_count for c in chains)
    adapt_trans = sum(c.transition_count for c in chains)
    adapt_divs = sum(c.divergence_count for c in chains)

    kept = [[] for _ in chains]
    for step in range(settings.sample_steps):
        for i, chain in enumerate(chains):
            hmc_transition(chain, state.precond, model, h, settings.L)
            if step % settings.thin == 0:
                kept[i].append(chain.q.copy())
    if settings.sample_steps > 0:
        draws = np.stack([np.stack(rows) for rows in kept])
    else:
        draws = np.zeros((settings.chains, 0, model.dim))
    total_accepts = sum(c.accept_count for c in chains)
    total_trans = sum(c.transition_count for c in chains)
    total_divs = sum(c.divergence_count for c in chains)
    sample_trans = total_trans - adapt_trans
    if sample_trans > 0:
        acceptance = (total_accepts - adapt_accepts) / sample_trans
    elif adapt_trans > 0:
        acceptance = adapt_accepts / adapt_trans
    else:
        acceptance = np.nan
    cond = None
    if model.precision is not None and model.dim <= 1000:
        cond = condition_number(state.precond, model.precision)
    wall = time.perf_counter() - t_start
    extras = {
        "final_precond": state.precond,
        "adapt_state": state,
        "chains": chains,
        "h_final": h,
        "adapt_acceptance": adapt_accepts / adapt_trans if adapt_trans else np.nan,
        "adapt_divergences": adapt_divs,
        "skip_count": state.skip_count,
        "settings": settings,
    }
    return build_report(draws=draws, acceptance_rate=float(acceptance),
                        divergences=int(total_divs),
                        mu_trace=np.asarray(mu_trace, dtype=float),
                        wall_seconds=wall, cond_number=cond, extras=extras)


# -- checkpointing --------------------------------------------------------


def save_checkpoint(path, chains, state, h, meta=None):
    """Snapshot chains plus adaptation state to one npz file.

    RNG bit-generator states are JSON-encoded; target models are not
    stored (the caller recreates them from its own configuration).
    """
    rng_states = [
        [json.dumps(c.rng_velocity.bit_generator.state),
         json.dumps(c.rng_accept.bit_generator.state),
         json.dumps(c.rng_roulette.bit_generator.state)]
        for c in chains
    ]
    counters = np.array(
        [[c.accept_count, c.transition_count, c.divergence_count] for c in chains],
        dtype=np.int64,
    )
    np.savez(
        path,
        positions=np.stack([c.q for c in chains]),
        last_delta=np.array([c.last_delta for c in chains]),
        counters=counters,
        rng_states=np.array(rng_states, dtype=object),
        theta=state.precond.theta,
        precond_kind=np.array(state.precond.kind),
        precond_dim=np.array(state.precond.dim),
        adam_m=state.adam_m,
        adam_v=state.adam_v,
        scalars=np.array([state.beta, state.gamma, float(state.step),
                          np.nan if state.lambda_ma is None else state.lambda_ma,
                          float(state.skip_count), h]),
        config_json=np.array(json.dumps(asdict(state.config))),
        meta_json=np.array(json.dumps(meta or {})),
    )


def load_checkpoint(path):
    """Rebuild (chains, state, h, meta) from a checkpoint file."""
    with np.load(path, allow_pickle=True) as data:
        positions = data["positions"]
        last_delta = data["last_delta"]
        counters = data["counters"]
        rng_states = data["rng_states"]
        kind = str(data["precond_kind"])
        dim = int(data["precond_dim"])
        theta = data["theta"]
        adam_m = data["adam_m"]
        adam_v = data["adam_v"]
        scalars = data["scalars"]
        config_d = json.loads(str(data["config_json"]))
        meta = json.loads(str(data["meta_json"]))
    for key in ("beta_bounds", "gamma_bounds"):
        config_d[key] = tuple(config_d[key])
    config = AdaptConfig(**config_d)
    precond = Preconditioner(kind=kind, dim=dim, theta=theta.copy())
    lam = None if np.isnan(scalars[3]) else float(scalars[3])
    state = AdaptState(precond=precond, config=config, beta=float(scalars[0]),
                       gamma=float(scalars[1]), adam_m=adam_m.copy(),
                       adam_v=adam_v.copy(), step=int(scalars[2]),
                       lambda_ma=lam, skip_count=int(scalars[4]))
    chains = []
    for i in range(positions.shape[0]):
        gens = []
        for st in rng_states[i]:
            bg = np.random.PCG64()
            bg.state = json.loads(st)
            gens.append(np.random.Generator(bg))
        chains.append(ChainState(
            q=positions[i].copy(), rng_velocity=gens[0], rng_accept=gens[1],
            rng_roulette=gens[2], accept_count=int(counters[i, 0]),
            transition_count=int(counters[i, 1]),
            divergence_count=int(counters[i, 2]),
            last_delta=float(last_delta[i]),
        ))
    return chains, state, float(scalars[5]), meta

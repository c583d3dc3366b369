"""Independent plain TD3+BC loop used as an oracle for the library backbone.

Only the MLP forward/backward primitives and the initializer are shared with
the library; targets, losses, optimizer and target updates are written here.
"""

from __future__ import annotations

import numpy as np

from uarl.agent import TrainConfig, init_agent
from uarl.ensemble import Normalizer


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps, self.t = lr, b1, b2, eps, 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m[:] = self.b1 * m + (1 - self.b1) * g
            v[:] = self.b2 * v + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def run_reference(nominal, cfg: TrainConfig, steps: int):
    norm = Normalizer.fit(nominal.s)
    policy, ens = init_agent(nominal.s.shape[1], nominal.a.shape[1], norm, cfg)
    actor, critics, critic_t = policy.net, ens.net, ens.target
    actor_t = actor.copy()
    streams = np.random.SeedSequence([cfg.seed, 0, 0x5EED]).spawn(4)
    rng_batch, rng_noise = np.random.default_rng(streams[0]), np.random.default_rng(streams[1])
    c_opt, a_opt = _Adam(critics.params, cfg.lr), _Adam(actor.params, cfg.lr)
    S, A, R, S2, D = nominal.s, nominal.a, nominal.r, nominal.s2, nominal.done.astype(float)
    n = len(R)
    losses = []

    def xin(s, a):
        return np.concatenate([norm(s), a], axis=1)

    for step in range(1, steps + 1):
        idx = np.minimum(np.floor(rng_batch.random(cfg.batch_size) * n).astype(int), n - 1)
        s, a, r, s2, d = S[idx], A[idx], R[idx], S2[idx], D[idx]
        a2 = actor_t(norm(s2))[0]
        eps = np.clip(cfg.policy_noise * rng_noise.normal(size=a2.shape), -cfg.noise_clip, cfg.noise_clip)
        a2 = np.clip(a2 + eps, -1.0, 1.0)
        y = r + cfg.gamma * (1.0 - d) * critic_t(xin(s2, a2))[..., 0].min(axis=0)
        q, cache = critics.forward(xin(s, a))
        err = q[..., 0] - y
        losses.append(np.mean(err**2, axis=1).mean())
        grads, _ = critics.backward(cache, (2.0 / len(y)) * err[..., None])
        c_opt.step(critics.params, grads)
        if step % cfg.actor_delay == 0:
            pi, a_cache = actor.forward(norm(s))
            pi = pi[0]
            q1_params = [p[:1] for p in critics.params]
            saved = critics.params
            critics.params = q1_params
            q1, q_cache = critics.forward(xin(s, pi))
            lam = cfg.bc_alpha / max(np.abs(q1[0, :, 0]).mean(), 1e-8)
            _, dx = critics.backward(q_cache, np.full((1, len(y), 1), -lam / len(y)), need_input_grad=True)
            critics.params = saved
            dpi = dx[0, :, ens.state_dim:] + 2.0 * (pi - a) / pi.size
            g_actor, _ = actor.backward(a_cache, dpi[None])
            a_opt.step(actor.params, g_actor)
            for tgt, src in ((critic_t, critics), (actor_t, actor)):
                for tp, sp in zip(tgt.params, src.params):
                    tp[:] = (1 - cfg.polyak) * tp + cfg.polyak * sp
    return policy, ens, np.array(losses)

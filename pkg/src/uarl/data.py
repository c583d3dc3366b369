"""Rollout collection, role-tagged datasets, and JSONL persistence."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from uarl import firewall
from uarl.envs import EnvSpec, ParamRange, sample_params, transition
from uarl.envs.continuous import POINT_MASS_GOAL, POINT_MASS_INIT, PENDULUM_INIT, PENDULUM_G_OVER_L, perturb_initial
from uarl.envs.params import PARAM_NAMES, DomainParams

log = logging.getLogger(__name__)

ROLES = ("nominal", "repulsive", "target_proxy")
FORMAT = "uarl-dataset/1"


class DatasetParseError(ValueError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    phi: DomainParams


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    role: str
    phi: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.r)


class Dataset:
    """Flat transition arrays plus episode boundaries.

    ``done`` marks true terminations only; reaching the horizon is a
    truncation and is not stored as terminal. ``phi`` holds one
    ``(noise_scale, friction, mass_mult)`` row per transition.
    """

    def __init__(
        self,
        s: np.ndarray,
        a: np.ndarray,
        r: np.ndarray,
        s2: np.ndarray,
        done: np.ndarray,
        phi: np.ndarray,
        ep: np.ndarray,
        t: np.ndarray,
        role: str,
        provenance: dict,
        guarded: bool = False,
    ):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        n = len(r)
        if n == 0:
            raise ValueError("a dataset needs at least one transition")
        for name, arr in (("s", s), ("a", a), ("s2", s2), ("phi", phi), ("done", done), ("ep", ep), ("t", t)):
            if len(arr) != n:
                raise ValueError(f"field {name} has {len(arr)} rows, expected {n}")
        self._s = np.asarray(s, dtype=float)
        self._a = np.asarray(a, dtype=float)
        self._r = np.asarray(r, dtype=float)
        self._s2 = np.asarray(s2, dtype=float)
        self._done = np.asarray(done, dtype=bool)
        self._phi = np.asarray(phi, dtype=float)
        self._ep = np.asarray(ep, dtype=int)
        self._t = np.asarray(t, dtype=int)
        for name in ("_s", "_a", "_r", "_s2", "_phi"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in field {name[1:]}")
        self.role = role
        self.provenance = dict(provenance)
        self.guarded = guarded
        self.name = str(self.provenance.get("name", role))

    def _read(self) -> None:
        if self.guarded:
            firewall.check_read(self.name)

    @property
    def s(self) -> np.ndarray:
        self._read()
        return self._s

    @property
    def a(self) -> np.ndarray:
        self._read()
        return self._a

    @property
    def r(self) -> np.ndarray:
        self._read()
        return self._r

    @property
    def s2(self) -> np.ndarray:
        self._read()
        return self._s2

    @property
    def done(self) -> np.ndarray:
        self._read()
        return self._done

    @property
    def phi(self) -> np.ndarray:
        self._read()
        return self._phi

    @property
    def ep(self) -> np.ndarray:
        self._read()
        return self._ep

    @property
    def t(self) -> np.ndarray:
        self._read()
        return self._t

    def __len__(self) -> int:
        return len(self._r)

    @property
    def n_episodes(self) -> int:
        return len(np.unique(self._ep))

    def episode_slices(self) -> list[np.ndarray]:
        ep = self.ep
        return [np.flatnonzero(ep == e) for e in np.unique(ep)]

    @property
    def episodes(self) -> list[list[Transition]]:
        return [[self.transition(i) for i in idx] for idx in self.episode_slices()]

    def transition(self, i: int) -> Transition:
        self._read()
        return Transition(
            self._s[i].copy(),
            self._a[i].copy(),
            float(self._r[i]),
            self._s2[i].copy(),
            bool(self._done[i]),
            DomainParams(*self._phi[i]),
        )

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self.transition(i)

    def batch(self, idx: np.ndarray | None = None, role: str | None = None) -> Batch:
        if idx is None:
            idx = np.arange(len(self))
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx], role or self.role, self.phi[idx])

    def episode_returns(self) -> np.ndarray:
        ep, r = self.ep, self.r
        return np.array([r[ep == e].sum() for e in np.unique(ep)])

    def retag(self, role: str) -> Dataset:
        """Same transitions under a new role (used when repulsive data is promoted)."""
        prov = dict(self.provenance, retagged_from=self.role)
        return Dataset(self._s, self._a, self._r, self._s2, self._done, self._phi, self._ep, self._t, role, prov, self.guarded)

    def equals(self, other: Dataset) -> bool:
        return (
            self.role == other.role
            and self.provenance == other.provenance
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("_s", "_a", "_r", "_s2", "_done", "_phi", "_ep", "_t")
            )
        )


def concat_datasets(datasets: list[Dataset], role: str, provenance: dict | None = None) -> Dataset:
    if not datasets:
        raise ValueError("nothing to concatenate")
    offset = 0
    eps = []
    for d in datasets:
        eps.append(d.ep - d.ep.min() + offset)
        offset = int(eps[-1].max()) + 1
    cat = lambda f: np.concatenate([getattr(d, f) for d in datasets])  # noqa: E731
    prov = provenance or {"sources": [d.provenance for d in datasets]}
    return Dataset(cat("s"), cat("a"), cat("r"), cat("s2"), cat("done"), cat("phi"), np.concatenate(eps), cat("t"), role, prov)


# ---------------------------------------------------------------------------
# behavior policy


class ScriptedPolicy:
    """Hand-written controllers standing in for a pretrained behavior policy.

    ``mean_action`` is deterministic; calling the policy adds Gaussian
    exploration noise drawn from its own seeded generator.
    """

    def __init__(self, family: str, noise_std: float = 0.1, seed: int = 0):
        if family not in ("point_mass", "pendulum"):
            raise ValueError(f"no scripted behavior policy for family {family!r}")
        self.family = family
        self.noise_std = float(noise_std)
        self.policy_id = f"scripted-{family}-sigma{self.noise_std:g}"
        self._rng = np.random.default_rng(seed)

    def mean_action(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if self.family == "point_mass":
            a = 2.0 * (POINT_MASS_GOAL - states[..., :2]) - 2.0 * states[..., 2:4]
        else:
            theta = np.arctan2(states[..., 1], states[..., 0])
            theta_dot = states[..., 2]
            energy = 0.5 * theta_dot**2 + PENDULUM_G_OVER_L * (np.cos(theta) - 1.0)
            swing = 0.5 * (-energy) * theta_dot
            balance = -10.0 * theta - 2.0 * theta_dot
            a = np.where(np.abs(theta) < 0.6, balance, swing)[..., None]
        return np.clip(a, -1.0, 1.0)

    def __call__(self, state: np.ndarray) -> np.ndarray:
        a = self.mean_action(state)
        return np.clip(a + self.noise_std * self._rng.normal(size=np.shape(a)), -1.0, 1.0)


def scripted_behavior_policy(spec: EnvSpec, noise_std: float = 0.1, seed: int = 0) -> ScriptedPolicy:
    return ScriptedPolicy(spec.family, noise_std, seed)


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(episode)]))


def collect_rollouts(
    spec: EnvSpec,
    prange: ParamRange,
    policy,
    n_episodes: int,
    seed: int,
    role: str = "nominal",
    noise_std: float | None = None,
    name: str | None = None,
    guarded: bool = False,
    phi_override: list[DomainParams] | None = None,
) -> Dataset:
    """Roll ``policy`` out for ``n_episodes`` with one sampled ``phi`` per episode.

    Episodes run in lockstep. Each one draws its parameters, initial-state
    noise and exploration noise from its own generator seeded by
    ``(seed, episode)``, so the dataset does not depend on batching.
    ``policy`` needs ``mean_action(states)`` and, unless ``noise_std`` is
    given, a ``noise_std`` attribute.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if spec.family not in ("point_mass", "pendulum"):
        raise ValueError(f"collect_rollouts supports continuous families only, got {spec.family!r}")
    sigma = float(policy.noise_std if noise_std is None else noise_std)
    H, E = spec.horizon, n_episodes
    phis, init, noise = [], [], []
    base = POINT_MASS_INIT if spec.family == "point_mass" else PENDULUM_INIT
    for e in range(E):
        rng = episode_rng(seed, e)
        phi = sample_params(prange, rng) if phi_override is None else phi_override[e]
        phis.append(phi)
        init.append(perturb_initial(spec.family, base, phi.noise_scale * rng.normal(size=spec.state_dim)))
        noise.append(sigma * rng.normal(size=(H, spec.action_dim)))
    phi_arr = np.array([[p.get(n) for n in PARAM_NAMES] for p in phis])
    friction, mass = phi_arr[:, 1], phi_arr[:, 2]
    noise_arr = np.stack(noise, axis=1)  # (H, E, da)

    S = np.empty((H, E, spec.state_dim))
    A = np.empty((H, E, spec.action_dim))
    R = np.empty((H, E))
    S2 = np.empty((H, E, spec.state_dim))
    state = np.stack(init)
    n_clipped = 0
    for t in range(H):
        raw = policy.mean_action(state) + noise_arr[t]
        act = np.clip(raw, -spec.max_action, spec.max_action)
        n_clipped += int(np.count_nonzero(act != raw))
        r, nxt = transition(spec.family, state, act, friction, mass)
        S[t], A[t], R[t], S2[t] = state, act, r, nxt
        state = nxt
    if n_clipped:
        log.debug("clipped %d action components to the action box", n_clipped)

    order = lambda x: np.swapaxes(x, 0, 1).reshape(E * H, *x.shape[2:])  # noqa: E731
    ep = np.repeat(np.arange(E), H)
    tt = np.tile(np.arange(H), E)
    provenance = {
        "name": name or role,
        "behavior_policy": getattr(policy, "policy_id", type(policy).__name__),
        "noise_std": sigma,
        "env": spec.to_dict(),
        "range": prange.to_dict(),
        "seed": int(seed),
        "n_episodes": int(E),
    }
    return Dataset(
        order(S), order(A), order(R), order(S2), np.zeros(E * H, dtype=bool),
        np.repeat(phi_arr, H, axis=0), ep, tt, role, provenance, guarded,
    )


# ---------------------------------------------------------------------------
# persistence


def _floats(x) -> list:
    return [float(v) for v in np.ravel(x)]


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write JSONL: header, one line per transition, footer with a count.

    Floats are written with ``repr`` (shortest round-trip form) so loading
    is bit-exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = dataset
    s, a, r, s2, done, phi, ep, t = d._s, d._a, d._r, d._s2, d._done, d._phi, d._ep, d._t
    with path.open("w") as fh:
        fh.write(json.dumps({"format": FORMAT, "role": d.role, "provenance": d.provenance, "guarded": d.guarded,
                             "state_dim": int(s.shape[1]), "action_dim": int(a.shape[1])}) + "\n")
        for i in range(len(d)):
            rec = {
                "ep": int(ep[i]), "t": int(t[i]), "s": _floats(s[i]), "a": _floats(a[i]), "r": float(r[i]),
                "s2": _floats(s2[i]), "done": bool(done[i]), "phi": dict(zip(PARAM_NAMES, _floats(phi[i]))),
            }
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({"end": True, "n_transitions": len(d)}) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    lines = Path(path).read_text().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError("empty file", 1)

    def parse(lineno: int) -> dict:
        try:
            obj = json.loads(lines[lineno - 1])
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise DatasetParseError("expected a JSON object", lineno)
        return obj

    header = parse(1)
    if header.get("format") != FORMAT:
        raise DatasetParseError(f"unknown format {header.get('format')!r}", 1)
    for key in ("role", "provenance", "state_dim", "action_dim"):
        if key not in header:
            raise DatasetParseError(f"header missing {key!r}", 1)
    ds, da = int(header["state_dim"]), int(header["action_dim"])
    footer = parse(len(lines))
    if not footer.get("end"):
        raise DatasetParseError("missing end-of-dataset footer (truncated file?)", len(lines))
    n = len(lines) - 2
    if footer.get("n_transitions") != n:
        raise DatasetParseError(f"footer declares {footer.get('n_transitions')} transitions, found {n}", len(lines))

    cols: dict[str, list] = {k: [] for k in ("s", "a", "r", "s2", "done", "phi", "ep", "t")}
    for lineno in range(2, len(lines)):
        rec = parse(lineno)
        try:
            s, a, s2 = rec["s"], rec["a"], rec["s2"]
            if len(s) != ds or len(s2) != ds or len(a) != da:
                raise DatasetParseError("state/action dimension mismatch", lineno)
            phi = [float(rec["phi"][k]) for k in PARAM_NAMES]
            vals = [float(rec["r"]), *map(float, s), *map(float, a), *map(float, s2), *phi]
            if not all(math.isfinite(v) for v in vals):
                raise DatasetParseError("non-finite value", lineno)
            cols["s"].append(s)
            cols["a"].append(a)
            cols["r"].append(float(rec["r"]))
            cols["s2"].append(s2)
            cols["done"].append(bool(rec["done"]))
            cols["phi"].append(phi)
            cols["ep"].append(int(rec["ep"]))
            cols["t"].append(int(rec["t"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DatasetParseError):
                raise
            raise DatasetParseError(f"malformed transition ({exc})", lineno) from None
    if n == 0:
        raise DatasetParseError("dataset has no transitions", len(lines))
    return Dataset(
        np.array(cols["s"], dtype=float).reshape(n, ds), np.array(cols["a"], dtype=float).reshape(n, da),
        np.array(cols["r"]), np.array(cols["s2"], dtype=float).reshape(n, ds), np.array(cols["done"]),
        np.array(cols["phi"]), np.array(cols["ep"]), np.array(cols["t"]),
        header["role"], header["provenance"], bool(header.get("guarded", False)),
    )


def export_returns_csv(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    returns = dataset.episode_returns()
    phi = dataset.phi
    ep = dataset.ep
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "return", *PARAM_NAMES])
        for k, e in enumerate(np.unique(ep)):
            w.writerow([int(e), repr(float(returns[k])), *(repr(float(v)) for v in phi[ep == e][0])])

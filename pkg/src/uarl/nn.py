"""Small NumPy MLPs with hand-written backprop.

``StackedMLP`` holds ``n_members`` independent networks of identical shape in
stacked arrays so an ensemble evaluates with one batched matmul per layer.
All arithmetic is float64.
"""

from __future__ import annotations

import numpy as np


class StackedMLP:
    def __init__(
        self,
        n_members: int,
        in_dim: int,
        hidden: tuple[int, ...] = (64, 64),
        out_dim: int = 1,
        rng: np.random.Generator | None = None,
        out_activation: str | None = None,
        out_scale: float = 1.0,
    ):
        if out_activation not in (None, "tanh"):
            raise ValueError(f"unsupported output activation {out_activation!r}")
        self.n_members = int(n_members)
        self.sizes = (int(in_dim), *map(int, hidden), int(out_dim))
        self.out_activation = out_activation
        self.out_scale = float(out_scale)
        self.params: list[np.ndarray] = []
        if rng is None:
            return
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(self.n_members, fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=(self.n_members, fan_out)))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def n_params(self) -> int:
        """Parameter count of one member."""
        return sum(int(np.prod(p.shape[1:])) for p in self.params)

    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(p.shape[1:]) for p in self.params]

    def copy(self) -> StackedMLP:
        other = StackedMLP(self.n_members, self.sizes[0], self.sizes[1:-1], self.sizes[-1], None, self.out_activation, self.out_scale)
        other.params = [p.copy() for p in self.params]
        return other

    def member_flat(self, i: int) -> np.ndarray:
        return np.concatenate([p[i].ravel() for p in self.params])

    def set_member_flat(self, i: int, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        offset = 0
        for p in self.params:
            n = int(np.prod(p.shape[1:]))
            p[i] = flat[offset : offset + n].reshape(p.shape[1:])
            offset += n

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Evaluate all members.

        ``x`` is ``(B, in)`` (shared by members) or ``(n_members, B, in)``.
        Returns outputs of shape ``(n_members, B, out)`` and a cache for
        :meth:`backward`.
        """
        acts = [x]
        h = x
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            z = np.matmul(h, W) + b[:, None, :]
            if k < n_layers - 1:
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                h = z
        if self.out_activation == "tanh":
            t = np.tanh(h)
            acts.append(t)
            h = self.out_scale * t
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list, dout: np.ndarray, need_input_grad: bool = False):
        """Backprop ``dout`` (shape of the forward output) through the cache.

        Returns per-parameter gradients (stacked like ``params``) and, when
        requested, the gradient w.r.t. the input.
        """
        n_layers = len(self.params) // 2
        g = dout
        if self.out_activation == "tanh":
            t = acts[-1]
            g = g * self.out_scale * (1.0 - t * t)
            acts = acts[:-1]
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for k in reversed(range(n_layers)):
            h_in = acts[k]
            W = self.params[2 * k]
            if h_in.ndim == 2:
                grads[2 * k] = np.matmul(h_in.T[None], g)
            else:
                grads[2 * k] = np.matmul(h_in.transpose(0, 2, 1), g)
            grads[2 * k + 1] = g.sum(axis=1)
            if k > 0 or need_input_grad:
                dh = np.matmul(g, W.transpose(0, 2, 1))
                if k > 0:
                    g = dh * (acts[k] > 0)
                else:
                    g = dh
        return grads, (g if need_input_grad else None)

    def to_dict(self) -> dict:
        return {
            "n_members": self.n_members,
            "sizes": list(self.sizes),
            "out_activation": self.out_activation,
            "out_scale": self.out_scale,
            "layer_shapes": [list(s) for s in self.shapes()],
            "members": [self.member_flat(i).tolist() for i in range(self.n_members)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> StackedMLP:
        sizes = d["sizes"]
        net = cls(d["n_members"], sizes[0], tuple(sizes[1:-1]), sizes[-1], None, d.get("out_activation"), d.get("out_scale", 1.0))
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            net.params.append(np.zeros((net.n_members, fan_in, fan_out)))
            net.params.append(np.zeros((net.n_members, fan_out)))
        if [list(s) for s in net.shapes()] != [list(s) for s in d["layer_shapes"]]:
            raise ValueError("layer_shapes metadata does not match sizes")
        for i, flat in enumerate(d["members"]):
            net.set_member_flat(i, np.asarray(flat, dtype=float))
        return net


def flatten_member_grads(grads: list[np.ndarray], i: int) -> np.ndarray:
    return np.concatenate([g[i].ravel() for g in grads])


class Adam:
    """Elementwise Adam; with stacked parameters each member adapts independently."""

    def __init__(self, params: list[np.ndarray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

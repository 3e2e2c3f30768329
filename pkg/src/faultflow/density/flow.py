"""Affine coupling flow (RealNVP) with analytic gradients.

Works in standardized coordinates ``u``. ``forward`` maps data to the latent
space, ``z = f(u)``, and also returns ``log|det df/du|`` per row. Each layer
keeps the masked half of the input fixed and transforms the rest::

    y = m*u + (1 - m) * (u * exp(s(m*u)) + t(m*u))

``s`` and ``t`` are two-hidden-layer tanh networks; ``s`` is soft-clamped to
``(-clamp, clamp)``. All weights live in one flat vector so the optimizer,
persistence and gradient checks see a single array.
"""

from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
_NET_SHAPES = ("W1", "b1", "W2", "b2", "W3", "b3")


def half_masks(d: int, n_layers: int) -> list[np.ndarray]:
    """Alternating half masks; 1 marks a pass-through (conditioning) dim."""
    first = np.zeros(d)
    first[: d // 2] = 1.0
    return [first.copy() if k % 2 == 0 else 1.0 - first for k in range(n_layers)]


def standard_normal_log_prob(z: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * LOG_2PI


class CouplingFlow:
    def __init__(self, d: int, hidden: int = 32, n_layers: int = 4, clamp: float = 5.0) -> None:
        self.d = d
        self.hidden = hidden
        self.n_layers = n_layers
        self.clamp = clamp
        self.masks = half_masks(d, n_layers)
        self._layout: list[tuple[str, int, tuple[int, ...]]] = []
        offset = 0
        shapes = {
            "W1": (d, hidden), "b1": (hidden,),
            "W2": (hidden, hidden), "b2": (hidden,),
            "W3": (hidden, d), "b3": (d,),
        }
        for k in range(n_layers):
            for net in ("s", "t"):
                for name in _NET_SHAPES:
                    shape = shapes[name]
                    self._layout.append((f"{k}.{net}.{name}", offset, shape))
                    offset += int(np.prod(shape))
        self.size = offset
        self.theta = np.zeros(offset)

    # -- parameter access -------------------------------------------------

    def views(self, flat: np.ndarray) -> list[dict[str, dict[str, np.ndarray]]]:
        layers: list[dict[str, dict[str, np.ndarray]]] = [{"s": {}, "t": {}} for _ in range(self.n_layers)]
        for key, offset, shape in self._layout:
            k, net, name = key.split(".")
            size = int(np.prod(shape))
            layers[int(k)][net][name] = flat[offset : offset + size].reshape(shape)
        return layers

    @property
    def params(self) -> list[dict[str, dict[str, np.ndarray]]]:
        return self.views(self.theta)

    def parameter_names(self) -> list[tuple[str, int, tuple[int, ...]]]:
        return list(self._layout)

    def init_random(self, rng: np.random.Generator, output_scale: float = 0.0) -> None:
        """Glorot-style hidden weights; output layers scaled by ``output_scale``.

        ``output_scale=0`` gives the identity flow, the usual starting point
        for training.
        """
        self.theta[:] = 0.0
        for layer in self.params:
            for net in layer.values():
                for name in ("W1", "W2"):
                    w = net[name]
                    w[...] = rng.normal(0.0, 1.0 / math.sqrt(w.shape[0]), size=w.shape)
                if output_scale:
                    for name in ("W3", "b3", "b1", "b2"):
                        p = net[name]
                        p[...] = rng.normal(0.0, output_scale, size=p.shape)

    # -- transforms --------------------------------------------------------

    @staticmethod
    def _mlp(x: np.ndarray, net: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        h1 = np.tanh(x @ net["W1"] + net["b1"])
        h2 = np.tanh(h1 @ net["W2"] + net["b2"])
        return h1, h2, h2 @ net["W3"] + net["b3"]

    def _st(self, xa: np.ndarray, layer: dict, mask: np.ndarray):
        s_h1, s_h2, s_raw = self._mlp(xa, layer["s"])
        th = np.tanh(s_raw / self.clamp)
        s = self.clamp * th * (1.0 - mask)
        t_h1, t_h2, t_raw = self._mlp(xa, layer["t"])
        t = t_raw * (1.0 - mask)
        return s, t, (s_h1, s_h2, th, t_h1, t_h2)

    def forward(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z, logdet, _ = self._forward(u, keep=False)
        return z, logdet

    def _forward(self, u: np.ndarray, keep: bool):
        x = np.asarray(u, dtype=np.float64)
        logdet = np.zeros(x.shape[0])
        caches = []
        for layer, mask in zip(self.params, self.masks):
            xa = x * mask
            s, t, acts = self._st(xa, layer, mask)
            es = np.exp(s)
            y = xa + (1.0 - mask) * (x * es + t)
            logdet += s.sum(axis=1)
            if keep:
                caches.append((x, xa, es, acts))
            x = y
        return x, logdet, caches

    def inverse(self, z: np.ndarray) -> np.ndarray:
        y = np.asarray(z, dtype=np.float64)
        for layer, mask in zip(reversed(self.params), reversed(self.masks)):
            ya = y * mask
            s, t, _ = self._st(ya, layer, mask)
            y = ya + (1.0 - mask) * ((y - t) * np.exp(-s))
        return y

    # -- training objective --------------------------------------------------

    def log_prob(self, u: np.ndarray) -> np.ndarray:
        """Log-density in standardized coordinates (no standardization term)."""
        z, logdet = self.forward(u)
        return standard_normal_log_prob(z) + logdet

    def nll_and_grad(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean negative log-likelihood of a batch and its gradient wrt ``theta``."""
        n = u.shape[0]
        z, logdet, caches = self._forward(u, keep=True)
        loss = -float(np.mean(standard_normal_log_prob(z) + logdet))
        grad = np.zeros_like(self.theta)
        gviews = self.views(grad)
        gy = z / n
        g_logdet = -1.0 / n
        params = self.params
        for k in range(self.n_layers - 1, -1, -1):
            mask = self.masks[k]
            inv = 1.0 - mask
            x, xa, es, (s_h1, s_h2, th, t_h1, t_h2) = caches[k]
            gs = inv * (gy * x * es + g_logdet)
            gt = gy * inv
            gx = mask * gy + inv * gy * es
            gxa = self._mlp_backward(xa, s_h1, s_h2, gs * (1.0 - th * th), params[k]["s"], gviews[k]["s"])
            gxa += self._mlp_backward(xa, t_h1, t_h2, gt, params[k]["t"], gviews[k]["t"])
            gy = gx + mask * gxa
        return loss, grad

    @staticmethod
    def _mlp_backward(x, h1, h2, g_out, net, gnet) -> np.ndarray:
        gnet["W3"][...] = h2.T @ g_out
        gnet["b3"][...] = g_out.sum(axis=0)
        ga2 = (g_out @ net["W3"].T) * (1.0 - h2 * h2)
        gnet["W2"][...] = h1.T @ ga2
        gnet["b2"][...] = ga2.sum(axis=0)
        ga1 = (ga2 @ net["W2"].T) * (1.0 - h1 * h1)
        gnet["W1"][...] = x.T @ ga1
        gnet["b1"][...] = ga1.sum(axis=0)
        return ga1 @ net["W1"].T

    # -- persistence -----------------------------------------------------------

    def to_json(self) -> dict:
        layers = []
        for layer, mask in zip(self.params, self.masks):
            layers.append(
                {
                    "mask": mask.astype(int).tolist(),
                    "scale_net": {name: layer["s"][name].tolist() for name in _NET_SHAPES},
                    "translation_net": {name: layer["t"][name].tolist() for name in _NET_SHAPES},
                }
            )
        return {"hidden_units": self.hidden, "clamp": self.clamp, "layers": layers}

    @classmethod
    def from_json(cls, doc: dict, d: int) -> CouplingFlow:
        flow = cls(d, hidden=int(doc["hidden_units"]), n_layers=len(doc["layers"]), clamp=float(doc["clamp"]))
        for k, (entry, layer) in enumerate(zip(doc["layers"], flow.params)):
            flow.masks[k] = np.asarray(entry["mask"], dtype=np.float64)
            for net, key in (("s", "scale_net"), ("t", "translation_net")):
                for name in _NET_SHAPES:
                    layer[net][name][...] = np.asarray(entry[key][name], dtype=np.float64)
        return flow


class AffineWhitening:
    """Full- or diagonal-covariance Gaussian as a linear flow ``z = L^-1 (u - mu)``."""

    def __init__(self, mu: np.ndarray, chol: np.ndarray) -> None:
        self.mu = np.asarray(mu, dtype=np.float64)
        self.chol = np.asarray(chol, dtype=np.float64)
        self.d = self.mu.shape[0]
        self._logdet = -float(np.sum(np.log(np.diag(self.chol))))

    @classmethod
    def fit(cls, u: np.ndarray, diagonal: bool = False) -> AffineWhitening:
        mu = u.mean(axis=0)
        cov = np.atleast_2d(np.cov(u, rowvar=False, bias=True))
        if diagonal:
            cov = np.diag(np.diag(cov))
        cov = cov + 1e-12 * np.eye(cov.shape[0])
        return cls(mu, np.linalg.cholesky(cov))

    def forward(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        from scipy.linalg import solve_triangular

        z = solve_triangular(self.chol, (u - self.mu).T, lower=True).T
        return z, np.full(u.shape[0], self._logdet)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z @ self.chol.T + self.mu

    def log_prob(self, u: np.ndarray) -> np.ndarray:
        z, logdet = self.forward(u)
        return standard_normal_log_prob(z) + logdet

    def to_json(self) -> dict:
        return {"mean": self.mu.tolist(), "cholesky": self.chol.tolist()}

    @classmethod
    def from_json(cls, doc: dict, d: int) -> AffineWhitening:
        return cls(np.asarray(doc["mean"]), np.asarray(doc["cholesky"]).reshape(d, d))

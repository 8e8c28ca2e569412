"""Gated low-rank representation interventions.

A ReFT edit moves a hidden state inside the row space of ``R`` toward the
affine target ``W h + b``::

    phi(h) = R^T (W h + b - R h),      reft(h) = h + phi(h)

A GRUN module scales that edit by a learned soft gate in (0, 1)::

    grun(h) = h + g(h) * phi(h)

and sequential requests stack as ``h + c * sum_j g_j(h) * phi_j(h)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .nn import tensor as T
from .nn.tensor import Tensor


def _check_dim(h: Tensor, d: int, what: str) -> None:
    if h.shape[-1] != d:
        raise ContractError(f"{what}: expected last dimension {d}, got input of shape {h.shape}")


@dataclass
class ReftParams:
    R: Tensor
    W: Tensor
    b: Tensor

    def __post_init__(self):
        r, d = self.R.shape
        if r < 1:
            raise ContractError("ReFT rank must be at least 1")
        if r > d:
            raise ContractError(f"ReFT rank {r} exceeds model width {d}")
        if self.W.shape != (r, d) or self.b.shape != (r,):
            raise ContractError(
                f"ReFT shapes inconsistent: R {self.R.shape}, W {self.W.shape}, b {self.b.shape}"
            )

    @property
    def rank(self) -> int:
        return self.R.shape[0]

    @property
    def dim(self) -> int:
        return self.R.shape[1]

    @classmethod
    def init(cls, d: int, rank: int = 4, rng=None, dtype=np.float32) -> ReftParams:
        """Orthonormal R (QR of a Gaussian), W = R, b = 0: the identity edit."""
        if rank < 1:
            raise ContractError("ReFT rank must be at least 1")
        if rank > d:
            raise ContractError(f"ReFT rank {rank} exceeds model width {d}")
        rng = rng if rng is not None else np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.normal(size=(d, rank)))
        R = q.T.astype(dtype)
        return cls(
            Tensor(R.copy(), dtype=dtype),
            Tensor(R.copy(), dtype=dtype),
            Tensor(np.zeros(rank, dtype=dtype), dtype=dtype),
        )

    def parameters(self) -> list[Tensor]:
        return [self.R, self.W, self.b]

    def phi(self, h: Tensor) -> Tensor:
        _check_dim(h, self.dim, "reft")
        # (W - R) h is exactly zero at the identity initialisation
        return (h @ (self.W - self.R).T + self.b) @ self.R


def reft_apply(p: ReftParams, h) -> Tensor:
    h = T.as_tensor(h, like=p.R)
    return h + p.phi(h)


class Gate:
    """Soft gate: sigmoid of a linear or 3-layer tanh MLP regression."""

    def __init__(self, kind: str, params: dict[str, Tensor]):
        if kind not in ("linear", "mlp"):
            raise ConfigError(f"unknown gate kind {kind!r}")
        self.kind = kind
        self.params = params

    @classmethod
    def linear(cls, d: int, dtype=np.float32) -> Gate:
        return cls("linear", {
            "w": Tensor(np.zeros(d, dtype=dtype), dtype=dtype),
            "b": Tensor(np.zeros((), dtype=dtype), dtype=dtype),
        })

    @classmethod
    def mlp(cls, d: int, hidden: int = 16, rng=None, dtype=np.float32) -> Gate:
        # output layer at zero so the gate starts at exactly 0.5
        rng = rng if rng is not None else np.random.default_rng(0)

        def dense(n_in, n_out):
            return Tensor(rng.normal(0, 1 / math.sqrt(n_in), size=(n_in, n_out)).astype(dtype), dtype=dtype)

        return cls("mlp", {
            "w1": dense(d, hidden), "b1": Tensor(np.zeros(hidden, dtype=dtype), dtype=dtype),
            "w2": dense(hidden, hidden), "b2": Tensor(np.zeros(hidden, dtype=dtype), dtype=dtype),
            "w3": Tensor(np.zeros(hidden, dtype=dtype), dtype=dtype),
            "b3": Tensor(np.zeros((), dtype=dtype), dtype=dtype),
        })

    @property
    def input_dim(self) -> int:
        return self.params["w" if self.kind == "linear" else "w1"].shape[0]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def logit(self, h: Tensor) -> Tensor:
        _check_dim(h, self.input_dim, "gate")
        p = self.params
        if self.kind == "linear":
            return h @ p["w"] + p["b"]
        z = T.tanh(h @ p["w1"] + p["b1"])
        z = T.tanh(z @ p["w2"] + p["b2"])
        return z @ p["w3"] + p["b3"]

    def __call__(self, h: Tensor) -> Tensor:
        return T.sigmoid(self.logit(h))

    def size(self) -> int:
        return sum(t.size for t in self.params.values())


def gate_eval(g: Gate, h) -> Tensor:
    h = T.as_tensor(h, like=g.parameters()[0])
    return g(h)


@dataclass
class GrunModule:
    reft: ReftParams
    gate: Gate
    layer: int
    # None: learned gate; a number pins the gate output (reft-only uses 1.0)
    gate_override: float | None = None

    @classmethod
    def init(cls, d: int, layer: int, rank: int = 4, gate: str = "linear",
             gate_hidden: int = 16, rng=None, dtype=np.float32) -> GrunModule:
        rng = rng if rng is not None else np.random.default_rng(0)
        reft = ReftParams.init(d, rank, rng, dtype)
        g = Gate.linear(d, dtype) if gate == "linear" else Gate.mlp(d, gate_hidden, rng, dtype)
        return cls(reft, g, layer)

    def parameters(self, include_gate: bool = True) -> list[Tensor]:
        params = self.reft.parameters()
        if include_gate and self.gate_override is None:
            params += self.gate.parameters()
        return params

    def gate_value(self, h: Tensor) -> Tensor:
        if self.gate_override is not None:
            return Tensor(np.full(h.shape[:-1], self.gate_override, dtype=h.dtype), dtype=h.dtype)
        return self.gate(h)

    def update(self, h: Tensor) -> Tensor:
        """g(h) * phi(h)."""
        g = self.gate_value(h)
        return g.reshape(g.shape + (1,)) * self.reft.phi(h)

    def __call__(self, h: Tensor) -> Tensor:
        return h + self.update(h)


def grun_apply(m: GrunModule, h) -> Tensor:
    h = T.as_tensor(h, like=m.reft.R)
    return m(h)


@dataclass
class GrunStack:
    """Sequential requests, each a {layer: GrunModule} map, scaled by ``coeff``."""

    requests: list[dict[int, GrunModule]] = field(default_factory=list)
    coeff: float = 1.0

    def __post_init__(self):
        if not self.coeff > 0:
            raise ConfigError(f"stack coefficient must be positive, got {self.coeff}")
        if self.requests:
            layers = set(self.requests[0])
            for req in self.requests[1:]:
                if set(req) != layers:
                    raise ContractError("all requests in a stack must share one layer set")

    @property
    def layers(self) -> list[int]:
        return sorted(self.requests[0]) if self.requests else []

    def __len__(self) -> int:
        return len(self.requests)

    def add_request(self, modules: Mapping[int, GrunModule]) -> None:
        if self.requests and set(modules) != set(self.requests[0]):
            raise ContractError("new request must use the same layers as earlier requests")
        self.requests.append(dict(modules))

    def compose(self, layer: int, h: Tensor) -> Tensor:
        if not self.requests:
            raise ContractError("compose on an empty stack")
        total = None
        for req in self.requests:
            u = req[layer].update(h)
            total = u if total is None else total + u
        if self.coeff != 1.0:
            total = total * h.dtype.type(self.coeff)
        return h + total

    def hooks(self) -> dict[int, callable]:
        return {l: (lambda h, _l=l: self.compose(_l, h)) for l in self.layers}

    def modules(self) -> list[GrunModule]:
        return [m for req in self.requests for _, m in sorted(req.items())]

    # ------------------------------------------------------------ persistence
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"grun/coeff": np.asarray([self.coeff], dtype=np.float32)}
        for j, req in enumerate(self.requests):
            for layer, m in sorted(req.items()):
                p = f"grun/{j}/{layer}/"
                out[p + "R"] = m.reft.R.data
                out[p + "W"] = m.reft.W.data
                out[p + "b"] = m.reft.b.data
                for k, t in m.gate.params.items():
                    out[p + f"gate.{k}"] = t.data
                if m.gate_override is not None:
                    out[p + "gate_override"] = np.asarray([m.gate_override], dtype=np.float32)
        return out

    @classmethod
    def from_state_dict(cls, tensors: Mapping[str, np.ndarray]) -> GrunStack:
        coeff = float(tensors.get("grun/coeff", np.ones(1))[0])
        grouped: dict[int, dict[int, dict[str, np.ndarray]]] = {}
        for key, arr in tensors.items():
            parts = key.split("/")
            if parts[0] != "grun" or len(parts) != 4:
                continue
            grouped.setdefault(int(parts[1]), {}).setdefault(int(parts[2]), {})[parts[3]] = arr
        requests = []
        for j in sorted(grouped):
            req = {}
            for layer, items in sorted(grouped[j].items()):
                t = {k: Tensor(v, dtype=v.dtype) for k, v in items.items()}
                reft = ReftParams(t["R"], t["W"], t["b"])
                gate_params = {k[5:]: v for k, v in t.items() if k.startswith("gate.")}
                kind = "linear" if "w" in gate_params else "mlp"
                override = float(items["gate_override"][0]) if "gate_override" in items else None
                req[layer] = GrunModule(reft, Gate(kind, gate_params), layer, override)
            requests.append(req)
        return cls(requests, coeff)

    def copy(self) -> GrunStack:
        return GrunStack.from_state_dict({k: v.copy() for k, v in self.state_dict().items()})


def compose_sequential(stack: GrunStack, h, layer: int | None = None) -> Tensor:
    if not stack.requests:
        raise ContractError("compose_sequential needs at least one request")
    layer = stack.layers[0] if layer is None else layer
    h = T.as_tensor(h, like=stack.requests[0][layer].reft.R)
    return stack.compose(layer, h)


# ------------------------------------------------------------- accounting
def grun_param_formula(d: int, rank: int, n_layers: int, gate: str = "linear", hidden: int = 16) -> int:
    """Closed-form trainable-parameter count of one GRUN request."""
    if rank < 1:
        raise ContractError("ReFT rank must be at least 1")
    reft = 2 * rank * d + rank
    if gate == "linear":
        g = d + 1
    elif gate == "mlp":
        g = (d + 1) * hidden + (hidden + 1) * hidden + (hidden + 1)
    else:
        raise ConfigError(f"unknown gate kind {gate!r}")
    return n_layers * (reft + g)


def param_count(modules: Iterable[GrunModule], model_params: int | None = None) -> tuple[int, float | None]:
    """Exact parameter count of ``modules`` and its ratio to ``model_params``."""
    count = 0
    for m in modules:
        if m.reft.rank < 1:
            raise ContractError("ReFT rank must be at least 1")
        count += sum(t.size for t in m.reft.parameters()) + m.gate.size()
    ratio = None if not model_params else count / model_params
    return count, ratio


def select_layers(n_layers: int, policy: str | Sequence[int] = "default") -> list[int]:
    """Layers (1-based, ascending) that receive GRUN modules.

    The default places modules at the last layer and 7 and 12 layers below it
    when the model is deep enough; shallower models use a spacing of 2.
    """
    if n_layers < 1:
        raise ConfigError("n_layers must be at least 1")
    if isinstance(policy, str):
        if policy != "default":
            raise ConfigError(f"unknown layer policy {policy!r}")
        if n_layers - 12 >= 1:
            layers = [n_layers, n_layers - 7, n_layers - 12]
        else:
            layers = [l for l in (n_layers, n_layers - 2, n_layers - 4) if l >= 1]
        return sorted(layers)
    layers = [int(l) for l in policy]
    if len(set(layers)) != len(layers):
        raise ConfigError(f"duplicate layers in {layers}")
    bad = [l for l in layers if not 1 <= l <= n_layers]
    if bad:
        raise ConfigError(f"layers {bad} outside 1..{n_layers}")
    return sorted(layers)

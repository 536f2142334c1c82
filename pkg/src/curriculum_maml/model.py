"""Functional feed-forward base learner.

Parameters live outside the network in a :class:`ParameterSet`; the forward
pass takes them explicitly so adapted parameters can be evaluated without
touching the originals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ShapeError, Var


@dataclass(frozen=True)
class FfnSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ValueError("FfnSpec.hidden must contain at least one layer")
        for size in (self.input_dim, self.output_dim, *self.hidden):
            if size < 1:
                raise ValueError(f"layer sizes must be positive, got {size}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def num_params(self) -> int:
        sizes = self.layer_sizes
        return int(np.sum([o * i + o for i, o in zip(sizes[:-1], sizes[1:])]))


class ParameterSet:
    """Ordered, immutable collection of named float64 arrays."""

    __slots__ = ("_names", "_arrays")

    def __init__(self, entries):
        if isinstance(entries, Mapping):
            entries = entries.items()
        names, arrays = [], []
        for name, value in entries:
            arr = np.array(value, dtype=np.float64)
            arr.flags.writeable = False
            names.append(str(name))
            arrays.append(arr)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        self._names = tuple(names)
        self._arrays = tuple(arrays)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return self._arrays

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return zip(self._names, self._arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{n}{list(a.shape)}" for n, a in self.items())
        return f"ParameterSet({shapes})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return self.congruent(other) and all(
            np.array_equal(a, b) for a, b in zip(self._arrays, other._arrays)
        )

    __hash__ = None

    @property
    def num_params(self) -> int:
        return int(np.sum([a.size for a in self._arrays]))

    def congruent(self, other: "ParameterSet") -> bool:
        return self._names == other._names and all(
            a.shape == b.shape for a, b in zip(self._arrays, other._arrays)
        )

    def _check(self, other: "ParameterSet") -> None:
        if not self.congruent(other):
            raise ShapeError(f"parameter sets are not congruent: {self!r} vs {other!r}")

    def map(self, fn) -> "ParameterSet":
        return ParameterSet((n, fn(a)) for n, a in self.items())

    def axpy(self, grads: "ParameterSet", step: float) -> "ParameterSet":
        """``self - step * grads`` entry-wise."""
        self._check(grads)
        return ParameterSet(
            (n, a - step * g) for n, a, g in zip(self._names, self._arrays, grads._arrays)
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays])

    def unflatten(self, vector: np.ndarray) -> "ParameterSet":
        """A congruent set whose entries are filled from ``vector``."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.num_params,):
            raise ShapeError(f"expected flat vector of {self.num_params}, got {vector.shape}")
        out, pos = [], 0
        for n, a in self.items():
            out.append((n, vector[pos:pos + a.size].reshape(a.shape)))
            pos += a.size
        return ParameterSet(out)

    def as_vars(self, graph: Graph, trainable: bool = True) -> dict[str, Var]:
        make = graph.variable if trainable else graph.constant
        return {n: make(a) for n, a in self.items()}

    @classmethod
    def from_vars(cls, params: Mapping[str, Var]) -> "ParameterSet":
        return cls((n, v.value) for n, v in params.items())


Params = Union[ParameterSet, Mapping[str, Var]]


def init_params(spec: FfnSpec, rng_seed: int) -> ParameterSet:
    """Glorot-uniform weights and zero biases, deterministic in ``rng_seed``.

    Weights are stored ``[out, in]``; entries are ``W0, b0, W1, b1, ...``.
    """
    rng = np.random.default_rng(rng_seed)
    sizes = spec.layer_sizes
    entries = []
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        entries.append((f"W{layer}", rng.uniform(-limit, limit, size=(fan_out, fan_in))))
        entries.append((f"b{layer}", np.zeros(fan_out)))
    return ParameterSet(entries)


def _num_layers(names: Sequence[str]) -> int:
    n = 0
    while f"W{n}" in names:
        n += 1
    if n == 0 or len(names) != 2 * n or any(f"b{i}" not in names for i in range(n)):
        raise ShapeError(f"not a feed-forward parameter set: {list(names)}")
    return n


def forward(params: Params, x, graph: Graph) -> Var:
    """Logits of the ReLU network for a ``[batch, input_dim]`` input.

    ``params`` may be a :class:`ParameterSet` (inserted as constants) or a
    mapping of names to :class:`Var` already living in ``graph``.
    """
    if isinstance(params, ParameterSet):
        params = params.as_vars(graph, trainable=False)
    names = list(params)
    n_layers = _num_layers(names)

    h = x if isinstance(x, Var) else graph.constant(x)
    if len(h.shape) != 2:
        raise ShapeError(f"input must be [batch, dim], got shape {h.shape}")
    batch = h.shape[0]
    for layer in range(n_layers):
        w, b = params[f"W{layer}"], params[f"b{layer}"]
        if len(w.shape) != 2 or h.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
            raise ShapeError(
                f"layer {layer}: input {h.shape}, weight {w.shape}, bias {b.shape} do not fit"
            )
        h = ad.add(ad.matmul(h, ad.transpose(w)), ad.broadcast_rows(b, batch))
        if layer < n_layers - 1:
            h = ad.relu(h)
    return h


def axpy(params: Mapping[str, Var], grads: Sequence, step: float) -> dict[str, Var]:
    """``params - step * grads`` recorded in the graph.

    ``grads`` is aligned with ``params`` order; entries may be :class:`Var`
    (keeps the dependency for second-order differentiation) or arrays
    (treated as constants).
    """
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    out = {}
    for (name, p), g in zip(params.items(), grads):
        if not isinstance(g, Var):
            g = p.graph.constant(g)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} vs parameter shape {p.shape}")
        out[name] = ad.sub(p, ad.scale(g, step)) if step != 0.0 else p
    return out

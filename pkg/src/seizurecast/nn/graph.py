"""Parameter registry and the node graph that drives forward/backward passes."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np


class Parameter:
    """A named trainable array with a gradient slot of identical shape."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ParameterStore:
    """Ordered registry of parameters.

    Every node that owns weights holds references to entries of one store, so
    two nodes built from the same store entry read and write the same arrays.
    This is how the Siamese branches share weights.
    """

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        param = Parameter(name, value)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        """Total number of scalar trainable values."""
        return int(sum(p.value.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self._params.items():
            value = np.asarray(state[name])
            if value.shape != p.value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.value.shape}")
            p.value[...] = value

    def astype(self, dtype) -> None:
        """Cast every parameter (and its gradient slot) in place."""
        for p in self._params.values():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)


class Graph:
    """A DAG of nodes evaluated in insertion order.

    Nodes can only reference names that already exist, so insertion order is a
    topological order and cycles cannot be expressed.  Each node instance
    caches what it needs for its own backward pass; applying the same weights
    twice therefore means adding two node instances that share parameters.

    Convolutions fed directly by a graph input skip their input gradient
    unless ``input_grads`` is set.
    """

    def __init__(self, params: ParameterStore | None = None, input_grads: bool = False):
        self.input_grads = input_grads
        self.params = params if params is not None else ParameterStore()
        self.input_names: list[str] = []
        self._nodes: dict[str, tuple[object, tuple[str, ...]]] = {}
        self.values: dict[str, np.ndarray] = {}

    def input(self, name: str) -> str:
        self._check_new(name)
        self.input_names.append(name)
        return name

    def add(self, name: str, node, *inputs: str) -> str:
        self._check_new(name)
        for src in inputs:
            if src not in self._nodes and src not in self.input_names:
                raise KeyError(f"node {name!r} references unknown input {src!r}")
        if hasattr(node, "input_grad") and all(s in self.input_names for s in inputs):
            node.input_grad = self.input_grads
        self._nodes[name] = (node, tuple(inputs))
        return name

    def _check_new(self, name: str) -> None:
        if name in self._nodes or name in self.input_names:
            raise KeyError(f"duplicate graph name {name!r}")

    def node(self, name: str):
        return self._nodes[name][0]

    @property
    def node_names(self) -> list[str]:
        return list(self._nodes)

    def _ancestors(self, outputs) -> set[str]:
        needed: set[str] = set()
        stack = list(outputs)
        while stack:
            name = stack.pop()
            if name in needed:
                continue
            needed.add(name)
            if name in self._nodes:
                stack.extend(self._nodes[name][1])
        return needed

    def forward(
        self,
        feeds: Mapping[str, np.ndarray],
        outputs=None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> dict[str, np.ndarray]:
        """Evaluate the nodes needed for ``outputs`` (all nodes if None)."""
        needed = self._ancestors(outputs) if outputs is not None else None
        values: dict[str, np.ndarray] = {}
        for name in self.input_names:
            if needed is None or name in needed:
                if name not in feeds:
                    raise KeyError(f"missing feed for input {name!r}")
                values[name] = feeds[name]
        for name, (node, inputs) in self._nodes.items():
            if needed is not None and name not in needed:
                continue
            values[name] = node.forward(*(values[s] for s in inputs), training=training, rng=rng)
        self.values = values
        return values

    def backward(self, grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Back-propagate seed gradients; parameter grads accumulate in place.

        Returns the gradients with respect to the graph inputs that were
        reached.
        """
        acc: dict[str, np.ndarray] = {k: np.asarray(v) for k, v in grads.items()}
        for name in reversed(list(self._nodes)):
            if name not in acc or name not in self.values:
                continue
            node, inputs = self._nodes[name]
            in_grads = node.backward(acc.pop(name))
            for src, g in zip(inputs, in_grads):
                if g is None:
                    continue
                acc[src] = acc[src] + g if src in acc else g
        return {k: v for k, v in acc.items() if k in self.input_names}

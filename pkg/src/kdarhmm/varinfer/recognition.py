"""Recognition network and the structured local posterior it induces."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import diffcore as dc
from ..arhmm import SeriesWindow, StatePosterior, _to_state_posterior, hmm_posterior, recognition_inputs
from ..diffcore import Tensor


@dataclass
class RecognitionNet:
    """Feed-forward tanh network from ``[x_t; x_{t-1}; ...; x_{t-r}]`` to K state potentials."""

    num_states: int
    obs_dim: int
    ar_order: int
    hidden_sizes: tuple[int, ...] = (32,)
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.obs_dim * (self.ar_order + 1)

    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_sizes, self.num_states]

    def initialize(self, rng: np.random.Generator) -> "RecognitionNet":
        sizes = self.layer_sizes()
        self.weights = {}
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.weights[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
            self.weights[f"c{i}"] = np.zeros(n_out)
        return self

    def zeros(self) -> "RecognitionNet":
        sizes = self.layer_sizes()
        self.weights = {}
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.weights[f"W{i}"] = np.zeros((n_in, n_out))
            self.weights[f"c{i}"] = np.zeros(n_out)
        return self

    @property
    def num_layers(self) -> int:
        return len(self.hidden_sizes) + 1

    def apply(self, weights: dict, inputs: np.ndarray) -> Tensor:
        """Potentials (N, T, K) for inputs (N, T, input_dim)."""
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 3 or inputs.shape[2] != self.input_dim:
            raise ValueError(f"recognition net expects (N, T, {self.input_dim}) inputs, got {inputs.shape}")
        N, T, Din = inputs.shape
        h = Tensor(inputs.reshape(N * T, Din))
        for i in range(self.num_layers):
            h = h @ weights[f"W{i}"] + weights[f"c{i}"]
            if i < self.num_layers - 1:
                h = dc.tanh(h)
        return h.reshape(N, T, self.num_states)

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "obs_dim": self.obs_dim,
            "ar_order": self.ar_order,
            "hidden_sizes": list(self.hidden_sizes),
            "weights": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self.weights.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecognitionNet":
        net = cls(int(d["num_states"]), int(d["obs_dim"]), int(d["ar_order"]), tuple(d["hidden_sizes"]))
        net.weights = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d["weights"].items()}
        return net


def recognition_potentials(net: RecognitionNet, series: SeriesWindow, weights: dict | None = None) -> np.ndarray | Tensor:
    """K x T potentials for one series (a tensor when ``weights`` are tape-bound)."""
    if series.obs_dim != net.obs_dim or series.ar_order != net.ar_order:
        raise ValueError(
            f"series (D={series.obs_dim}, r={series.ar_order}) does not match net (D={net.obs_dim}, r={net.ar_order})"
        )
    inputs = recognition_inputs(series.full()[None], net.ar_order)
    out = net.apply(net.weights if weights is None else weights, inputs)
    if weights is None:
        return out.value[0].T.copy()
    return out[0].transpose()


def structured_local_posterior(potentials, transitions, initial) -> StatePosterior:
    """Chain posterior with the K x T ``potentials`` as per-step log-scores."""
    potentials = np.asarray(dc.value_of(potentials), dtype=np.float64)
    transitions = np.asarray(transitions, dtype=np.float64)
    initial = np.asarray(initial, dtype=np.float64)
    K = potentials.shape[0]
    if transitions.shape != (K, K) or initial.shape != (K,):
        raise ValueError(f"potentials have K={K} but transitions {transitions.shape}, initial {initial.shape}")
    if np.any(transitions < 0) or np.any(np.abs(transitions.sum(axis=1) - 1) > 1e-10):
        raise ValueError("transitions are not row-stochastic")
    if np.any(initial < 0) or abs(initial.sum() - 1) > 1e-10:
        raise ValueError("initial distribution is not a probability vector")
    post = hmm_posterior(dc.log(initial), dc.log(transitions), potentials.T[None])
    return _to_state_posterior(post, 0)

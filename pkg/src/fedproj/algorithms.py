"""Mirrored client/server state machines for the eight compressed-FL algorithms.

All algorithms share the same round shape: every client turns the broadcast
model and its local stochastic gradient into a compact upload, and the server
reconstructs each client's descent direction from that upload and steps the
model.  What varies is the client-side bookkeeping:

* ``projfl``       -- project the gradient onto the running average of the
  client's last ``K`` descent directions, send the projection coefficient
  plus the compressed orthogonal remainder; the direction update is
  ``D' = alpha * Dbar + decode(msg)`` and the server steps by ``eta/M``.
* ``projfl_ef``    -- same projection, but the learning rate is folded into
  the direction (``D' = eta*alpha*Dbar + msg``), the compressor input carries
  the accumulated error (``C(eta*g_perp + e)``), and the server steps by
  ``1/M``.
* ``fedavg``       -- compress the raw gradient, stateless.
* ``ef``           -- classic error feedback: compress ``g + zeta * e``.
* ``ef21`` / ``ef21_gamma`` -- compress the difference to the (damped)
  previous direction: ``C(g - gamma * D)``, ``D' = gamma * D + msg``.
* ``diana`` / ``diana_gamma`` -- compress the difference to a (damped) memory
  ``h`` that both sides advance; the server adds momentum
  ``D' = beta * D + gamma * h + mean(msg)`` and steps by ``eta``.

The projecting and difference-compressing families need the server to hold a
bit-exact mirror of each client's direction state; both sides run the same
reconstruction code on the same ``(coefficient, message)`` pair, so the mirror
never drifts (this is asserted every round by the harness).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import backend
from .compressors import CompressedMessage, CompressorSpec, compress, decode
from .vectors import ParamVector, RngStream

__all__ = [
    "AlgorithmKind",
    "AlgorithmConfig",
    "ClientState",
    "ServerState",
    "ClientUpload",
    "project_decompose",
    "history_average",
    "init_client_state",
    "init_server_state",
    "client_round",
    "server_round",
    "diagnostic_tilde_w",
    "mirror_matches",
    "MirrorDesyncError",
    "save_snapshot",
    "load_snapshot",
    "PROJECTION_EPS",
]

# degenerate-projection threshold on ||Dbar||^2; below it alpha = 0 and the
# full gradient goes to the compressor (covers the all-zero initialization)
PROJECTION_EPS = 1e-30

_SNAPSHOT_VERSION = 1


class MirrorDesyncError(AssertionError):
    """Server-side mirrored client state diverged from the client's."""


class AlgorithmKind(str, Enum):
    PROJFL = "projfl"
    PROJFL_EF = "projfl_ef"
    FEDAVG = "fedavg"
    EF = "ef"
    EF21 = "ef21"
    EF21_GAMMA = "ef21_gamma"
    DIANA = "diana"
    DIANA_GAMMA = "diana_gamma"


_PROJECTING = (AlgorithmKind.PROJFL, AlgorithmKind.PROJFL_EF)
_EF21_FAMILY = (AlgorithmKind.EF21, AlgorithmKind.EF21_GAMMA)
_DIANA_FAMILY = (AlgorithmKind.DIANA, AlgorithmKind.DIANA_GAMMA)
_ERROR_CARRYING = (AlgorithmKind.PROJFL_EF, AlgorithmKind.EF)


@dataclass(frozen=True)
class AlgorithmConfig:
    kind: AlgorithmKind
    eta: float
    compressor: CompressorSpec
    K: int = 3                    # history window (projecting family)
    zeta: float = 0.75            # error damping (ef)
    gamma: float = 0.9            # forgetting (ef21_gamma / diana_gamma)
    diana_alpha: float = 0.9      # memory step
    diana_beta: float = 0.1       # server momentum
    projection_layerwise: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", AlgorithmKind(self.kind))
        if not (self.eta > 0 and np.isfinite(self.eta)):
            raise ValueError(f"eta must be positive and finite, got {self.eta}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 < self.zeta <= 1.0:
            raise ValueError("zeta must be in (0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 < self.diana_alpha <= 1.0:
            raise ValueError("diana_alpha must be in (0, 1]")
        if not 0.0 <= self.diana_beta < 1.0:
            raise ValueError("diana_beta must be in [0, 1)")

    @property
    def effective_gamma(self) -> float:
        """1 for the undamped ef21/diana kinds, else the configured gamma."""
        if self.kind in (AlgorithmKind.EF21, AlgorithmKind.DIANA):
            return 1.0
        return self.gamma


@dataclass(frozen=True)
class ClientState:
    round_index: int
    history: Optional[Tuple[np.ndarray, ...]] = None  # last <=K directions, oldest first
    error: Optional[np.ndarray] = None
    direction: Optional[np.ndarray] = None
    memory: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ServerState:
    round_index: int
    w: np.ndarray
    n_clients: int
    mirror_history: Optional[Tuple[Tuple[np.ndarray, ...], ...]] = None
    mirror_direction: Optional[Tuple[np.ndarray, ...]] = None
    memory: Optional[np.ndarray] = None
    momentum: Optional[np.ndarray] = None


Coefficient = Union[float, Tuple[float, ...], None]


@dataclass(frozen=True)
class ClientUpload:
    msg: CompressedMessage
    dbar_coeff: Coefficient = None

    @property
    def n_scalars(self) -> int:
        if self.dbar_coeff is None:
            return 0
        if isinstance(self.dbar_coeff, tuple):
            return len(self.dbar_coeff)
        return 1


def project_decompose(g: ParamVector, d_bar: ParamVector) -> Tuple[float, ParamVector]:
    """Split ``g = alpha * d_bar + g_perp`` with ``d_bar . g_perp = 0``.

    Degenerates to ``alpha = 0, g_perp = g`` when ``||d_bar||^2`` is below
    :data:`PROJECTION_EPS` (the all-zero initialization makes this the round-0
    behavior: the full gradient is compressed).
    """
    if g.dim != d_bar.dim:
        raise ValueError(f"projection dims differ: {g.dim} vs {d_bar.dim}")
    alpha, perp = backend.project_decompose(g.values, d_bar.values, PROJECTION_EPS)
    return alpha, ParamVector(perp, g.layer_partition, copy=False)


def _history_mean(history: Sequence[np.ndarray]) -> np.ndarray:
    if len(history) == 1:
        return history[0]
    return np.mean(np.stack(history), axis=0)


def history_average(state: ClientState) -> ParamVector:
    """Mean of the stored directions: ``min(t+1, K)`` of them at round ``t``."""
    if state.history is None:
        raise ValueError("state carries no direction history")
    return ParamVector(_history_mean(state.history), copy=True)


def _push_history(history: Tuple[np.ndarray, ...], new: np.ndarray, K: int):
    out = history + (new,)
    return out[-K:] if len(out) > K else out


def _layer_slices(cfg: AlgorithmConfig, g: ParamVector):
    if cfg.projection_layerwise and g.layer_partition:
        return g.layer_partition
    return None


def _decompose(cfg: AlgorithmConfig, g: ParamVector, dbar: np.ndarray):
    """Flat or per-layer projection; returns (coefficient, g_perp array)."""
    layers = _layer_slices(cfg, g)
    if layers is None:
        alpha, perp = backend.project_decompose(g.values, dbar, PROJECTION_EPS)
        return alpha, perp
    alphas = []
    perp = np.empty(g.dim)
    for start, stop in layers:
        a, p = backend.project_decompose(g.values[start:stop], dbar[start:stop],
                                         PROJECTION_EPS)
        alphas.append(a)
        perp[start:stop] = p
    return tuple(alphas), perp


def _apply_coeff(coeff: Coefficient, dbar: np.ndarray, layers) -> np.ndarray:
    """``coeff * dbar`` for a flat or per-layer coefficient."""
    if isinstance(coeff, tuple):
        out = np.empty_like(dbar)
        for (start, stop), a in zip(layers, coeff):
            out[start:stop] = a * dbar[start:stop]
        return out
    return coeff * dbar


def client_round(cfg: AlgorithmConfig, state: ClientState, g: ParamVector,
                 rng: Optional[RngStream]) -> Tuple[ClientUpload, ClientState]:
    """One client step: turn the local gradient into an upload and new state."""
    kind = cfg.kind
    t = state.round_index

    if kind in _PROJECTING:
        dbar = _history_mean(state.history)
        coeff, g_perp = _decompose(cfg, g, dbar)
        layers = _layer_slices(cfg, g)
        if kind is AlgorithmKind.PROJFL:
            msg = compress(cfg.compressor, ParamVector(g_perp, g.layer_partition, copy=False), rng)
            new_dir = _apply_coeff(coeff, dbar, layers) + decode(msg).values
            upload = ClientUpload(msg, coeff)
            new_state = ClientState(t + 1, history=_push_history(state.history, new_dir, cfg.K))
        else:
            carried = cfg.eta * g_perp + state.error
            msg = compress(cfg.compressor, ParamVector(carried, g.layer_partition, copy=False), rng)
            decoded = decode(msg).values
            scaled = (tuple(cfg.eta * a for a in coeff) if isinstance(coeff, tuple)
                      else cfg.eta * coeff)
            new_dir = _apply_coeff(scaled, dbar, layers) + decoded
            upload = ClientUpload(msg, scaled)
            new_state = ClientState(t + 1,
                                    history=_push_history(state.history, new_dir, cfg.K),
                                    error=carried - decoded)
        return upload, new_state

    if kind is AlgorithmKind.FEDAVG:
        msg = compress(cfg.compressor, g, rng)
        return ClientUpload(msg), ClientState(t + 1)

    if kind is AlgorithmKind.EF:
        carried = g.values + cfg.zeta * state.error
        msg = compress(cfg.compressor, ParamVector(carried, g.layer_partition, copy=False), rng)
        new_error = carried - decode(msg).values
        return ClientUpload(msg), ClientState(t + 1, error=new_error)

    if kind in _EF21_FAMILY:
        gamma = cfg.effective_gamma
        residual = g.values - gamma * state.direction
        msg = compress(cfg.compressor, ParamVector(residual, g.layer_partition, copy=False), rng)
        new_dir = gamma * state.direction + decode(msg).values
        return ClientUpload(msg), ClientState(t + 1, direction=new_dir)

    gamma = cfg.effective_gamma
    residual = g.values - gamma * state.memory
    msg = compress(cfg.compressor, ParamVector(residual, g.layer_partition, copy=False), rng)
    new_mem = gamma * state.memory + cfg.diana_alpha * decode(msg).values
    return ClientUpload(msg), ClientState(t + 1, memory=new_mem)


def _mean_stack(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.mean(np.stack(arrays), axis=0)


def server_round(cfg: AlgorithmConfig, server: ServerState,
                 uploads: Sequence[ClientUpload],
                 layer_partition=None) -> ServerState:
    """Aggregate one upload per client (in client order) into the next model.

    ``layer_partition`` is only consulted when uploads carry per-layer
    projection coefficients (layerwise projection enabled).
    """
    if len(uploads) != server.n_clients:
        raise ValueError(f"expected {server.n_clients} uploads, got {len(uploads)}")
    kind = cfg.kind
    t = server.round_index

    if kind in _PROJECTING:
        new_mirror = []
        directions = []
        for i, up in enumerate(uploads):
            dbar = _history_mean(server.mirror_history[i])
            decoded = decode(up.msg).values
            if isinstance(up.dbar_coeff, tuple) and layer_partition is None:
                raise ValueError("per-layer coefficients require layer_partition")
            new_dir = _apply_coeff(up.dbar_coeff, dbar, layer_partition) + decoded
            directions.append(new_dir)
            new_mirror.append(_push_history(server.mirror_history[i], new_dir, cfg.K))
        step = cfg.eta if kind is AlgorithmKind.PROJFL else 1.0
        w_new = server.w - step * _mean_stack(directions)
        return ServerState(t + 1, w_new, server.n_clients, mirror_history=tuple(new_mirror))

    if kind in (AlgorithmKind.FEDAVG, AlgorithmKind.EF):
        mean_msg = _mean_stack([decode(up.msg).values for up in uploads])
        return ServerState(t + 1, server.w - cfg.eta * mean_msg, server.n_clients)

    if kind in _EF21_FAMILY:
        gamma = cfg.effective_gamma
        new_dirs = tuple(gamma * server.mirror_direction[i] + decode(up.msg).values
                         for i, up in enumerate(uploads))
        w_new = server.w - cfg.eta * _mean_stack(new_dirs)
        return ServerState(t + 1, w_new, server.n_clients, mirror_direction=new_dirs)

    gamma = cfg.effective_gamma
    mean_msg = _mean_stack([decode(up.msg).values for up in uploads])
    new_momentum = cfg.diana_beta * server.momentum + gamma * server.memory + mean_msg
    new_memory = gamma * server.memory + cfg.diana_alpha * mean_msg
    w_new = server.w - cfg.eta * new_momentum
    return ServerState(t + 1, w_new, server.n_clients,
                       memory=new_memory, momentum=new_momentum)


def init_client_state(cfg: AlgorithmConfig, dim: int) -> ClientState:
    kind = cfg.kind
    zero = np.zeros(dim)
    if kind in _PROJECTING:
        error = zero.copy() if kind is AlgorithmKind.PROJFL_EF else None
        return ClientState(0, history=(zero,), error=error)
    if kind is AlgorithmKind.EF:
        return ClientState(0, error=zero)
    if kind in _EF21_FAMILY:
        return ClientState(0, direction=zero)
    if kind in _DIANA_FAMILY:
        return ClientState(0, memory=zero)
    return ClientState(0)


def init_server_state(cfg: AlgorithmConfig, w0: ParamVector, n_clients: int) -> ServerState:
    kind = cfg.kind
    dim = w0.dim
    w = w0.values.copy()
    if kind in _PROJECTING:
        mirrors = tuple((np.zeros(dim),) for _ in range(n_clients))
        return ServerState(0, w, n_clients, mirror_history=mirrors)
    if kind in _EF21_FAMILY:
        return ServerState(0, w, n_clients,
                           mirror_direction=tuple(np.zeros(dim) for _ in range(n_clients)))
    if kind in _DIANA_FAMILY:
        return ServerState(0, w, n_clients,
                           memory=np.zeros(dim), momentum=np.zeros(dim))
    return ServerState(0, w, n_clients)


def diagnostic_tilde_w(server: ServerState, client_states: Sequence[ClientState]) -> ParamVector:
    """The error-shifted iterate ``w - mean_i(e_i)``; diagnostics only."""
    errors = [st.error for st in client_states]
    if any(e is None for e in errors):
        raise ValueError("tilde-w diagnostic requires an error-carrying algorithm")
    return ParamVector(server.w - _mean_stack(errors), copy=False)


def mirror_matches(server: ServerState, client_states: Sequence[ClientState]) -> bool:
    """Bit-exact comparison of server mirrors against client state."""
    if server.mirror_history is not None:
        return all(
            len(mh) == len(cs.history) and
            all(np.array_equal(a, b) for a, b in zip(mh, cs.history))
            for mh, cs in zip(server.mirror_history, client_states))
    if server.mirror_direction is not None:
        return all(np.array_equal(md, cs.direction)
                   for md, cs in zip(server.mirror_direction, client_states))
    return True


def assert_mirror(server: ServerState, client_states: Sequence[ClientState]):
    if not mirror_matches(server, client_states):
        raise MirrorDesyncError(
            f"server mirror diverged from client state at round {server.round_index}")


# --- state snapshots (binary, versioned) -----------------------------------

def _pack_optional(container: dict, key: str, value):
    if value is not None:
        container[key] = value


def save_snapshot(path, cfg: AlgorithmConfig, server: ServerState,
                  client_states: Sequence[ClientState]):
    """Versioned binary snapshot sufficient to resume a run mid-trajectory.

    Stream state never needs saving: draws are keyed by (seed, client, round,
    purpose), so resuming at round t replays exactly what a full run would do.
    """
    arrays = {"w": server.w}
    meta = {
        "version": _SNAPSHOT_VERSION,
        "kind": cfg.kind.value,
        "round": server.round_index,
        "n_clients": server.n_clients,
    }
    for i, cs in enumerate(client_states):
        if cs.history is not None:
            meta[f"hist_len_{i}"] = len(cs.history)
            for j, hvec in enumerate(cs.history):
                arrays[f"hist_{i}_{j}"] = hvec
        if cs.error is not None:
            arrays[f"err_{i}"] = cs.error
        if cs.direction is not None:
            arrays[f"dir_{i}"] = cs.direction
        if cs.memory is not None:
            arrays[f"mem_{i}"] = cs.memory
    if server.memory is not None:
        arrays["srv_mem"] = server.memory
    if server.momentum is not None:
        arrays["srv_mom"] = server.momentum
    np.savez(path, **arrays, **{k: np.asarray(v) for k, v in meta.items()})


def load_snapshot(path, cfg: AlgorithmConfig) -> Tuple[ServerState, List[ClientState]]:
    data = np.load(path)
    version = int(data["version"])
    if version != _SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    kind = AlgorithmKind(str(data["kind"]))
    if kind is not cfg.kind:
        raise ValueError(f"snapshot is for {kind.value}, config says {cfg.kind.value}")
    t = int(data["round"])
    n_clients = int(data["n_clients"])
    w = data["w"]
    clients = []
    mirror_history = [] if kind in _PROJECTING else None
    mirror_direction = [] if kind in _EF21_FAMILY else None
    for i in range(n_clients):
        history = None
        if f"hist_len_{i}" in data:
            history = tuple(data[f"hist_{i}_{j}"] for j in range(int(data[f"hist_len_{i}"])))
            mirror_history.append(history)
        direction = data[f"dir_{i}"] if f"dir_{i}" in data else None
        if direction is not None:
            mirror_direction.append(direction)
        clients.append(ClientState(
            t, history=history,
            error=data[f"err_{i}"] if f"err_{i}" in data else None,
            direction=direction,
            memory=data[f"mem_{i}"] if f"mem_{i}" in data else None))
    server = ServerState(
        t, w, n_clients,
        mirror_history=tuple(mirror_history) if mirror_history is not None else None,
        mirror_direction=tuple(mirror_direction) if mirror_direction is not None else None,
        memory=data["srv_mem"] if "srv_mem" in data else None,
        momentum=data["srv_mom"] if "srv_mom" in data else None)
    return server, clients

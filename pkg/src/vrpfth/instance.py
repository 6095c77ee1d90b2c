"""Routing networks, VRP-FTH instances, synthetic generators and the (X, A, e) state."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial import Delaunay

FORMAT_NAME = "vrpfth-instance"
FORMAT_VERSION = 1

DEFAULT_K_NEIGHBORS = 10
DEFAULT_PAD_TO = 301
DEFAULT_CUTOFF_K = 10

# Geometry is sized against a fixed reference budget so that sweeping U keeps the layout.
REFERENCE_HORIZON = 24.0
REFERENCE_COVERAGE = 0.75
# Expected optimal tour through n uniform points in a unit square ~ 0.7124 sqrt(n) + 0.55;
# the offset is a boundary correction fitted to exact tours for n <= 11.
_BHH = 0.7124
_BHH_OFFSET = 0.55

_MICRO = 1_000_000


class InstanceError(ValueError):
    """Base class for invalid instances or instance files."""


class InstanceValidationError(InstanceError):
    pass


class InstanceFormatError(InstanceError):
    pass


class InstanceVersionError(InstanceFormatError):
    pass


class GenerationError(RuntimeError):
    pass


def _quantize(hours: np.ndarray) -> np.ndarray:
    """Round to whole micro-hours so that the 6-decimal file format is lossless."""
    return np.rint(np.asarray(hours, dtype=float) * _MICRO) / _MICRO


@dataclass(frozen=True, eq=False)
class RoutingNetwork:
    travel_time: np.ndarray
    depot: int = 0
    coordinates: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.array(self.travel_time, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] < 1:
            raise InstanceValidationError(f"travel_time must be square, got shape {t.shape}")
        n = t.shape[0]
        if not np.all(np.isfinite(t)):
            raise InstanceValidationError("travel_time contains non-finite entries")
        if np.any(np.diag(t) != 0):
            raise InstanceValidationError("travel_time diagonal must be zero")
        off = ~np.eye(n, dtype=bool)
        if np.any(t[off] <= 0):
            raise InstanceValidationError("off-diagonal travel times must be positive")
        if not 0 <= self.depot < n:
            raise InstanceValidationError(f"depot {self.depot} out of range for {n} nodes")
        t.setflags(write=False)
        object.__setattr__(self, "travel_time", t)
        if self.coordinates is not None:
            c = np.array(self.coordinates, dtype=float)
            if c.shape != (n, 2):
                raise InstanceValidationError(f"coordinates must have shape ({n}, 2)")
            c.setflags(write=False)
            object.__setattr__(self, "coordinates", c)

    @property
    def node_count(self) -> int:
        return self.travel_time.shape[0]

    @property
    def customers(self) -> tuple[int, ...]:
        return tuple(v for v in range(self.node_count) if v != self.depot)

    def __eq__(self, other):
        if not isinstance(other, RoutingNetwork):
            return NotImplemented
        if self.depot != other.depot or not np.array_equal(self.travel_time, other.travel_time):
            return False
        if (self.coordinates is None) != (other.coordinates is None):
            return False
        return self.coordinates is None or np.array_equal(self.coordinates, other.coordinates)

    __hash__ = None


@dataclass(frozen=True)
class InstanceSpec:
    """A VRP-FTH problem: network, horizon U, known customers and the arrival schedule."""

    network: RoutingNetwork
    horizon: float
    deterministic_customers: frozenset
    stochastic_arrivals: Mapping[int, int] = field(default_factory=dict)
    request_cutoff: int = DEFAULT_CUTOFF_K
    family: str = "custom"
    seed: Optional[int] = None

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise InstanceValidationError(f"horizon must be positive, got {self.horizon}")
        if self.request_cutoff < 1:
            raise InstanceValidationError("request cutoff K must be a positive integer")
        det = frozenset(int(v) for v in self.deterministic_customers)
        arrivals = {int(v): int(s) for v, s in dict(self.stochastic_arrivals).items()}
        object.__setattr__(self, "deterministic_customers", det)
        object.__setattr__(self, "stochastic_arrivals", dict(sorted(arrivals.items())))
        customers = set(self.network.customers)
        if det & arrivals.keys():
            raise InstanceValidationError("a customer cannot be both deterministic and stochastic")
        if det | arrivals.keys() != customers:
            raise InstanceValidationError("deterministic and stochastic customers must cover all customers")
        for v, step in arrivals.items():
            if not 1 <= step <= self.request_cutoff:
                raise InstanceValidationError(
                    f"arrival step {step} of node {v} outside [1, {self.request_cutoff}]")

    @property
    def customer_count(self) -> int:
        return self.network.node_count - 1

    @property
    def is_deterministic(self) -> bool:
        return not self.stochastic_arrivals

    def with_horizon(self, horizon: float) -> "InstanceSpec":
        return InstanceSpec(self.network, horizon, self.deterministic_customers,
                            self.stochastic_arrivals, self.request_cutoff, self.family, self.seed)

    def clairvoyant(self) -> "InstanceSpec":
        """Same network with every request known at departure."""
        return InstanceSpec(self.network, self.horizon, frozenset(self.network.customers), {},
                            self.request_cutoff, self.family, self.seed)


@dataclass(frozen=True, eq=False)
class NetworkState:
    node_features: np.ndarray   # X, (n, pad_to + 1)
    adjacency: np.ndarray       # A, (n, n) bool, KNN plus self-loops
    edge_features: np.ndarray   # e, (n, n) in [0, 1]


def _split_customers(customers, fraction, cutoff, rng):
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"stochastic_fraction must be in [0, 1], got {fraction}")
    n_stoch = int(round(fraction * len(customers)))
    stochastic = rng.choice(np.asarray(customers), size=n_stoch, replace=False) if n_stoch else []
    stochastic = sorted(int(v) for v in stochastic)
    steps = rng.integers(1, cutoff + 1, size=len(stochastic))
    arrivals = {v: int(s) for v, s in zip(stochastic, steps)}
    deterministic = frozenset(customers) - arrivals.keys()
    return deterministic, arrivals


def _side_length(customer_count, coverage, reference_horizon):
    # Pick the side so the reference horizon covers `coverage` of the expected full tour.
    return reference_horizon / (coverage * (_BHH * math.sqrt(customer_count + 1) + _BHH_OFFSET))


def _check_common(customer_count, horizon):
    if customer_count < 1:
        raise ValueError(f"customer_count must be >= 1, got {customer_count}")
    if not (horizon > 0 and math.isfinite(horizon)):
        raise InstanceValidationError(f"horizon must be positive, got {horizon}")


def generate_euclidean(customer_count: int, seed: int, stochastic_fraction: float = 0.0,
                       horizon: float = 24.0, request_cutoff: int = DEFAULT_CUTOFF_K,
                       coverage: float = REFERENCE_COVERAGE,
                       reference_horizon: float = REFERENCE_HORIZON) -> InstanceSpec:
    """Random Euclidean network (EN family): uniform points, straight-line times at unit speed.

    The layout depends on ``(customer_count, seed)`` only, never on ``horizon``.
    """
    _check_common(customer_count, horizon)
    rng = np.random.default_rng(seed)
    side = _side_length(customer_count, coverage, reference_horizon)
    coords = rng.uniform(0.0, side, size=(customer_count + 1, 2))
    diff = coords[:, None, :] - coords[None, :, :]
    t = _quantize(np.sqrt((diff ** 2).sum(-1)))
    off = ~np.eye(len(t), dtype=bool)
    t[off] = np.maximum(t[off], 1.0 / _MICRO)
    network = RoutingNetwork(t, depot=0, coordinates=coords)
    det, arrivals = _split_customers(list(range(1, customer_count + 1)), stochastic_fraction,
                                     request_cutoff, np.random.default_rng([seed, 1]))
    family = "EN-stochastic" if arrivals else "EN"
    return InstanceSpec(network, float(horizon), det, arrivals, request_cutoff, family, seed)


def _road_edges(coords, rng, drop_fraction):
    n = len(coords)
    if n >= 4:
        try:
            tri = Delaunay(coords)
            edges = set()
            for simplex in tri.simplices:
                for a in range(3):
                    i, j = sorted((int(simplex[a]), int(simplex[(a + 1) % 3])))
                    edges.add((i, j))
        except Exception:  # degenerate point sets (collinear) fall back to the complete graph
            edges = {(i, j) for i in range(n) for j in range(i + 1, n)}
    else:
        edges = {(i, j) for i in range(n) for j in range(i + 1, n)}
    edges = sorted(edges)
    keep = rng.random(len(edges)) >= drop_fraction
    return [e for e, k in zip(edges, keep) if k]


def generate_road_style(customer_count: int, seed: int, stochastic_fraction: float = 0.0,
                        horizon: float = 24.0, request_cutoff: int = DEFAULT_CUTOFF_K,
                        symmetric: bool = True, drop_fraction: float = 0.25,
                        max_detour: float = 0.5, max_retries: int = 50,
                        coverage: float = REFERENCE_COVERAGE,
                        reference_horizon: float = REFERENCE_HORIZON) -> InstanceSpec:
    """Synthetic road network (stand-in for EMA / Vienna): sparse planar graph, shortest-path times.

    Road segments come from a Delaunay triangulation with a random fraction of segments
    removed; each segment's time is its length stretched by a random detour factor
    (independently per direction when ``symmetric`` is false).  The complete travel-time
    matrix is the all-pairs shortest-path closure, so the triangle inequality holds.
    """
    _check_common(customer_count, horizon)
    rng = np.random.default_rng(seed)
    n = customer_count + 1
    side = _side_length(customer_count, coverage, reference_horizon)
    for _ in range(max_retries):
        coords = rng.uniform(0.0, side, size=(n, 2))
        edges = _road_edges(coords, rng, drop_fraction)
        if not edges:
            continue
        rows, cols, data = [], [], []
        for i, j in edges:
            length = float(np.hypot(*(coords[i] - coords[j])))
            fwd = length * (1.0 + max_detour * rng.random())
            bwd = fwd if symmetric else length * (1.0 + max_detour * rng.random())
            # Integer micro-hours keep shortest-path sums exact.
            rows += [i, j]
            cols += [j, i]
            data += [max(1, round(fwd * _MICRO)), max(1, round(bwd * _MICRO))]
        graph = csr_matrix((np.array(data, dtype=float), (rows, cols)), shape=(n, n))
        n_comp, _ = connected_components(graph, directed=True, connection="strong")
        if n_comp != 1:
            continue
        micro = shortest_path(graph, method="D", directed=True)
        t = np.rint(micro) / _MICRO
        np.fill_diagonal(t, 0.0)
        network = RoutingNetwork(t, depot=0, coordinates=coords)
        det, arrivals = _split_customers(list(range(1, n)), stochastic_fraction, request_cutoff,
                                         np.random.default_rng([seed, 1]))
        family = "ROAD-stochastic" if arrivals else "ROAD"
        return InstanceSpec(network, float(horizon), det, arrivals, request_cutoff, family, seed)
    raise GenerationError(f"no connected road graph after {max_retries} attempts (seed={seed})")


GENERATORS = {"euclidean": generate_euclidean, "road": generate_road_style}


def normalized_travel_time(network: RoutingNetwork) -> np.ndarray:
    """Min-max normalization over off-diagonal entries; diagonal set to 0."""
    t = network.travel_time
    n = len(t)
    off = ~np.eye(n, dtype=bool)
    if n < 2:
        raise InstanceValidationError("need at least two nodes for edge features")
    lo, hi = t[off].min(), t[off].max()
    if hi == lo:
        raise InstanceValidationError("all travel times are equal; min-max normalization undefined")
    norm = (t - lo) / (hi - lo)
    norm[~off] = 0.0
    return norm


def knn_adjacency(travel_time: np.ndarray, k: int) -> np.ndarray:
    n = len(travel_time)
    if not 1 <= k < n:
        raise ValueError(f"k_neighbors must be in [1, {n - 1}], got {k}")
    t = np.array(travel_time, dtype=float)
    np.fill_diagonal(t, np.inf)
    order = np.argsort(t, axis=1, kind="stable")[:, :k]
    adj = np.zeros((n, n), dtype=bool)
    adj[np.arange(n)[:, None], order] = True
    adj[np.arange(n), np.arange(n)] = True
    return adj


def derive_network_state(instance: InstanceSpec, k_neighbors: int = DEFAULT_K_NEIGHBORS,
                         pad_to: int = DEFAULT_PAD_TO) -> NetworkState:
    network = instance.network if isinstance(instance, InstanceSpec) else instance
    n = network.node_count
    if pad_to < n:
        raise ValueError(f"pad_to={pad_to} smaller than node count {n}")
    norm = normalized_travel_time(network)
    x = np.zeros((n, pad_to + 1))
    x[:, :n] = norm
    x[network.depot, -1] = 1.0
    adj = knn_adjacency(network.travel_time, k_neighbors)
    e = 1.0 - norm
    for arr in (x, adj, e):
        arr.setflags(write=False)
    return NetworkState(x, adj, e)


def instance_to_dict(instance: InstanceSpec) -> dict:
    net = instance.network
    nodes = []
    for v in range(net.node_count):
        node = {"index": v, "is_depot": v == net.depot}
        if net.coordinates is not None:
            node["x"], node["y"] = float(net.coordinates[v, 0]), float(net.coordinates[v, 1])
        nodes.append(node)
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "family": instance.family,
        "seed": instance.seed,
        "U": instance.horizon,
        "K": instance.request_cutoff,
        "nodes": nodes,
        "travel_time": [[round(float(t), 6) for t in row] for row in net.travel_time],
        "deterministic_customers": sorted(instance.deterministic_customers),
        "stochastic_arrivals": [{"node": v, "step": s} for v, s in instance.stochastic_arrivals.items()],
    }


def instance_from_dict(payload: dict) -> InstanceSpec:
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_NAME:
        raise InstanceFormatError("not a vrpfth instance document")
    if payload.get("version") != FORMAT_VERSION:
        raise InstanceVersionError(f"unsupported instance format version {payload.get('version')!r}")
    try:
        nodes = sorted(payload["nodes"], key=lambda d: d["index"])
        if [d["index"] for d in nodes] != list(range(len(nodes))):
            raise InstanceFormatError("node indices must be 0..n-1")
        depots = [d["index"] for d in nodes if d["is_depot"]]
        if len(depots) != 1:
            raise InstanceFormatError("exactly one depot node required")
        coords = None
        if all("x" in d and "y" in d for d in nodes):
            coords = np.array([[d["x"], d["y"]] for d in nodes], dtype=float)
        network = RoutingNetwork(np.array(payload["travel_time"], dtype=float), depots[0], coords)
        arrivals = {int(a["node"]): int(a["step"]) for a in payload["stochastic_arrivals"]}
        return InstanceSpec(network, float(payload["U"]), frozenset(payload["deterministic_customers"]),
                            arrivals, int(payload["K"]), payload["family"], payload["seed"])
    except (KeyError, TypeError) as exc:
        raise InstanceFormatError(f"malformed instance document: {exc!r}") from exc


def dumps_instance(instance: InstanceSpec) -> str:
    """JSON text with one top-level key per line and one matrix row per line (diff-friendly)."""
    doc = instance_to_dict(instance)
    lines = []
    for key, value in doc.items():
        if key in ("travel_time", "nodes", "stochastic_arrivals") and value:
            rows = ",\n  ".join(json.dumps(r) for r in value)
            lines.append(f"{json.dumps(key)}: [\n  {rows}\n]")
        else:
            lines.append(f"{json.dumps(key)}: {json.dumps(value)}")
    return "{\n" + ",\n".join(lines) + "\n}\n"


def save_instance(instance: InstanceSpec, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_instance(instance))


def load_instance(path) -> InstanceSpec:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}: unreadable instance file ({exc})") from exc
    return instance_from_dict(payload)

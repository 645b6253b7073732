"""Uplink channel model: composite gains, achievable rates and sample counts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of a model formula."""


class ConfigError(ValueError):
    """Raised for an invalid network configuration."""


BITS_PER_MB_DECIMAL = 8e6
BITS_PER_MB_BINARY = 8 * 2**20


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def dbm_to_mw(dbm):
    return 10.0 ** (np.asarray(dbm, dtype=float) / 10.0)


def mb_to_bits(mb, binary: bool = False):
    """Convert a sample size in MB to bits (decimal MB unless ``binary``)."""
    return np.asarray(mb, dtype=float) * (BITS_PER_MB_BINARY if binary else BITS_PER_MB_DECIMAL)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


@dataclass(frozen=True)
class NetworkConfig:
    """Static uplink scenario.

    Device indices are 0-based internally. ``bits_per_sample`` and
    ``path_loss`` are per device; ``dataset_caps`` and ``initial_samples``
    are per node. Powers are in mW, ``noise_power`` in mW.
    """

    node_devices: tuple[tuple[int, ...], ...]
    num_antennas: int
    power_budget: float
    bandwidth: float
    tx_time: float
    bits_per_sample: tuple[float, ...]
    noise_power: float
    path_loss: tuple[float, ...]
    dataset_caps: tuple[float, ...]
    initial_samples: tuple[float, ...]
    rng_seed: int = 0
    # "unit": h ~ CN(0, I) and path loss enters once through G.
    # "path_loss": h ~ CN(0, rho I) as well, i.e. the literal double count.
    fading_variance: str = "unit"

    def __post_init__(self):
        devs = [tuple(int(k) for k in grp) for grp in self.node_devices]
        object.__setattr__(self, "node_devices", tuple(devs))
        for name in ("bits_per_sample", "path_loss", "dataset_caps", "initial_samples"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    @property
    def num_nodes(self) -> int:
        return len(self.node_devices)

    @property
    def num_devices(self) -> int:
        return sum(len(g) for g in self.node_devices)

    @property
    def node_of(self) -> np.ndarray:
        """Node index of every device."""
        owner = np.empty(self.num_devices, dtype=int)
        for i, grp in enumerate(self.node_devices):
            owner[list(grp)] = i
        return owner

    def validate(self) -> None:
        flat = sorted(k for grp in self.node_devices for k in grp)
        K = len(flat)
        if K == 0 or any(len(g) == 0 for g in self.node_devices):
            raise ConfigError("every node needs at least one device")
        if flat != list(range(K)):
            raise ConfigError("node_devices must partition the device indices 0..K-1")
        if self.num_antennas < 1:
            raise ConfigError("num_antennas must be >= 1")
        for name in ("power_budget", "bandwidth", "tx_time", "noise_power"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if len(self.bits_per_sample) != K or len(self.path_loss) != K:
            raise ConfigError("bits_per_sample and path_loss need one entry per device")
        if min(self.bits_per_sample) <= 0 or min(self.path_loss) <= 0:
            raise ConfigError("bits_per_sample and path_loss must be positive")
        I = len(self.node_devices)
        if len(self.dataset_caps) != I or len(self.initial_samples) != I:
            raise ConfigError("dataset_caps and initial_samples need one entry per node")
        for D, A in zip(self.dataset_caps, self.initial_samples):
            if not (D >= A >= 0):
                raise ConfigError("need dataset_caps >= initial_samples >= 0")
        if self.fading_variance not in ("unit", "path_loss"):
            raise ConfigError("fading_variance must be 'unit' or 'path_loss'")

    def replace(self, **changes) -> "NetworkConfig":
        from dataclasses import replace

        return replace(self, **changes)


def build_config(
    num_nodes: int = 10,
    num_devices: int = 20,
    num_antennas: int = 4,
    power_budget_mw: float = 50.0,
    bandwidth_hz: float = 4e6,
    tx_time_s: float = 200.0,
    sample_size_mb: float | Sequence[float] = 0.7,
    noise_dbm: float = -77.0,
    path_loss_db: float | Sequence[float] = -90.0,
    dataset_cap: float | Sequence[float] = 200.0,
    initial_samples: float | Sequence[float] = 50.0,
    rng_seed: int = 0,
    binary_mb: bool = False,
    fading_variance: str = "unit",
) -> NetworkConfig:
    """Build a config from human units, splitting devices evenly over nodes.

    Defaults reproduce the simulation setting of the reference scenario
    (K=20, I=10, N=4, P=50 mW, B=4 MHz, T=200 s, V=0.7 MB, -77 dBm noise,
    -90 dB path loss, A_i=50). The dataset cap is not given there; 200 is
    the package default.
    """
    if num_nodes < 1 or num_devices < num_nodes:
        raise ConfigError("need 1 <= num_nodes <= num_devices")
    groups = [tuple(int(k) for k in chunk) for chunk in np.array_split(np.arange(num_devices), num_nodes)]
    bits = np.broadcast_to(mb_to_bits(sample_size_mb, binary_mb), (num_devices,))
    rho = np.broadcast_to(db_to_linear(path_loss_db), (num_devices,))
    caps = np.broadcast_to(np.asarray(dataset_cap, dtype=float), (num_nodes,))
    init = np.broadcast_to(np.asarray(initial_samples, dtype=float), (num_nodes,))
    return NetworkConfig(
        node_devices=tuple(groups),
        num_antennas=num_antennas,
        power_budget=power_budget_mw,
        bandwidth=bandwidth_hz,
        tx_time=tx_time_s,
        bits_per_sample=tuple(bits),
        noise_power=float(dbm_to_mw(noise_dbm)),
        path_loss=tuple(rho),
        dataset_caps=tuple(caps),
        initial_samples=tuple(init),
        rng_seed=rng_seed,
        fading_variance=fading_variance,
    )


@dataclass(frozen=True)
class ChannelState:
    """Fading vectors ``h`` (K x N complex) and composite gains ``G`` (K x K)."""

    h: np.ndarray
    gains: np.ndarray
    seed: int | None = None
    path_loss: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("h", "gains", "path_loss"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, copy=True)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)


def composite_gains(h, path_loss) -> np.ndarray:
    """Composite gain matrix after matched-filter reception.

    ``G[k, k] = rho_k ||h_k||^2`` and ``G[k, l] = rho_l |h_k^H h_l|^2 / ||h_k||^2``.
    Rows of devices with ``h_k = 0`` are all zero.
    """
    h = np.atleast_2d(np.asarray(h, dtype=complex))
    rho = np.asarray(path_loss, dtype=float)
    norms = np.sum(np.abs(h) ** 2, axis=1)
    cross = np.abs(h.conj() @ h.T) ** 2  # |h_k^H h_l|^2
    with np.errstate(divide="ignore", invalid="ignore"):
        G = np.where(norms[:, None] > 0, cross / norms[:, None], 0.0) * rho[None, :]
    G[np.diag_indices_from(G)] = rho * norms
    return G


def sample_channels(cfg: NetworkConfig, seed: int | None = None) -> ChannelState:
    """Draw i.i.d. Rayleigh fading for every device and build ``G``."""
    seed = cfg.rng_seed if seed is None else seed
    rng = make_rng(seed)
    K, N = cfg.num_devices, cfg.num_antennas
    rho = np.asarray(cfg.path_loss)
    var = rho if cfg.fading_variance == "path_loss" else np.ones(K)
    scale = np.sqrt(var / 2.0)[:, None]
    h = scale * (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N)))
    return ChannelState(h=h, gains=composite_gains(h, rho), seed=seed, path_loss=rho)


def _check_power(p, noise_power):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise DomainError("transmit powers must be nonnegative")
    if not noise_power > 0:
        raise DomainError("noise power must be positive")
    return p


def sinr(G, p, noise_power) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    p = _check_power(p, noise_power)
    signal = np.diag(G) * p
    interference = G @ p - signal
    return signal / (interference + noise_power)


def rates(G, p, noise_power) -> np.ndarray:
    """Achievable rate of every device in bits/s/Hz."""
    return np.log2(1.0 + sinr(G, p, noise_power))


def rate(G, p, noise_power, k: int) -> float:
    """Rate of device ``k``; interference sums over all other devices."""
    return float(rates(G, p, noise_power)[k])


def device_samples(G, p, noise_power, cfg: NetworkConfig, floored: bool = False) -> np.ndarray:
    """New samples delivered by each device within one transmission window."""
    n = cfg.bandwidth * cfg.tx_time * rates(G, p, noise_power) / np.asarray(cfg.bits_per_sample)
    return np.floor(n) if floored else n


def sample_count(G, p, noise_power, cfg: NetworkConfig, node: int, mode: str = "continuous") -> float:
    """Samples held by ``node`` after the window: per-device new samples plus A_i.

    ``mode="floored"`` floors each device's contribution before summing.
    """
    if mode not in ("continuous", "floored"):
        raise ValueError(f"unknown mode {mode!r}")
    if not 0 <= node < cfg.num_nodes:
        raise IndexError(f"node {node} out of range")
    per_dev = device_samples(G, p, noise_power, cfg, floored=(mode == "floored"))
    return float(per_dev[list(cfg.node_devices[node])].sum() + cfg.initial_samples[node])


def node_sample_counts(G, p, noise_power, cfg: NetworkConfig, mode: str = "continuous") -> np.ndarray:
    per_dev = device_samples(G, p, noise_power, cfg, floored=(mode == "floored"))
    return np.bincount(cfg.node_of, weights=per_dev, minlength=cfg.num_nodes) + np.asarray(cfg.initial_samples)


def write_channels_csv(state: ChannelState, fh: TextIO) -> None:
    """Write fading coefficients as rows ``k, antenna, re, im``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["k", "antenna", "re", "im"])
    K, N = state.h.shape
    for k in range(K):
        for n in range(N):
            z = state.h[k, n]
            w.writerow([k, n, repr(float(z.real)), repr(float(z.imag))])


def read_channels_csv(lines: Iterable[str], path_loss) -> ChannelState:
    rows = [r for r in csv.reader(l for l in lines if not l.startswith("#"))]
    if not rows or rows[0] != ["k", "antenna", "re", "im"]:
        raise ValueError("expected header k,antenna,re,im")
    body = [(int(k), int(n), float(re), float(im)) for k, n, re, im in rows[1:]]
    K = max(r[0] for r in body) + 1
    N = max(r[1] for r in body) + 1
    h = np.zeros((K, N), dtype=complex)
    for k, n, re, im in body:
        h[k, n] = complex(re, im)
    rho = np.asarray(path_loss, dtype=float)
    return ChannelState(h=h, gains=composite_gains(h, rho), path_loss=rho)

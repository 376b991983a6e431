"""Physical channel model: steering vectors, two-hop links, cascaded parameters.

Geometry: a BS with an M-antenna ULA, a RIS with an N1 x N2 UPA (N = N1*N2
elements), and K single-antenna UEs.  The RIS->BS link has L1 paths with gains
``beta_ell``, normalized delays ``tau_ell``, BS-side AoA coordinates
``phi_ell`` and RIS-side AoD coordinates ``(omega_ell, psi_ell)``.  Each
UE k -> RIS link has L2_k paths with gains ``beta_l``, delays ``tau_l`` and
RIS-side AoA coordinates ``(omega_l, psi_l)``.  Angle coordinates are
directional cosines in [0, 1); normalized delays live in [0, 2) and enter the
subcarrier steering vector directly.

The cascaded (effective) channel concatenates every BS-side path ell with
every UE-side path l.  Because the RIS response enters through a Hadamard
product of steering vectors, the composite path u = (l, ell) has

    beta_u  = beta_ell * beta_l        (multiplicative)
    tau_u   = tau_ell + tau_l          (additive, stored un-wrapped)
    omega_u = omega_ell + omega_l
    psi_u   = psi_ell + psi_l
    phi_u   = phi_ell                  (shared by all UEs: common feature)

Composite paths are ordered u0 = l0*L1 + ell0 (0-based, BS-side index
fastest), i.e. the L1 x L2 parameter matrices flatten in Fortran order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor_ops import kruskal_build

SPEED_OF_LIGHT = 299792458.0


def steer_ula(n: int, x: float) -> np.ndarray:
    """ULA steering vector, element i = exp(-1j*pi*i*x) / n for i = 0..n-1.

    The 1/n scaling is part of the model convention; x has period 2.
    """
    return np.exp(-1j * np.pi * x * np.arange(n)) / n


def ula_matrix(n: int, xs: np.ndarray) -> np.ndarray:
    """Matrix whose columns are ``steer_ula(n, x)`` for each x in ``xs``."""
    return np.exp(-1j * np.pi * np.outer(np.arange(n), np.asarray(xs))) / n


def steer_upa(n1: int, n2: int, omega: float, psi: float) -> np.ndarray:
    """UPA steering vector ``kron(steer_ula(n1, omega), steer_ula(n2, psi))``."""
    return np.kron(steer_ula(n1, omega), steer_ula(n2, psi))


def upa_matrix(n1: int, n2: int, omegas: np.ndarray, psis: np.ndarray) -> np.ndarray:
    """Columns are UPA steering vectors for the paired (omega, psi) lists."""
    a1 = ula_matrix(n1, omegas)
    a2 = ula_matrix(n2, psis)
    return (a1[:, None, :] * a2[None, :, :]).reshape(n1 * n2, -1)


def normalized_delay(delay_s: float, subcarrier_spacing_hz: float) -> float:
    """Physical delay (seconds) -> normalized delay: tau = 2 * delta_f * kappa.

    The subcarrier phase profile exp(-j*2*pi*p*delta_f*kappa) then equals the
    ULA steering phase exp(-j*pi*p*tau).
    """
    return 2.0 * subcarrier_spacing_hz * delay_s


def delay_seconds(tau: float, subcarrier_spacing_hz: float) -> float:
    """Inverse of :func:`normalized_delay`."""
    return tau / (2.0 * subcarrier_spacing_hz)


def _check_paths(name, gains, delays, *angles):
    n = len(gains)
    if n < 1:
        raise ValueError(f"{name}: path count must be >= 1")
    for arr_name, arr in [("delays", delays)] + [(f"angle{i}", a) for i, a in enumerate(angles)]:
        if len(arr) != n:
            raise ValueError(f"{name}: {arr_name} length {len(arr)} != {n} paths")
    if np.any(delays < 0.0) or np.any(delays >= 2.0):
        raise ValueError(f"{name}: delays must lie in [0, 2)")
    for i, a in enumerate(angles):
        if np.any(a < 0.0) or np.any(a >= 1.0):
            raise ValueError(f"{name}: angle coordinates must lie in [0, 1)")


@dataclass
class BsRisPaths:
    """RIS->BS link: gains, delays, BS-side AoA phi, RIS-side AoD (omega, psi)."""

    gains: np.ndarray
    delays: np.ndarray
    phi: np.ndarray
    omega: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=complex)
        for f in ("delays", "phi", "omega", "psi"):
            setattr(self, f, np.asarray(getattr(self, f), dtype=float))
        _check_paths("BsRisPaths", self.gains, self.delays, self.phi, self.omega, self.psi)

    @property
    def n_paths(self) -> int:
        return len(self.gains)


@dataclass
class UeRisPaths:
    """UE->RIS link: gains, delays, RIS-side AoA (omega, psi)."""

    gains: np.ndarray
    delays: np.ndarray
    omega: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=complex)
        for f in ("delays", "omega", "psi"):
            setattr(self, f, np.asarray(getattr(self, f), dtype=float))
        _check_paths("UeRisPaths", self.gains, self.delays, self.omega, self.psi)

    @property
    def n_paths(self) -> int:
        return len(self.gains)


@dataclass
class ChannelScenario:
    """Ground truth: one RIS->BS link plus one UE->RIS link per user."""

    bs: BsRisPaths
    ues: list[UeRisPaths] = field(default_factory=list)

    def __post_init__(self):
        if not self.ues:
            raise ValueError("scenario needs at least one UE")

    @property
    def n_users(self) -> int:
        return len(self.ues)

    @property
    def l1(self) -> int:
        return self.bs.n_paths

    def l2(self, k: int) -> int:
        return self.ues[k].n_paths


@dataclass
class CascadedParams:
    """Composite per-UE parameters; matrices are L1 x L2, phi has length L1.

    Row ell0/column l0 corresponds to composite path u0 = l0*L1 + ell0, so
    ``matrix.reshape(-1, order="F")`` lists paths in u order.
    """

    beta: np.ndarray
    tau: np.ndarray
    omega: np.ndarray
    psi: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=complex)
        for f in ("tau", "omega", "psi", "phi"):
            setattr(self, f, np.asarray(getattr(self, f), dtype=float))
        l1, l2 = self.beta.shape
        for f in ("tau", "omega", "psi"):
            if getattr(self, f).shape != (l1, l2):
                raise ValueError(f"{f} shape {getattr(self, f).shape} != {(l1, l2)}")
        if self.phi.shape != (l1,):
            raise ValueError("phi length must equal the BS-side path count")

    @property
    def shape(self) -> tuple[int, int]:
        return self.beta.shape


def flatten_paths(matrix: np.ndarray) -> np.ndarray:
    """L1 x L2 parameter matrix -> length-U vector in composite path order."""
    return np.asarray(matrix).reshape(-1, order="F")


def expand_phi(phi: np.ndarray, l2: int) -> np.ndarray:
    """Per-composite-path phi vector (phi_u = phi[u0 % L1], length L1*l2)."""
    return np.tile(np.asarray(phi), l2)


def map_cascaded(bs: BsRisPaths, ue: UeRisPaths) -> CascadedParams:
    """Compose a BS-side link with one UE-side link into cascaded parameters."""
    return CascadedParams(
        beta=np.outer(bs.gains, ue.gains),
        tau=np.add.outer(bs.delays, ue.delays),
        omega=np.add.outer(bs.omega, ue.omega),
        psi=np.add.outer(bs.psi, ue.psi),
        phi=bs.phi.copy(),
    )


def measurement_factors(
    casc: CascadedParams, m: int, p: int, theta: np.ndarray, n1: int, n2: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Kruskal factors (A, B, R) of the noiseless P x M x Q measurement tensor.

    A (P x U) holds subcarrier steering of the cascaded delays, B (M x U) the
    BS steering of the shared AoD, and R (Q x U) the RIS-configuration
    responses ``theta.T @ a_upa(omega_u, psi_u)`` scaled by the path gains.
    """
    tau = flatten_paths(casc.tau)
    omega = flatten_paths(casc.omega)
    psi = flatten_paths(casc.psi)
    beta = flatten_paths(casc.beta)
    a = ula_matrix(p, tau)
    b = ula_matrix(m, expand_phi(casc.phi, casc.shape[1]))
    r = (theta.T @ upa_matrix(n1, n2, omega, psi)) * beta
    return a, b, r


def channel_factors(
    casc: CascadedParams, m: int, p: int, n1: int, n2: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Kruskal factors (A, B, D) of the P x M x N cascaded channel tensor.

    D (N x U) holds the RIS-side UPA steering with gains absorbed, so the
    dense channel is ``kruskal_build(A, B, D)``.
    """
    tau = flatten_paths(casc.tau)
    omega = flatten_paths(casc.omega)
    psi = flatten_paths(casc.psi)
    beta = flatten_paths(casc.beta)
    a = ula_matrix(p, tau)
    b = ula_matrix(m, expand_phi(casc.phi, casc.shape[1]))
    d = upa_matrix(n1, n2, omega, psi) * beta
    return a, b, d


def synth_measurement(
    casc: CascadedParams, m: int, p: int, theta: np.ndarray, n1: int, n2: int
) -> np.ndarray:
    """Dense noiseless measurement tensor (P x M x Q) for one UE."""
    return kruskal_build(*measurement_factors(casc, m, p, theta, n1, n2))


def synth_channel(casc: CascadedParams, m: int, p: int, n1: int, n2: int) -> np.ndarray:
    """Dense cascaded channel tensor (P x M x N) for one UE."""
    return kruskal_build(*channel_factors(casc, m, p, n1, n2))


# --- scenario serialization (full double precision, round-trip exact) ---

_FORMAT = "dsmdt-scenario-v1"


def _arr(a):
    return [float(x) for x in np.asarray(a, dtype=float)]


def _link_to_dict(link) -> dict:
    d = {
        "gains_re": _arr(link.gains.real),
        "gains_im": _arr(link.gains.imag),
        "delays": _arr(link.delays),
        "omega": _arr(link.omega),
        "psi": _arr(link.psi),
    }
    if isinstance(link, BsRisPaths):
        d["phi"] = _arr(link.phi)
    return d


def scenario_to_json(scenario: ChannelScenario) -> str:
    doc = {
        "format": _FORMAT,
        "bs": _link_to_dict(scenario.bs),
        "ues": [_link_to_dict(ue) for ue in scenario.ues],
    }
    return json.dumps(doc, indent=1)


def scenario_from_json(text: str) -> ChannelScenario:
    doc = json.loads(text)
    if doc.get("format") != _FORMAT:
        raise ValueError(f"unsupported scenario format: {doc.get('format')!r}")
    b = doc["bs"]
    bs = BsRisPaths(
        gains=np.array(b["gains_re"]) + 1j * np.array(b["gains_im"]),
        delays=b["delays"],
        phi=b["phi"],
        omega=b["omega"],
        psi=b["psi"],
    )
    ues = [
        UeRisPaths(
            gains=np.array(u["gains_re"]) + 1j * np.array(u["gains_im"]),
            delays=u["delays"],
            omega=u["omega"],
            psi=u["psi"],
        )
        for u in doc["ues"]
    ]
    return ChannelScenario(bs=bs, ues=ues)

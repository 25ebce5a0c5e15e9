"""Parafoil flight models: rigid 6-DOF plant, reduced kinematic model, wind.

Frames
------
Ground frame: origin at the landing-area center, X along the known constant
wind, Z down (right-handed). Altitude above the landing plane is ``-z``;
scenario files and CSV outputs use altitude-positive values and convert at
the boundary.

Body frame: x forward, y right, z down, origin at the system mass center.
Attitude ``o = (roll, pitch, yaw)`` maps ground to body by the Z-Y-X
composition ``C = Rx(roll) @ Ry(pitch) @ Rz(yaw)``.

The full state is ``[r(3), o(3), v_B(3), w_B(3)]`` (position, attitude,
body velocity, body angular velocity). The reduced guidance state is
``(x, y, altitude, heading)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm, solve_discrete_lyapunov

from .errors import OutOfBounds, SingularAttitude, SingularMass, TurnRateExceeded

GRAVITY = 9.80665
ATT_EPS = 1e-6  # pitch margin to the Euler-rate singularity, rad


def _cross3(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def _cross_rows(A, B):
    out = np.empty_like(A)
    out[:, 0] = A[:, 1] * B[:, 2] - A[:, 2] * B[:, 1]
    out[:, 1] = A[:, 2] * B[:, 0] - A[:, 0] * B[:, 2]
    out[:, 2] = A[:, 0] * B[:, 1] - A[:, 1] * B[:, 0]
    return out


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ u == np.cross(v, u)``."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rot_ground_to_body(o) -> np.ndarray:
    """Direction cosine matrix mapping ground-frame vectors into the body frame.

    Z-Y-X Euler composition: yaw about Z, pitch about the new Y, roll about
    the new X. Orthonormal with determinant +1 for any finite attitude.
    """
    phi, theta, psi = o
    cph, sph = math.cos(phi), math.sin(phi)
    cth, sth = math.cos(theta), math.sin(theta)
    cps, sps = math.cos(psi), math.sin(psi)
    return np.array([
        [cth * cps, cth * sps, -sth],
        [sph * sth * cps - cph * sps, sph * sth * sps + cph * cps, sph * cth],
        [cph * sth * cps + sph * sps, cph * sth * sps - sph * cps, cph * cth],
    ])


def drot_ground_to_body(o) -> np.ndarray:
    """Derivative of :func:`rot_ground_to_body` w.r.t. each Euler angle.

    Returns an array of shape (3, 3, 3): ``out[k]`` is dC/do[k].
    """
    phi, theta, psi = o
    cph, sph = math.cos(phi), math.sin(phi)
    cth, sth = math.cos(theta), math.sin(theta)
    cps, sps = math.cos(psi), math.sin(psi)
    dphi = np.array([
        [0.0, 0.0, 0.0],
        [cph * sth * cps + sph * sps, cph * sth * sps - sph * cps, cph * cth],
        [-sph * sth * cps + cph * sps, -sph * sth * sps - cph * cps, -sph * cth],
    ])
    dtheta = np.array([
        [-sth * cps, -sth * sps, -cth],
        [sph * cth * cps, sph * cth * sps, -sph * sth],
        [cph * cth * cps, cph * cth * sps, -cph * sth],
    ])
    dpsi = np.array([
        [-cth * sps, cth * cps, 0.0],
        [-sph * sth * sps - cph * cps, sph * sth * cps - cph * sps, 0.0],
        [-cph * sth * sps + sph * cps, cph * sth * cps + sph * sps, 0.0],
    ])
    return np.stack([dphi, dtheta, dpsi])


def euler_rate_transform(o) -> np.ndarray:
    """Matrix mapping body angular velocity to Euler-angle rates.

    Raises
    ------
    SingularAttitude
        If ``|pitch| >= pi/2 - ATT_EPS`` (gimbal lock).
    """
    phi, theta, _ = o
    if abs(theta) >= math.pi / 2 - ATT_EPS:
        raise SingularAttitude(f"pitch {theta:.6f} rad too close to +-pi/2")
    cph, sph = math.cos(phi), math.sin(phi)
    cth, tth = math.cos(theta), math.tan(theta)
    return np.array([
        [1.0, sph * tth, cph * tth],
        [0.0, cph, -sph],
        [0.0, sph / cth, cph / cth],
    ])


def deuler_rate_transform(o) -> np.ndarray:
    """Derivative of :func:`euler_rate_transform` w.r.t. (roll, pitch); shape (2, 3, 3)."""
    phi, theta, _ = o
    cph, sph = math.cos(phi), math.sin(phi)
    cth, sth = math.cos(theta), math.sin(theta)
    tth = sth / cth
    dphi = np.array([
        [0.0, cph * tth, -sph * tth],
        [0.0, -sph, -cph],
        [0.0, cph / cth, -sph / cth],
    ])
    sec2 = 1.0 / cth ** 2
    dtheta = np.array([
        [0.0, sph * sec2, cph * sec2],
        [0.0, 0.0, 0.0],
        [0.0, sph * sth * sec2, cph * sth * sec2],
    ])
    return np.stack([dphi, dtheta])


# ---------------------------------------------------------------------------
# controls
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Control:
    """Equivalent controls: asymmetric and symmetric flap deflection."""

    delta_a: float
    delta_s: float

    def validate(self, delta_max: float = 1.0) -> "Control":
        if not (self.delta_s >= -1e-12
                and self.delta_s + self.delta_a <= delta_max + 1e-12
                and self.delta_s - self.delta_a <= delta_max + 1e-12):
            raise OutOfBounds(f"control {self} outside box with delta_max={delta_max}")
        return self


@dataclass(frozen=True)
class FlapPair:
    """Physical left/right trailing-edge flap deflections."""

    delta_l: float
    delta_r: float

    def validate(self, delta_max: float = 1.0) -> "FlapPair":
        if not (-1e-12 <= self.delta_l <= delta_max + 1e-12
                and -1e-12 <= self.delta_r <= delta_max + 1e-12):
            raise OutOfBounds(f"flap pair {self} outside [0, {delta_max}]")
        return self


def flap_to_equiv(f: FlapPair, delta_max: float = 1.0) -> Control:
    """Map left/right flaps to (asymmetric, symmetric) equivalent controls."""
    f.validate(delta_max)
    return Control(delta_a=f.delta_r - f.delta_l, delta_s=min(f.delta_l, f.delta_r))


def equiv_to_flap(c: Control, delta_max: float = 1.0) -> FlapPair:
    """Inverse of :func:`flap_to_equiv`; valid on the equivalent-control box."""
    c.validate(delta_max)
    if c.delta_a >= 0.0:
        return FlapPair(delta_l=c.delta_s, delta_r=c.delta_s + c.delta_a)
    return FlapPair(delta_l=c.delta_s - c.delta_a, delta_r=c.delta_s)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class AeroTable:
    """Polynomial aerodynamic surrogate coefficients.

    Lift/drag/side force and roll/pitch/yaw moment coefficients as low-order
    polynomials in angle of attack, sideslip, nondimensional body rates and
    the two flap controls. Defaults are calibrated so the trimmed glide of
    the default :class:`ParafoilParams` reaches ~15.3 m/s horizontal and
    ~7.9 m/s descent speed.
    """

    CL0: float = 0.1337
    CLa: float = 0.9
    CLds: float = 0.15
    CD0: float = 0.12
    CDa2: float = 0.7604
    CDds: float = 0.10
    CYb: float = -0.30
    Clb: float = -0.05
    Clp: float = -0.40
    Clda: float = 0.0018
    Cm0: float = 0.3467
    Cma: float = -0.72
    Cmq: float = -1.80
    Cmds: float = 0.0
    Cnb: float = 0.035
    Cnr: float = -0.12
    Cnda: float = 0.0068

    def perturbed(self, rng: np.random.Generator, three_sigma: float = 0.05) -> "AeroTable":
        """Gaussian multiplicative perturbation, ``three_sigma`` of mean as 3-sigma."""
        out = {}
        for name, value in vars(self).items():
            out[name] = value * (1.0 + rng.normal(0.0, three_sigma / 3.0))
        return AeroTable(**out)


@dataclass
class ParafoilParams:
    """Mass, inertia, apparent-mass and aerodynamic data of one parafoil system."""

    m: float = 300.0
    J: np.ndarray = field(default_factory=lambda: np.diag([1800.0, 1900.0, 300.0]))
    m_app: np.ndarray = field(default_factory=lambda: np.diag([15.0, 40.0, 150.0]))
    J_app: np.ndarray = field(default_factory=lambda: np.diag([150.0, 100.0, 50.0]))
    r_app: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -5.5]))
    r_ac: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -5.0]))
    S: float = 26.0
    span: float = 8.0
    chord: float = 3.3
    rho: float = 1.225
    delta_max: float = 1.0
    aero: AeroTable = field(default_factory=AeroTable)

    def __post_init__(self):
        self.J = np.asarray(self.J, dtype=float)
        self.m_app = np.asarray(self.m_app, dtype=float)
        self.J_app = np.asarray(self.J_app, dtype=float)
        self.r_app = np.asarray(self.r_app, dtype=float)
        self.r_ac = np.asarray(self.r_ac, dtype=float)
        self._mass_matrix = None
        self._mass_inv = None
        self._comp = None

    def mass_matrix(self) -> np.ndarray:
        """Composite 6x6 inertia coupling linear and angular acceleration."""
        if self._mass_matrix is None:
            R = skew(self.r_app)
            A = np.zeros((6, 6))
            A[:3, :3] = self.m * np.eye(3) + self.m_app
            A[:3, 3:] = -self.m_app @ R
            A[3:, :3] = R @ self.m_app
            A[3:, 3:] = self.J + self.J_app - R @ self.m_app @ R
            self._mass_matrix = A
        return self._mass_matrix

    def mass_matrix_inv(self) -> np.ndarray:
        if getattr(self, "_mass_inv", None) is None:
            A = self.mass_matrix()
            try:
                self._mass_inv = np.linalg.inv(A)
            except np.linalg.LinAlgError as exc:
                raise SingularMass(str(exc)) from None
        return self._mass_inv

    def _composites(self):
        """Cached (R, Mt, Jt, maR, ma) products for the coupling terms."""
        if getattr(self, "_comp", None) is None:
            R = skew(self.r_app)
            self._comp = (R, self.m * np.eye(3) + self.m_app,
                          self.J + self.J_app, self.m_app @ R, self.m_app)
        return self._comp


@dataclass(frozen=True)
class RigidState:
    """Full 6-DOF state: ground position, attitude, body velocity and rates."""

    r: np.ndarray
    o: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.r, self.o, self.v, self.w])

    @staticmethod
    def from_array(x) -> "RigidState":
        x = np.asarray(x, dtype=float)
        return RigidState(r=x[0:3].copy(), o=x[3:6].copy(), v=x[6:9].copy(), w=x[9:12].copy())

    @property
    def altitude(self) -> float:
        return -self.r[2]

    @property
    def heading(self) -> float:
        return self.o[2]


@dataclass(frozen=True)
class KinState:
    """Reduced guidance state: planar position, altitude, heading."""

    x: float
    y: float
    z: float
    psi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.psi])

    @staticmethod
    def from_array(a) -> "KinState":
        return KinState(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def kin_from_rigid(s: RigidState) -> KinState:
    """Project the full state onto the guidance state (altitude-positive z)."""
    return KinState(x=float(s.r[0]), y=float(s.r[1]), z=float(s.altitude), psi=float(s.o[2]))


@dataclass
class KinParams:
    """Kinematic guidance-model parameters with correction offsets."""

    v_h: float = 14.8
    v_d: float = 7.8
    psi_dot_max: float = 0.15
    lam_h: float = 0.0
    lam_d: float = 0.0

    @property
    def v_h_eff(self) -> float:
        return self.v_h + self.lam_h

    @property
    def v_d_eff(self) -> float:
        return self.v_d + self.lam_d

    def with_correction(self, lam_h: float, lam_d: float) -> "KinParams":
        return replace(self, lam_h=float(lam_h), lam_d=float(lam_d))


# ---------------------------------------------------------------------------
# aerodynamic surrogate
# ---------------------------------------------------------------------------

def _aero_angles(v_rel):
    ur, vr, wr = v_rel
    V = math.sqrt(ur * ur + vr * vr + wr * wr)
    h = math.sqrt(ur * ur + wr * wr)
    alpha = math.atan2(wr, ur)
    beta = math.atan2(vr, h)
    return V, h, alpha, beta


def aero_forces(v_rel, w_b, u: np.ndarray, p: ParafoilParams):
    """Aerodynamic force and moment in the body frame.

    ``v_rel`` is the body-frame airspeed vector, ``w_b`` the body angular
    velocity and ``u = (delta_a, delta_s)``.
    """
    a = p.aero
    da, ds = float(u[0]), float(u[1])
    V, h, alpha, beta = _aero_angles(v_rel)
    if V < 1e-9:
        return np.zeros(3), np.zeros(3)
    qbar = 0.5 * p.rho * V * V * p.S
    pb, qb, rb = w_b
    phat = pb * p.span / (2.0 * V)
    qhat = qb * p.chord / (2.0 * V)
    rhat = rb * p.span / (2.0 * V)
    CL = a.CL0 + a.CLa * alpha + a.CLds * ds
    CD = a.CD0 + a.CDa2 * alpha * alpha + a.CDds * ds
    CY = a.CYb * beta
    Cl = a.Clb * beta + a.Clp * phat + a.Clda * da
    Cm = a.Cm0 + a.Cma * alpha + a.Cmq * qhat + a.Cmds * ds
    Cn = a.Cnb * beta + a.Cnr * rhat + a.Cnda * da
    ca, sa = math.cos(alpha), math.sin(alpha)
    F = qbar * np.array([CL * sa - CD * ca, CY, -CL * ca - CD * sa])
    M = qbar * np.array([p.span * Cl, p.chord * Cm, p.span * Cn])
    M = M + _cross3(p.r_ac, F)
    return F, M


def _aero_jacobians(v_rel, w_b, u, p: ParafoilParams):
    """d(F, M)/d(v_rel, w_b, u); returns (dF, dM) of shape (3, 8) each."""
    a = p.aero
    da, ds = float(u[0]), float(u[1])
    V, h, alpha, beta = _aero_angles(v_rel)
    dF = np.zeros((3, 8))
    dM = np.zeros((3, 8))
    if V < 1e-9:
        return dF, dM
    ur, vr, wr = v_rel
    pb, qb, rb = w_b
    qbar = 0.5 * p.rho * V * V * p.S
    dV = np.array([ur, vr, wr]) / V
    dalpha = np.array([-wr, 0.0, ur]) / (h * h)
    dbeta = np.array([-vr * ur / h, h, -vr * wr / h]) / (V * V)
    dqbar = p.rho * p.S * V * dV

    phat = pb * p.span / (2.0 * V)
    qhat = qb * p.chord / (2.0 * V)
    rhat = rb * p.span / (2.0 * V)
    dphat_v = -phat / V * dV
    dqhat_v = -qhat / V * dV
    drhat_v = -rhat / V * dV

    CL = a.CL0 + a.CLa * alpha + a.CLds * ds
    CD = a.CD0 + a.CDa2 * alpha * alpha + a.CDds * ds
    CY = a.CYb * beta
    Cl = a.Clb * beta + a.Clp * phat + a.Clda * da
    Cm = a.Cm0 + a.Cma * alpha + a.Cmq * qhat + a.Cmds * ds
    Cn = a.Cnb * beta + a.Cnr * rhat + a.Cnda * da
    ca, sa = math.cos(alpha), math.sin(alpha)

    # coefficient gradients over (v_rel, w_b, u) -> columns 0:3, 3:6, 6:8
    dCL = np.zeros(8)
    dCL[:3] = a.CLa * dalpha
    dCL[7] = a.CLds
    dCD = np.zeros(8)
    dCD[:3] = 2.0 * a.CDa2 * alpha * dalpha
    dCD[7] = a.CDds
    dCY = np.zeros(8)
    dCY[:3] = a.CYb * dbeta
    dCl = np.zeros(8)
    dCl[:3] = a.Clb * dbeta + a.Clp * dphat_v
    dCl[3] = a.Clp * p.span / (2.0 * V)
    dCl[6] = a.Clda
    dCm = np.zeros(8)
    dCm[:3] = a.Cma * dalpha + a.Cmq * dqhat_v
    dCm[4] = a.Cmq * p.chord / (2.0 * V)
    dCm[7] = a.Cmds
    dCn = np.zeros(8)
    dCn[:3] = a.Cnb * dbeta + a.Cnr * drhat_v
    dCn[5] = a.Cnr * p.span / (2.0 * V)
    dCn[6] = a.Cnda

    dqbar8 = np.zeros(8)
    dqbar8[:3] = dqbar
    dalpha8 = np.zeros(8)
    dalpha8[:3] = dalpha

    fx = CL * sa - CD * ca
    fz = -CL * ca - CD * sa
    dF[0] = dqbar8 * fx + qbar * (dCL * sa + CL * ca * dalpha8 - dCD * ca + CD * sa * dalpha8)
    dF[1] = dqbar8 * CY + qbar * dCY
    dF[2] = dqbar8 * fz + qbar * (-dCL * ca + CL * sa * dalpha8 - dCD * sa - CD * ca * dalpha8)
    dM[0] = p.span * (dqbar8 * Cl + qbar * dCl)
    dM[1] = p.chord * (dqbar8 * Cm + qbar * dCm)
    dM[2] = p.span * (dqbar8 * Cn + qbar * dCn)
    dM += skew(p.r_ac) @ dF
    return dF, dM


# ---------------------------------------------------------------------------
# 6-DOF dynamics
# ---------------------------------------------------------------------------

def _coriolis(v, w, p: ParafoilParams):
    """Velocity-coupling generalized force of the composite rigid body."""
    R, Mt, Jt, maR, ma = p._composites()
    maRw = maR @ w
    top = -_cross3(w, Mt @ v) + _cross3(w, maRw)
    bot = (-R @ _cross3(w, ma @ v)
           - _cross3(w, Jt @ w)
           + R @ _cross3(w, maRw))
    return np.concatenate([top, bot])


def _coriolis_jac(v, w, p: ParafoilParams):
    """d(coriolis)/d(v, w), shape (6, 6)."""
    R, Mt, Jt, maR, _ = p._composites()
    Wx = skew(w)
    out = np.zeros((6, 6))
    maRw = maR @ w
    mav = p.m_app @ v
    out[:3, :3] = -Wx @ Mt
    out[:3, 3:] = skew(Mt @ v) - skew(maRw) + Wx @ p.m_app @ R
    out[3:, :3] = -R @ Wx @ p.m_app
    out[3:, 3:] = (R @ skew(mav)
                   + skew(Jt @ w) - Wx @ Jt
                   + R @ (-skew(maRw) + Wx @ p.m_app @ R))
    return out


def dynamics_rhs_array(x, u, w_ground, p: ParafoilParams) -> np.ndarray:
    """Time derivative of the 12-dim state array under control and wind."""
    x = np.asarray(x, dtype=float)
    o = x[3:6]
    v = x[6:9]
    w = x[9:12]
    C = rot_ground_to_body(o)
    Cw = euler_rate_transform(o)
    v_rel = v - C @ np.asarray(w_ground, dtype=float) + _cross3(w, p.r_ac)
    F_a, M_a = aero_forces(v_rel, w, u, p)
    F_g = p.m * GRAVITY * C[:, 2]
    rhs = np.concatenate([F_a + F_g, M_a]) + _coriolis(v, w, p)
    acc = p.mass_matrix_inv() @ rhs
    out = np.empty(12)
    out[0:3] = C.T @ v
    out[3:6] = Cw @ w
    out[6:12] = acc
    return out


def dynamics_rhs(x: RigidState, u: Control, w_ground, p: ParafoilParams) -> np.ndarray:
    """Wrapper over :func:`dynamics_rhs_array` for typed states/controls."""
    u.validate(p.delta_max)
    return dynamics_rhs_array(x.as_array(), np.array([u.delta_a, u.delta_s]), w_ground, p)


def _skew_batch(V):
    n = V.shape[0]
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -V[:, 2]
    S[:, 0, 2] = V[:, 1]
    S[:, 1, 0] = V[:, 2]
    S[:, 1, 2] = -V[:, 0]
    S[:, 2, 0] = -V[:, 1]
    S[:, 2, 1] = V[:, 0]
    return S


def _rot_batch(O):
    """Batched rotation matrices and angle derivatives: (n,3,3), (n,3,3,3)."""
    phi, theta, psi = O[:, 0], O[:, 1], O[:, 2]
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cps, sps = np.cos(psi), np.sin(psi)
    n = O.shape[0]
    C = np.empty((n, 3, 3))
    C[:, 0, 0] = cth * cps
    C[:, 0, 1] = cth * sps
    C[:, 0, 2] = -sth
    C[:, 1, 0] = sph * sth * cps - cph * sps
    C[:, 1, 1] = sph * sth * sps + cph * cps
    C[:, 1, 2] = sph * cth
    C[:, 2, 0] = cph * sth * cps + sph * sps
    C[:, 2, 1] = cph * sth * sps - sph * cps
    C[:, 2, 2] = cph * cth
    dC = np.zeros((n, 3, 3, 3))
    # d/dphi
    dC[:, 0, 1, 0] = cph * sth * cps + sph * sps
    dC[:, 0, 1, 1] = cph * sth * sps - sph * cps
    dC[:, 0, 1, 2] = cph * cth
    dC[:, 0, 2, 0] = -sph * sth * cps + cph * sps
    dC[:, 0, 2, 1] = -sph * sth * sps - cph * cps
    dC[:, 0, 2, 2] = -sph * cth
    # d/dtheta
    dC[:, 1, 0, 0] = -sth * cps
    dC[:, 1, 0, 1] = -sth * sps
    dC[:, 1, 0, 2] = -cth
    dC[:, 1, 1, 0] = sph * cth * cps
    dC[:, 1, 1, 1] = sph * cth * sps
    dC[:, 1, 1, 2] = -sph * sth
    dC[:, 1, 2, 0] = cph * cth * cps
    dC[:, 1, 2, 1] = cph * cth * sps
    dC[:, 1, 2, 2] = -cph * sth
    # d/dpsi
    dC[:, 2, 0, 0] = -cth * sps
    dC[:, 2, 0, 1] = cth * cps
    dC[:, 2, 1, 0] = -sph * sth * sps - cph * cps
    dC[:, 2, 1, 1] = sph * sth * cps - cph * sps
    dC[:, 2, 2, 0] = -cph * sth * sps + sph * cps
    dC[:, 2, 2, 1] = cph * sth * cps + sph * sps
    return C, dC


def _euler_rate_batch(O):
    """Batched Euler-rate transforms and (roll, pitch) derivatives.

    Rows at gimbal lock come back NaN so optimizer line searches reject the
    trial point instead of aborting.
    """
    phi, theta = O[:, 0], O[:, 1]
    bad = np.abs(theta) >= math.pi / 2 - ATT_EPS
    theta = np.where(bad, np.nan, theta)
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    tth = sth / cth
    n = O.shape[0]
    Cw = np.zeros((n, 3, 3))
    Cw[:, 0, 0] = 1.0
    Cw[:, 0, 1] = sph * tth
    Cw[:, 0, 2] = cph * tth
    Cw[:, 1, 1] = cph
    Cw[:, 1, 2] = -sph
    Cw[:, 2, 1] = sph / cth
    Cw[:, 2, 2] = cph / cth
    dCw = np.zeros((n, 2, 3, 3))
    dCw[:, 0, 0, 1] = cph * tth
    dCw[:, 0, 0, 2] = -sph * tth
    dCw[:, 0, 1, 1] = -sph
    dCw[:, 0, 1, 2] = -cph
    dCw[:, 0, 2, 1] = cph / cth
    dCw[:, 0, 2, 2] = -sph / cth
    sec2 = 1.0 / cth ** 2
    dCw[:, 1, 0, 1] = sph * sec2
    dCw[:, 1, 0, 2] = cph * sec2
    dCw[:, 1, 2, 1] = sph * sth * sec2
    dCw[:, 1, 2, 2] = cph * sth * sec2
    return Cw, dCw


def _aero_batch(v_rel, W, U, p: ParafoilParams, with_jac: bool):
    """Batched aero force/moment and optional (v_rel, w, u) Jacobians."""
    a = p.aero
    n = v_rel.shape[0]
    ur, vr, wr = v_rel[:, 0], v_rel[:, 1], v_rel[:, 2]
    V = np.sqrt(np.sum(v_rel ** 2, axis=1))
    V = np.maximum(V, 1e-9)
    h = np.sqrt(np.maximum(ur ** 2 + wr ** 2, 1e-18))
    alpha = np.arctan2(wr, ur)
    beta = np.arctan2(vr, h)
    qbar = 0.5 * p.rho * V ** 2 * p.S
    pb, qb, rb = W[:, 0], W[:, 1], W[:, 2]
    phat = pb * p.span / (2.0 * V)
    qhat = qb * p.chord / (2.0 * V)
    rhat = rb * p.span / (2.0 * V)
    da, ds = U[:, 0], U[:, 1]
    CL = a.CL0 + a.CLa * alpha + a.CLds * ds
    CD = a.CD0 + a.CDa2 * alpha ** 2 + a.CDds * ds
    CY = a.CYb * beta
    Cl = a.Clb * beta + a.Clp * phat + a.Clda * da
    Cm = a.Cm0 + a.Cma * alpha + a.Cmq * qhat + a.Cmds * ds
    Cn = a.Cnb * beta + a.Cnr * rhat + a.Cnda * da
    ca, sa = np.cos(alpha), np.sin(alpha)
    F = np.empty((n, 3))
    M = np.empty((n, 3))
    F[:, 0] = qbar * (CL * sa - CD * ca)
    F[:, 1] = qbar * CY
    F[:, 2] = qbar * (-CL * ca - CD * sa)
    M[:, 0] = qbar * p.span * Cl
    M[:, 1] = qbar * p.chord * Cm
    M[:, 2] = qbar * p.span * Cn
    M = M + _cross_rows(np.broadcast_to(p.r_ac, F.shape), F)
    if not with_jac:
        return F, M, None, None

    dV = v_rel / V[:, None]
    dalpha = np.zeros((n, 3))
    dalpha[:, 0] = -wr / h ** 2
    dalpha[:, 2] = ur / h ** 2
    dbeta = np.empty((n, 3))
    dbeta[:, 0] = -vr * ur / (h * V ** 2)
    dbeta[:, 1] = h / V ** 2
    dbeta[:, 2] = -vr * wr / (h * V ** 2)
    dqbar = p.rho * p.S * V[:, None] * dV

    dF = np.zeros((n, 3, 8))
    dM = np.zeros((n, 3, 8))
    dCL = np.zeros((n, 8))
    dCL[:, 0:3] = a.CLa * dalpha
    dCL[:, 7] = a.CLds
    dCD = np.zeros((n, 8))
    dCD[:, 0:3] = 2.0 * a.CDa2 * alpha[:, None] * dalpha
    dCD[:, 7] = a.CDds
    dCY = np.zeros((n, 8))
    dCY[:, 0:3] = a.CYb * dbeta
    dCl = np.zeros((n, 8))
    dCl[:, 0:3] = a.Clb * dbeta + a.Clp * (-phat / V)[:, None] * dV
    dCl[:, 3] = a.Clp * p.span / (2.0 * V)
    dCl[:, 6] = a.Clda
    dCm = np.zeros((n, 8))
    dCm[:, 0:3] = a.Cma * dalpha + a.Cmq * (-qhat / V)[:, None] * dV
    dCm[:, 4] = a.Cmq * p.chord / (2.0 * V)
    dCm[:, 7] = a.Cmds
    dCn = np.zeros((n, 8))
    dCn[:, 0:3] = a.Cnb * dbeta + a.Cnr * (-rhat / V)[:, None] * dV
    dCn[:, 5] = a.Cnr * p.span / (2.0 * V)
    dCn[:, 6] = a.Cnda
    dqbar8 = np.zeros((n, 8))
    dqbar8[:, 0:3] = dqbar
    dalpha8 = np.zeros((n, 8))
    dalpha8[:, 0:3] = dalpha

    fx = CL * sa - CD * ca
    fz = -CL * ca - CD * sa
    dF[:, 0] = (dqbar8 * fx[:, None]
                + qbar[:, None] * (dCL * sa[:, None] + (CL * ca)[:, None] * dalpha8
                                   - dCD * ca[:, None] + (CD * sa)[:, None] * dalpha8))
    dF[:, 1] = dqbar8 * CY[:, None] + qbar[:, None] * dCY
    dF[:, 2] = (dqbar8 * fz[:, None]
                + qbar[:, None] * (-dCL * ca[:, None] + (CL * sa)[:, None] * dalpha8
                                   - dCD * sa[:, None] - (CD * ca)[:, None] * dalpha8))
    dM[:, 0] = p.span * (dqbar8 * Cl[:, None] + qbar[:, None] * dCl)
    dM[:, 1] = p.chord * (dqbar8 * Cm[:, None] + qbar[:, None] * dCm)
    dM[:, 2] = p.span * (dqbar8 * Cn[:, None] + qbar[:, None] * dCn)
    dM += np.einsum("ij,njk->nik", skew(p.r_ac), dF)
    return F, M, dF, dM


def dynamics_rhs_batch(X, U, w_ground, p: ParafoilParams) -> np.ndarray:
    """Vectorized :func:`dynamics_rhs_array` over stacked states/controls."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    wg = np.asarray(w_ground, dtype=float)
    O, Vb, Wb = X[:, 3:6], X[:, 6:9], X[:, 9:12]
    C, _ = _rot_batch(O)
    Cw, _ = _euler_rate_batch(O)
    v_rel = Vb - C @ wg + _cross_rows(Wb, np.broadcast_to(p.r_ac, Vb.shape))
    F, M, _, _ = _aero_batch(v_rel, Wb, U, p, with_jac=False)
    F = F + p.m * GRAVITY * C[:, :, 2]

    R, Mt, Jt, maR, ma = p._composites()
    MtV = Vb @ Mt.T
    maRw = Wb @ maR.T
    mav = Vb @ ma.T
    top = -_cross_rows(Wb, MtV) + _cross_rows(Wb, maRw)
    bot = (-_cross_rows(Wb, mav) @ R.T - _cross_rows(Wb, Wb @ Jt.T)
           + _cross_rows(Wb, maRw) @ R.T)
    g6 = np.concatenate([F + top, M + bot], axis=1)
    acc = g6 @ p.mass_matrix_inv().T
    out = np.empty_like(X)
    out[:, 0:3] = np.einsum("nij,nj->ni", C.transpose(0, 2, 1), Vb)
    out[:, 3:6] = np.einsum("nij,nj->ni", Cw, Wb)
    out[:, 6:12] = acc
    return out


def dynamics_jacobians_batch(X, U, w_ground, p: ParafoilParams):
    """Vectorized analytic Jacobians: returns (n,12,12) and (n,12,2)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    wg = np.asarray(w_ground, dtype=float)
    n = X.shape[0]
    O, Vb, Wb = X[:, 3:6], X[:, 6:9], X[:, 9:12]
    C, dC = _rot_batch(O)
    Cw, dCw = _euler_rate_batch(O)
    v_rel = Vb - C @ wg + _cross_rows(Wb, np.broadcast_to(p.r_ac, Vb.shape))
    F, M, dF, dM = _aero_batch(v_rel, Wb, U, p, with_jac=True)

    Jx = np.zeros((n, 12, 12))
    Ju = np.zeros((n, 12, 2))
    # position rows
    for k in range(3):
        Jx[:, 0:3, 3 + k] = np.einsum("nij,nj->ni", dC[:, k].transpose(0, 2, 1), Vb)
    Jx[:, 0:3, 6:9] = C.transpose(0, 2, 1)
    # attitude rows
    for k in range(2):
        Jx[:, 3:6, 3 + k] = np.einsum("nij,nj->ni", dCw[:, k], Wb)
    Jx[:, 3:6, 9:12] = Cw

    dg = np.zeros((n, 6, 12))
    dg[:, 0:3, 6:9] = dF[:, :, 0:3]
    dg[:, 3:6, 6:9] = dM[:, :, 0:3]
    dg[:, 0:3, 9:12] = dF[:, :, 3:6]
    dg[:, 3:6, 9:12] = dM[:, :, 3:6]
    dvrel_dw = -skew(p.r_ac)
    dg[:, 0:3, 9:12] += dF[:, :, 0:3] @ dvrel_dw
    dg[:, 3:6, 9:12] += dM[:, :, 0:3] @ dvrel_dw
    for k in range(3):
        dvrel = -(dC[:, k] @ wg)
        dg[:, 0:3, 3 + k] += np.einsum("nij,nj->ni", dF[:, :, 0:3], dvrel)
        dg[:, 3:6, 3 + k] += np.einsum("nij,nj->ni", dM[:, :, 0:3], dvrel)
        dg[:, 0:3, 3 + k] += p.m * GRAVITY * dC[:, k, :, 2]
    dg_u = np.concatenate([dF[:, :, 6:8], dM[:, :, 6:8]], axis=1)

    # coriolis contribution, batched version of _coriolis_jac
    R, Mt, Jt, maR, ma = p._composites()
    Wx = _skew_batch(Wb)
    maRw = Wb @ maR.T
    mav = Vb @ ma.T
    MtV = Vb @ Mt.T
    dg[:, 0:3, 6:9] += -Wx @ Mt
    dg[:, 0:3, 9:12] += _skew_batch(MtV) - _skew_batch(maRw) + Wx @ maR
    dg[:, 3:6, 6:9] += -(R @ Wx) @ ma
    dg[:, 3:6, 9:12] += (R @ _skew_batch(mav)
                         + _skew_batch(Wb @ Jt.T) - Wx @ Jt
                         + R @ (-_skew_batch(maRw) + Wx @ maR))
    Ainv = p.mass_matrix_inv()
    Jx[:, 6:12, :] = np.einsum("ij,njk->nik", Ainv, dg)
    Ju[:, 6:12, :] = np.einsum("ij,njk->nik", Ainv, dg_u)
    return Jx, Ju


def dynamics_jacobians(x, u, w_ground, p: ParafoilParams):
    """Analytic Jacobians of :func:`dynamics_rhs_array`.

    Returns ``(d rhs / d x, d rhs / d u)`` with shapes (12, 12) and (12, 2).
    """
    x = np.asarray(x, dtype=float)
    o = x[3:6]
    v = x[6:9]
    w = x[9:12]
    wg = np.asarray(w_ground, dtype=float)
    C = rot_ground_to_body(o)
    dC = drot_ground_to_body(o)
    Cw = euler_rate_transform(o)
    dCw = deuler_rate_transform(o)
    v_rel = v - C @ wg + _cross3(x[9:12], p.r_ac)

    Jx = np.zeros((12, 12))
    Ju = np.zeros((12, 2))

    # position row: d(C^T v)
    for k in range(3):
        Jx[0:3, 3 + k] = dC[k].T @ v
    Jx[0:3, 6:9] = C.T

    # attitude row: d(Cw w)
    for k in range(2):
        Jx[3:6, 3 + k] = dCw[k] @ w
    Jx[3:6, 9:12] = Cw

    # acceleration rows
    dF, dM = _aero_jacobians(v_rel, w, u, p)
    dg = np.zeros((6, 12))
    dg_u = np.zeros((6, 2))
    # aero via v_rel: d v_rel/d v = I, d v_rel/d o[k] = -dC[k] @ wg
    dg[0:3, 6:9] += dF[:, 0:3]
    dg[3:6, 6:9] += dM[:, 0:3]
    dg[0:3, 9:12] += dF[:, 3:6]
    dg[3:6, 9:12] += dM[:, 3:6]
    dvrel_dw = -skew(p.r_ac)
    dg[0:3, 9:12] += dF[:, 0:3] @ dvrel_dw
    dg[3:6, 9:12] += dM[:, 0:3] @ dvrel_dw
    for k in range(3):
        dvrel = -dC[k] @ wg
        dg[0:3, 3 + k] += dF[:, 0:3] @ dvrel
        dg[3:6, 3 + k] += dM[:, 0:3] @ dvrel
        dg[0:3, 3 + k] += p.m * GRAVITY * dC[k][:, 2]
    dg_u[0:3] = dF[:, 6:8]
    dg_u[3:6] = dM[:, 6:8]
    dg[:, 6:12] += _coriolis_jac(v, w, p)

    Ainv = p.mass_matrix_inv()
    Jx[6:12, :] = Ainv @ dg
    Ju[6:12, :] = Ainv @ dg_u
    return Jx, Ju


# ---------------------------------------------------------------------------
# kinematic guidance model
# ---------------------------------------------------------------------------

def kinematics_rhs(x_hat, u_psi: float, kp: KinParams, w_x: float) -> np.ndarray:
    """Reduced-model derivative ``(x', y', z', psi')`` with corrected speeds."""
    if abs(u_psi) > kp.psi_dot_max + 1e-9:
        raise TurnRateExceeded(f"|{u_psi}| > {kp.psi_dot_max}")
    if isinstance(x_hat, KinState):
        psi = x_hat.psi
    else:
        psi = float(np.asarray(x_hat)[3])
    vh = kp.v_h_eff
    vd = kp.v_d_eff
    return np.array([vh * math.cos(psi) + w_x, vh * math.sin(psi), -vd, u_psi])


# ---------------------------------------------------------------------------
# wind
# ---------------------------------------------------------------------------

@dataclass
class DrydenParams:
    """Per-axis turbulence intensities and scale lengths with a mean airspeed."""

    sigma: tuple = (0.7, 0.7, 0.5)
    scale: tuple = (200.0, 200.0, 100.0)
    airspeed: float = 17.0


class DrydenGenerator:
    """Dryden gust generator: shaping filters driven by seeded white noise.

    The longitudinal channel uses the first-order filter, the lateral and
    vertical channels the second-order filter. Each discretized channel is
    normalized so the stationary output standard deviation equals the
    configured intensity exactly. Identical seeds reproduce identical gust
    sequences.
    """

    def __init__(self, params: DrydenParams, seed, dt: float = 0.01):
        self.params = params
        self.rng = np.random.default_rng(seed)
        self._dt = None
        self._x1 = 0.0
        self._x2 = np.zeros((2, 2))  # one 2-state filter per lateral/vertical axis
        self._build(dt)

    def _build(self, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        pp = self.params
        V = pp.airspeed
        # first-order (axis 0)
        T0 = pp.scale[0] / V
        self._a1 = math.exp(-dt / T0)
        self._b1 = math.sqrt(max(0.0, 1.0 - self._a1 ** 2))
        # second-order (axes 1, 2)
        self._A2, self._L2, self._C2 = [], [], []
        for ax in (1, 2):
            T = pp.scale[ax] / V
            A = np.array([[0.0, 1.0], [-1.0 / T ** 2, -2.0 / T]])
            B = np.array([[0.0], [1.0]])
            # van Loan discretization of (A, B B^T)
            M = np.zeros((4, 4))
            M[:2, :2] = -A
            M[:2, 2:] = B @ B.T
            M[2:, 2:] = A.T
            E = expm(M * dt)
            Ad = E[2:, 2:].T
            Qd = Ad @ E[:2, 2:]
            Qd = 0.5 * (Qd + Qd.T)
            evals, evecs = np.linalg.eigh(Qd)
            L = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None)))
            C = np.array([math.sqrt(3.0) / T, 1.0]) @ np.array([[1.0 / T, 0.0], [0.0, 1.0]])
            # normalize stationary output variance to 1, then scale by sigma
            P = solve_discrete_lyapunov(Ad, Qd)
            var = float(C @ P @ C)
            C = C / math.sqrt(var) if var > 0 else C * 0.0
            self._A2.append(Ad)
            self._L2.append(L)
            self._C2.append(C)
        self._dt = dt

    def sample(self, dt: float) -> np.ndarray:
        """Advance one step and return the gust vector (ground frame, m/s)."""
        if dt != self._dt:
            self._build(dt)
        pp = self.params
        self._x1 = self._a1 * self._x1 + self._b1 * self.rng.standard_normal()
        out = np.empty(3)
        out[0] = pp.sigma[0] * self._x1
        for i, ax in enumerate((1, 2)):
            noise = self._L2[i] @ self.rng.standard_normal(2)
            self._x2[i] = self._A2[i] @ self._x2[i] + noise
            out[ax] = pp.sigma[ax] * float(self._C2[i] @ self._x2[i])
        return out


def dryden_sample(gen: DrydenGenerator, dt: float) -> np.ndarray:
    """Functional wrapper over :meth:`DrydenGenerator.sample`."""
    return gen.sample(dt)


@dataclass
class WindField:
    """Constant wind along ground X plus per-parafoil Dryden turbulence."""

    w_c: float = 3.0
    dryden: DrydenParams = field(default_factory=DrydenParams)
    enabled: bool = True

    def constant(self) -> np.ndarray:
        return np.array([self.w_c, 0.0, 0.0])

    def make_generator(self, seed) -> DrydenGenerator:
        return DrydenGenerator(self.dryden, seed)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def integrate_step(rhs, x, u, w, dt: float):
    """One classical Runge-Kutta 4 step of ``x' = rhs(x, u, w)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = rhs(x, u, w)
    k2 = rhs(x + 0.5 * dt * k1, u, w)
    k3 = rhs(x + 0.5 * dt * k2, u, w)
    k4 = rhs(x + dt * k3, u, w)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def find_trim(p: ParafoilParams, wind=None, v_guess=(15.0, 0.0, 8.0),
              control=(0.0, 0.0)):
    """Steady-glide trim of the 6-DOF model at a held symmetric control.

    Solves for (pitch, u, w) such that the velocity and angular-velocity
    derivatives vanish with wings level and zero yaw. Returns the trimmed
    :class:`RigidState` (at the origin) and the residual norm.
    """
    from scipy.optimize import fsolve

    wind = np.zeros(3) if wind is None else np.asarray(wind, dtype=float)
    u0 = np.asarray(control, dtype=float)

    def residual(q):
        theta, vu, vw = q
        x = np.zeros(12)
        x[4] = theta
        x[6] = vu
        x[8] = vw
        d = dynamics_rhs_array(x, u0, wind, p)
        return np.array([d[6], d[8], d[10]])  # du, dw, dq

    sol, info, ier, _ = fsolve(residual, np.array([-0.3, v_guess[0], v_guess[2]]),
                               full_output=True)
    x = np.zeros(12)
    x[4] = sol[0]
    x[6] = sol[1]
    x[8] = sol[2]
    res = np.linalg.norm(dynamics_rhs_array(x, u0, wind, p)[6:12])
    return RigidState.from_array(x), res

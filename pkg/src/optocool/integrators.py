"""Discretization schemes for the damped oscillator Langevin equation.

Each scheme reduces one time step of

    u̇ = v,    v̇ = −Ω² u − Γ v + f + σ ξ(t)

to the linear map ``x[k+1] = phi @ x[k] + force_gain * f[k] + noise_factor @ ε[k]``
with ε standard normal pairs and σ = 1. Callers scale ``noise_factor`` by σ.
"""

import math
from abc import ABC, abstractmethod
from typing import List, NamedTuple

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cholesky, expm

from .exceptions import ConfigError


class Discretization(NamedTuple):
    phi: NDArray[np.float64]
    force_gain: NDArray[np.float64]
    noise_factor: NDArray[np.float64]


class Integrator(ABC):
    """Abstract base class for one-step discretizations."""

    name: str = ""

    @abstractmethod
    def discretize(self, omega: float, gamma: float, dt: float) -> Discretization:
        """Builds the one-step map for the given frequency, damping and step.

        Args:
            omega: Angular frequency of the oscillator (rad/s).
            gamma: Energy damping rate including any velocity feedback (rad/s).
            dt: Time step (s).

        Returns:
            The step matrices for unit force-noise intensity.
        """


class SymplecticEulerIntegrator(Integrator):
    """Semi-implicit Euler–Maruyama: velocity first, position from the new velocity."""

    name = "symplectic"

    def discretize(self, omega: float, gamma: float, dt: float) -> Discretization:
        damp = 1.0 - gamma * dt
        phi = np.array(
            [
                [1.0 - dt**2 * omega**2, dt * damp],
                [-dt * omega**2, damp],
            ]
        )
        force_gain = np.array([dt**2, dt])
        root = math.sqrt(dt)
        noise_factor = np.array([[root * dt, 0.0], [root, 0.0]])
        return Discretization(phi=phi, force_gain=force_gain, noise_factor=noise_factor)


class ExactPropagator(Integrator):
    """Matrix-exponential propagator with the exact discrete noise covariance.

    Works in the rotating variables (u, v/Ω) and phase τ = Ω t so that the
    matrix exponentials stay well scaled in physical units.
    """

    name = "exact"

    def discretize(self, omega: float, gamma: float, dt: float) -> Discretization:
        h = omega * dt
        a = np.array([[0.0, 1.0], [-1.0, -gamma / omega]])

        # Van Loan block exponential for the noise covariance
        diffusion = np.array([[0.0, 0.0], [0.0, 1.0]])
        block = np.zeros((4, 4))
        block[:2, :2] = -a
        block[:2, 2:] = diffusion
        block[2:, 2:] = a.T
        expo = expm(block * h)
        phi_scaled = expo[2:, 2:].T
        cov_scaled = phi_scaled @ expo[:2, 2:]
        cov_scaled = 0.5 * (cov_scaled + cov_scaled.T)

        augmented = np.zeros((3, 3))
        augmented[:2, :2] = a
        augmented[1, 2] = 1.0
        gain_scaled = expm(augmented * h)[:2, 2]

        scale = np.diag([1.0, omega])
        phi = scale @ phi_scaled @ np.linalg.inv(scale)
        force_gain = scale @ gain_scaled / omega**2
        noise_factor = scale @ cholesky(cov_scaled, lower=True) / omega**1.5
        return Discretization(phi=phi, force_gain=force_gain, noise_factor=noise_factor)


class IntegratorFactory:
    """Factory for creating integrator instances."""

    @staticmethod
    def create_integrator(name: str) -> Integrator:
        """Creates an integrator by name.

        Args:
            name: "symplectic" or "exact".

        Returns:
            A concrete Integrator.

        Raises:
            ConfigError: If the name is not known.
        """
        if name.lower() == "symplectic":
            return SymplecticEulerIntegrator()
        elif name.lower() == "exact":
            return ExactPropagator()
        else:
            raise ConfigError(f"Unknown integrator: {name}")

    @staticmethod
    def get_available_integrators() -> List[str]:
        return ["symplectic", "exact"]

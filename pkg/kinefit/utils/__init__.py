import numpy as np


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    """
    Wrap angles into the half-open interval (-pi, pi].

    Args:
        angles (np.ndarray): Angles in radians, any shape.

    Returns:
        np.ndarray: Wrapped angles, same shape.
    """
    angles = np.asarray(angles, dtype=float)
    return np.pi - np.mod(np.pi - angles, 2.0 * np.pi)

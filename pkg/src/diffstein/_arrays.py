"""Small array helpers shared by the model, kernel and diffusion layers."""

import numpy as np

from .errors import DomainError


def as_batch(x, dim):
    """Return ``(X, single)`` with ``X`` of shape ``(n, dim)``.

    A 1-d input of length ``dim`` (or a scalar when ``dim == 1``) is promoted to
    a batch of one; ``single`` tells the caller to strip the leading axis again.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        if dim != 1:
            raise DomainError(f"scalar point given for dimension {dim}")
        return arr.reshape(1, 1), True
    if arr.ndim == 1:
        if dim == 1 and arr.shape[0] != 1:
            return arr.reshape(-1, 1), False
        if arr.shape[0] != dim:
            raise DomainError(f"point has length {arr.shape[0]}, expected {dim}")
        return arr.reshape(1, dim), True
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DomainError(f"batch has shape {arr.shape}, expected (n, {dim})")
    return arr, False


def unbatch(out, single):
    return out[0] if single else out


def as_sample(data, dim=None):
    """Validate an ``(n, d)`` sample; 1-d input is read as ``n`` scalar points."""
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DomainError(f"sample must be 2-d, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise DomainError(f"sample has dimension {arr.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("sample contains non-finite entries")
    return np.ascontiguousarray(arr)


def sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))

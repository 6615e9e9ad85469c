"""Differentiable rotation helpers shared by the loss and model code.

All functions are torch-native and batched over leading dimensions; float64
tensors are used wherever gradients are checked against finite differences.
"""

import torch


def axis_angle_to_matrix(v: torch.Tensor) -> torch.Tensor:
    """Rodrigues map, (..., 3) -> (..., 3, 3), smooth at the origin."""
    angle = torch.linalg.norm(v, dim=-1, keepdim=True)
    small = angle < 1e-8
    safe = torch.where(small, torch.ones_like(angle), angle)
    axis = v / safe
    s = torch.sin(angle)
    c = torch.cos(angle)
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack(
        [
            torch.stack([zero, -z, y], dim=-1),
            torch.stack([z, zero, -x], dim=-1),
            torch.stack([-y, x, zero], dim=-1),
        ],
        dim=-2,
    )
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(K.shape)
    R_exact = eye + s[..., None] * K + (1 - c)[..., None] * (K @ K)
    # first-order expansion keeps gradients finite at angle == 0
    Kv = torch.stack(
        [
            torch.stack([zero, -v[..., 2], v[..., 1]], dim=-1),
            torch.stack([v[..., 2], zero, -v[..., 0]], dim=-1),
            torch.stack([-v[..., 1], v[..., 0], zero], dim=-1),
        ],
        dim=-2,
    )
    R_small = eye + Kv
    return torch.where(small[..., None], R_small, R_exact)


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) wxyz unit quaternion -> (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ]
    return torch.stack(rows, dim=-2)


def retract(q_ref: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Rotation matrix for R(q_ref) @ exp(delta), delta a (..., 3) tangent increment."""
    return quat_to_matrix(q_ref) @ axis_angle_to_matrix(delta)


def matrix_to_6d(R: torch.Tensor) -> torch.Tensor:
    """First two columns of the rotation matrix, flattened: (..., 3, 3) -> (..., 6)."""
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional embedding of a scalar in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=t.dtype, device=t.device)
        * (-torch.log(torch.tensor(10_000.0, dtype=t.dtype)) / max(half - 1, 1))
    )
    args = t[..., None] * freqs * 1000.0
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)

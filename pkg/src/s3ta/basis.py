"""Fixed sinusoidal spatial basis.

The attention readout sums over space, so location information would be
lost unless the keys/values carry it explicitly. A fixed grid of separable
sine/cosine products over pixel-centre coordinates is concatenated to both
tensors for that purpose.
"""

from __future__ import annotations

import torch


def _axis_functions(coords: torch.Tensor, num_frequencies: int) -> torch.Tensor:
    """Evaluate the 2F one-dimensional basis functions on `coords`.

    Function 2i is cos(pi*(i+1)*t), function 2i+1 is sin(pi*(i+1)*t),
    for i in [0, F). Returns a tensor of shape (len(coords), 2F).
    """
    out = torch.empty(coords.shape[0], 2 * num_frequencies, dtype=coords.dtype)
    for i in range(num_frequencies):
        angle = torch.pi * (i + 1) * coords
        out[:, 2 * i] = torch.cos(angle)
        out[:, 2 * i + 1] = torch.sin(angle)
    return out


def build_spatial_basis(
    height: int, width: int, num_frequencies: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Build the fixed positional basis grid of shape (height, width, (2F)^2).

    Channel p*2F + q holds f_p(u) * f_q(v) where u = (x+0.5)/width and
    v = (y+0.5)/height are pixel-centre coordinates. The grid is a pure
    function of its arguments: same inputs give a bitwise-identical tensor,
    and every entry lies in [-1, 1].
    """
    if height < 1 or width < 1 or num_frequencies < 1:
        raise ValueError(
            f"basis dimensions must be positive, got "
            f"({height}, {width}, F={num_frequencies})"
        )
    u = (torch.arange(width, dtype=dtype) + 0.5) / width
    v = (torch.arange(height, dtype=dtype) + 0.5) / height
    fu = _axis_functions(u, num_frequencies)  # (W, 2F)
    fv = _axis_functions(v, num_frequencies)  # (H, 2F)
    # (H, W, 2F, 2F): axis p varies with u (x), axis q with v (y).
    grid = fu[None, :, :, None] * fv[:, None, None, :]
    return grid.reshape(height, width, (2 * num_frequencies) ** 2).contiguous()

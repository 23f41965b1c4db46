"""Tensor substrate: centered unitary 2-D FFTs, padded convolution, gradients.

Everything runs on torch CPU tensors in float64. Complex data is carried as a
trailing (real, imag) channel pair, shape (..., H, W, 2), so the autodiff graph
stays purely real; the 2x2 real form of complex arithmetic is what
``view_as_complex`` gives us for free inside the FFT calls.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import torch

from .errors import ParameterError, ShapeError, SizingError

DTYPE = torch.float64

Tensor = torch.Tensor


def _admissible_extent(n: int) -> bool:
    # small-radix even sizes: 4, 8, 12, 16, 24, 32, 48, 64, ...
    if n < 4 or n % 2:
        return False
    while n % 2 == 0:
        n //= 2
    while n % 3 == 0:
        n //= 3
    return n == 1


def _check_complex_pair(x: Tensor, name: str) -> None:
    if x.ndim < 3 or x.shape[-1] != 2:
        raise ShapeError(f"{name} must have shape (..., H, W, 2), got {tuple(x.shape)}")
    h, w = x.shape[-3], x.shape[-2]
    for extent in (h, w):
        if not _admissible_extent(extent):
            raise SizingError(
                f"FFT extent {extent} unsupported; use even sizes whose prime factors are 2 and 3"
            )


def fft2c(img: Tensor) -> Tensor:
    """Centered, unitary 2-D FFT of a (..., H, W, 2) real-pair image.

    The DC component ends up at (H//2, W//2) and norms are preserved:
    ``fft2c`` and ``ifft2c`` are exact adjoint inverses of each other.
    """
    _check_complex_pair(img, "img")
    x = torch.view_as_complex(img.contiguous())
    x = torch.fft.ifftshift(x, dim=(-2, -1))
    k = torch.fft.fft2(x, norm="ortho")
    k = torch.fft.fftshift(k, dim=(-2, -1))
    return torch.view_as_real(k)


def ifft2c(ksp: Tensor) -> Tensor:
    """Inverse of :func:`fft2c`."""
    _check_complex_pair(ksp, "ksp")
    k = torch.view_as_complex(ksp.contiguous())
    k = torch.fft.ifftshift(k, dim=(-2, -1))
    x = torch.fft.ifft2(k, norm="ortho")
    x = torch.fft.fftshift(x, dim=(-2, -1))
    return torch.view_as_real(x)


def conv2d(input: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size 2-D cross-correlation with zero padding.

    input: (Cin, H, W) or (B, Cin, H, W); kernel: (Cout, Cin, k, k), k odd.
    """
    if kernel.ndim != 4 or kernel.shape[-1] != kernel.shape[-2]:
        raise ShapeError(f"kernel must be (Cout, Cin, k, k), got {tuple(kernel.shape)}")
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    unbatched = input.ndim == 3
    if unbatched:
        input = input[None]
    if input.ndim != 4 or input.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"input channels {tuple(input.shape)} do not match kernel {tuple(kernel.shape)}"
        )
    if bias is not None and bias.shape != kernel.shape[:1]:
        raise ShapeError(f"bias shape {tuple(bias.shape)} != (Cout,)")
    out = torch.nn.functional.conv2d(input, kernel, bias, padding=k // 2)
    return out[0] if unbatched else out


def backward(
    loss: Tensor,
    params: Mapping[str, Tensor] | None = None,
    retain_graph: bool = False,
) -> dict:
    """Reverse-mode gradients of a scalar loss.

    With ``params`` given (name -> tensor), returns a name -> gradient map of the
    same shapes; parameters the loss does not reach get exact zeros. Without
    ``params``, walks the graph for every requires_grad leaf and keys the map by
    the leaf tensors themselves.
    """
    if loss.ndim != 0:
        raise ShapeError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if params is None:
        leaves = _graph_leaves(loss)
        grads = torch.autograd.grad(loss, leaves, retain_graph=retain_graph, allow_unused=True)
        return {p: (g if g is not None else torch.zeros_like(p)) for p, g in zip(leaves, grads)}
    names = list(params.keys())
    values = [params[n] for n in names]
    grads = torch.autograd.grad(loss, values, retain_graph=retain_graph, allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(v))
        for n, v, g in zip(names, values, grads)
    }


def _graph_leaves(loss: Tensor) -> list:
    leaves: list = []
    seen = set()
    stack = [loss.grad_fn]
    while stack:
        node = stack.pop()
        if node is None or node in seen:
            continue
        seen.add(node)
        if type(node).__name__ == "AccumulateGrad":
            leaves.append(node.variable)
            continue
        for parent, _ in node.next_functions:
            stack.append(parent)
    if loss.requires_grad and loss.grad_fn is None and loss.is_leaf:
        leaves.append(loss)
    return leaves


def finite_diff_gradient(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    coords: Mapping[str, Sequence[int]] | None = None,
) -> dict:
    """Central-difference gradient oracle: (f(p + h e) - f(p - h e)) / 2h.

    ``f`` is re-evaluated with the shared parameter tensors perturbed in place,
    so it must read the same tensors each call. ``coords`` restricts probing to
    the given flat indices per name (all coordinates otherwise); unprobed
    entries of the returned tensors are zero.
    """
    if h <= 0:
        raise ParameterError(f"finite difference step must be positive, got {h}")
    out = {}
    for name, p in params.items():
        grad = torch.zeros_like(p)
        flat = p.detach().reshape(-1)
        gflat = grad.reshape(-1)
        idxs = range(flat.numel()) if coords is None else coords.get(name, ())
        for i in idxs:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
            fp = float(f().detach())
            with torch.no_grad():
                flat[i] = orig - h
            fm = float(f().detach())
            with torch.no_grad():
                flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = grad
    return out


def gradcheck(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    coords: Mapping[str, Sequence[int]],
    h: float = 1e-6,
    floor: float = 1e-3,
    probe: Callable[[], object] | None = None,
) -> dict:
    """Compare reverse-mode gradients against central differences per coordinate.

    Losses built on relu networks are only piecewise smooth, so a finite
    difference whose interval straddles an activation boundary measures the
    jump, not the slope. Two guards identify such coordinates and report
    them as skipped instead of compared:

    * each coordinate is probed at two step sizes (h and h/2); estimates
      disagreeing by more than 10% relative indicate a boundary inside the
      larger interval;
    * when ``probe`` is given it is called right after every evaluation of
      ``f`` and must return a fingerprint of the active set (for relu nets:
      the preactivation sign pattern); any perturbed evaluation whose
      fingerprint differs from the unperturbed one crossed a boundary, which
      the step-halving test cannot detect once the crossing sits much closer
      than h.

    Returns {"checked", "skipped", "max_rel", "worst"} where worst names the
    checked coordinate with the largest relative error.
    """
    if h <= 0:
        raise ParameterError(f"finite difference step must be positive, got {h}")
    loss = f()
    sig0 = probe() if probe is not None else None
    analytic = backward(loss, params)

    checked, skipped = 0, []
    max_rel, worst = 0.0, None
    for name, idxs in coords.items():
        flat = params[name].detach().reshape(-1)
        for i in idxs:
            orig = flat[i].item()
            vals, smooth = [], True
            for d in (h, -h, h / 2.0, -h / 2.0):
                with torch.no_grad():
                    flat[i] = orig + d
                vals.append(float(f().detach()))
                if probe is not None and probe() != sig0:
                    smooth = False
            with torch.no_grad():
                flat[i] = orig
            n1 = (vals[0] - vals[1]) / (2.0 * h)
            n2 = (vals[2] - vals[3]) / h
            if not smooth or abs(n1 - n2) > 0.1 * max(abs(n1), abs(n2), floor):
                skipped.append((name, int(i)))
                continue
            a = analytic[name].reshape(-1)[i].item()
            rel = abs(a - n2) / max(abs(a), abs(n2), floor)
            checked += 1
            if rel > max_rel:
                max_rel, worst = rel, (name, int(i), a, n2)
    return {"checked": checked, "skipped": skipped, "max_rel": max_rel, "worst": worst}

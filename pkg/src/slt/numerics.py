"""Dense float64 tensor primitives with reverse-mode gradients.

Autograd is delegated to torch; every tensor produced here is float64.
The primitives below are the ones the networks are built from, each with
explicit shape checks so that misuse fails with a readable message.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import torch
import torch.nn.functional as F

from .errors import DimensionError, EmptySequenceError, EvaluationError, RankError

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)


def as_tensor(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(values, dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {tuple(a.shape)} and {tuple(b.shape)}"
        )
    return a @ b


def temporal_conv1d(
    x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None, stride: int = 1
) -> torch.Tensor:
    """Kernel-3 temporal convolution with one zero frame of padding per side.

    ``x`` is (T, Cin) or batched (B, T, Cin); ``w`` is (Cout, Cin, 3).
    Output length is T for stride 1 and ceil(T/2) for stride 2.
    """
    if w.ndim != 3 or w.shape[2] != 3:
        raise DimensionError(f"kernel must be (Cout, Cin, 3), got {tuple(w.shape)}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.ndim != 3:
        raise DimensionError(f"expected (T, C) or (B, T, C) input, got {tuple(x.shape)}")
    if x.shape[1] == 0:
        raise EmptySequenceError("temporal_conv1d on an empty sequence")
    if x.shape[2] != w.shape[1]:
        raise DimensionError(
            f"input channels {x.shape[2]} do not match kernel {tuple(w.shape)}"
        )
    y = F.conv1d(x.transpose(1, 2), w, b, stride=stride, padding=1).transpose(1, 2)
    return y.squeeze(0) if squeeze else y


def softmax(x: torch.Tensor) -> torch.Tensor:
    z = x - x.detach().amax(dim=-1, keepdim=True)
    e = z.exp()
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    z = x - x.detach().amax(dim=-1, keepdim=True)
    return z - z.exp().sum(dim=-1, keepdim=True).log()


def relu(x: torch.Tensor) -> torch.Tensor:
    # torch's relu backward already yields 0 at exactly 0
    return torch.relu(x)


def cross_entropy_label_smoothed(
    logits: torch.Tensor, targets: torch.Tensor, eps: float = 0.0, ignore_index: int | None = None
) -> torch.Tensor:
    """Mean over non-ignored rows of -sum_v q_v log p_v, q = (1-eps)*onehot + eps/V."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps}")
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, V), got {tuple(logits.shape)}")
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    if targets.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"{targets.shape[0]} targets for {logits.shape[0]} logit rows"
        )
    keep = torch.ones_like(targets, dtype=torch.bool)
    if ignore_index is not None:
        keep = targets != ignore_index
    if not bool(keep.any()):
        raise EvaluationError("every target position is padding; mean is undefined")
    logits, targets = logits[keep], targets[keep]
    n_vocab = logits.shape[1]
    if bool(((targets < 0) | (targets >= n_vocab)).any()):
        raise DimensionError(f"target id outside [0, {n_vocab})")
    logp = log_softmax(logits)
    nll = -logp.gather(1, targets[:, None]).squeeze(1)
    smooth = -logp.mean(dim=1)
    return ((1.0 - eps) * nll + eps * smooth).mean()


def backward(
    loss: torch.Tensor,
    parameters: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
    retain_graph: bool = False,
) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss`` and return accumulated gradients by parameter name.

    Gradients add onto whatever is already stored on the parameters.
    Parameters that do not require grad map to zero tensors.
    """
    if loss.ndim != 0:
        raise RankError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    items = list(parameters.items() if isinstance(parameters, Mapping) else parameters)
    loss.backward(retain_graph=retain_graph)
    grads = {}
    for name, p in items:
        if p.requires_grad and p.grad is not None:
            grads[name] = p.grad.detach().clone()
        else:
            grads[name] = torch.zeros_like(p, dtype=DTYPE)
    return grads


def finite_difference_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    h: float = 1e-5,
    max_coords: int | None = None,
    generator: torch.Generator | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``x`` is perturbed in place and restored, so it may be a module parameter
    that ``f`` reads implicitly. With ``max_coords`` a random subset is checked.
    """
    x_leaf = x.detach() if not x.is_leaf else x
    with torch.no_grad():
        saved = x_leaf.clone()
    was = x_leaf.requires_grad
    x_leaf.requires_grad_(True)
    x_leaf.grad = None
    out = f(x_leaf)
    if out.ndim != 0:
        raise RankError("finite_difference_check needs a scalar function")
    if not torch.isfinite(out):
        raise EvaluationError(f"f(x) is not finite: {out.item()}")
    (analytic,) = torch.autograd.grad(out, x_leaf, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x_leaf)
    analytic = analytic.detach().reshape(-1)
    n = x_leaf.numel()
    idx = range(n)
    if max_coords is not None and max_coords < n:
        idx = torch.randperm(n, generator=generator)[:max_coords].tolist()
    flat = x_leaf.data.view(-1)
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f(x_leaf).item()
            flat[i] = orig - h
            fm = f(x_leaf).item()
            flat[i] = orig
            if not (torch.isfinite(torch.tensor(fp)) and torch.isfinite(torch.tensor(fm))):
                raise EvaluationError(f"non-finite value while perturbing coordinate {i}")
            numeric = (fp - fm) / (2 * h)
            a = analytic[i].item()
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        x_leaf.copy_(saved)
    x_leaf.requires_grad_(was)
    return worst

"""Small differentiable-op layer on top of torch autograd.

Everything runs in float64 on CPU. The ops here are the only ones the
networks and losses in this package are built from, so the gradient
checks in the test suite cover the whole training path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)


class TapeError(RuntimeError):
    """Raised when a backward pass is requested in an invalid state."""


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------

def conv2d_same(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                stride: int = 1) -> torch.Tensor:
    """Convolution with replicate-edge padding of width (k-1)/2.

    ``x`` is B x C_in x H x W, ``weight`` is C_out x C_in x k x k. With
    stride 1 the spatial size is preserved; stride s gives ceil(H/s).
    The operation is a cross-correlation, matching
    ``out[b,o,m,n] = sum_{c,p,q} w[o,c,p,q] * xpad[b,c,m+p,n+q] + bias[o]``.
    """
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"expected 4-d input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}")
    if x.shape[1] != c_in:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    if bias is not None and tuple(bias.shape) != (c_out,):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match {c_out} output channels")
    r = (kh - 1) // 2
    if r > 0:
        x = F.pad(x, (r, r, r, r), mode="replicate")
    return F.conv2d(x, weight, bias, stride=stride)


def conv2d_same_per_sample(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Apply a different kernel to every sample of a batch.

    ``x``: B x C x H x W, ``weight``: B x C x C x k x k, ``bias``: B x C.
    """
    b, c, h, w = x.shape
    if weight.shape[:3] != (b, c, c) or bias.shape != (b, c):
        raise ValueError(f"per-sample kernel shapes {tuple(weight.shape)}, {tuple(bias.shape)} "
                         f"do not match input {tuple(x.shape)}")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    r = (k - 1) // 2
    xp = F.pad(x, (r, r, r, r), mode="replicate") if r else x
    out = F.conv2d(xp.reshape(1, b * c, h + 2 * r, w + 2 * r),
                   weight.reshape(b * c, c, k, k), bias.reshape(b * c), groups=b)
    return out.reshape(b, c, h, w)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    return F.linear(x, weight, bias)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(2, 3))


def normalize_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-wise L2 normalization; zero rows are rejected."""
    norms = x.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("cannot normalize an all-zero row")
    return x / norms


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=dim)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

class Tape:
    """One forward/backward cycle.

    The autograd graph built while the tape is active is the recorded
    operation list; it may be replayed backward exactly once.
    """

    def __init__(self):
        self._used = False
        self._grad_ctx = None

    def __enter__(self) -> "Tape":
        self._grad_ctx = torch.enable_grad()
        self._grad_ctx.__enter__()
        return self

    def __exit__(self, *exc):
        self._grad_ctx.__exit__(*exc)
        return False

    @property
    def used(self) -> bool:
        return self._used

    def backward(self, loss: torch.Tensor) -> None:
        if self._used:
            raise TapeError("backward already ran on this tape")
        if loss.numel() != 1:
            raise TapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
        if not loss.requires_grad:
            raise TapeError("loss was not produced by tracked operations")
        self._used = True
        loss.backward()


def backward(tape: Tape, loss: torch.Tensor) -> None:
    tape.backward(loss)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


class Adam:
    """Bias-corrected Adam. ``step`` consumes and clears gradients."""

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.state.exp_avg = [torch.zeros_like(p) for p in self.params]
        self.state.exp_avg_sq = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ValueError(f"parameters {missing} have no gradient")
        st = self.state
        st.step += 1
        bc1 = 1.0 - st.beta1 ** st.step
        bc2 = 1.0 - st.beta2 ** st.step
        for p, m, v in zip(self.params, st.exp_avg, st.exp_avg_sq):
            g = p.grad
            m.mul_(st.beta1).add_(g, alpha=1.0 - st.beta1)
            v.mul_(st.beta2).addcmul_(g, g, value=1.0 - st.beta2)
            denom = (v / bc2).sqrt_().add_(st.eps)
            p.addcdiv_(m, denom, value=-st.lr / bc1)
        self.zero_grad()


def optimizer_step(opt: Adam) -> None:
    opt.step()

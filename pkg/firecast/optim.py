"""
Adam optimizer and finite-difference gradient checking.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import NonFiniteGradientError
from .layers import Parameter, Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""
    step: int = 0
    m: List[Tensor] = field(default_factory=list)
    v: List[Tensor] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(
            step=0,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names: Optional[Sequence[str]] = None) -> AdamState:
    """
    Apply one bias-corrected Adam update to params in place.

    Args:
        params: Parameter arrays, updated in place
        grads: Gradients, one per parameter
        state: Moment state; created with AdamState.zeros_like
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator epsilon
        names: Optional tensor names used in error messages

    Returns:
        The advanced state

    Raises:
        NonFiniteGradientError: If any gradient holds NaN or infinity; no
            parameter is touched in that case
    """
    for index, grad in enumerate(grads):
        if not np.all(np.isfinite(grad)):
            name = names[index] if names else f"#{index}"
            raise NonFiniteGradientError(f"Non-finite gradient in parameter {name}")

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for param, grad, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
    return state


class Adam:
    """
    Adam over a fixed list of named parameters.

    Buffers such as batch-norm running statistics are not parameters and are
    never updated here.
    """

    def __init__(self, named_parameters: Iterable[Tuple[str, Parameter]], lr: float = 5e-6,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        named = list(named_parameters)
        self.names = [name for name, _ in named]
        self.params = [param for _, param in named]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = AdamState.zeros_like([param.data for param in self.params])

    def step(self):
        adam_step(
            [param.data for param in self.params],
            [param.grad for param in self.params],
            self.state, self.lr, self.beta1, self.beta2, self.eps, names=self.names,
        )

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()


@dataclass
class GradcheckReport:
    """Outcome of a finite-difference gradient check."""
    max_rel_error: float
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> Optional[str]:
        """Name of the tensor with the largest relative error."""
        if not self.errors:
            return None
        return max(self.errors, key=lambda name: self.errors[name])


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(module: Any, inputs: Sequence[Tensor], tolerance: float = 1e-5,
              step: float = 1e-5, max_checks: Optional[int] = None,
              seed: int = 0) -> GradcheckReport:
    """
    Compare analytic gradients with central finite differences.

    The module must expose ``forward(*inputs) -> (out, cache)`` and
    ``backward(dout, cache)`` returning the input gradient (or a tuple of
    them, ``None`` for inputs that are not differentiated). The scalar objective is
    sum(out * R) with a fixed random projection R. Parameters are discovered
    through ``named_parameters()`` when present.

    Args:
        module: Object under test
        inputs: Forward inputs; checked when backward returns their gradient
        tolerance: Pass threshold on the maximum relative error
        step: Central-difference step
        max_checks: Entries sampled per tensor (all when None)
        seed: Seed for the projection and the sampling

    Returns:
        GradcheckReport with the per-tensor maximum relative error
    """
    rng = np.random.default_rng(seed)
    inputs = [np.array(x, copy=True) for x in inputs]
    named_params = list(module.named_parameters()) if hasattr(module, "named_parameters") else []
    if any(x.dtype != np.float64 for x in inputs) or any(
            p.data.dtype != np.float64 for _, p in named_params):
        logger.warning("gradcheck running below 64-bit precision; errors will be inflated")

    saved_buffers = (
        {name: buf.copy() for name, buf in module.named_buffers()}
        if hasattr(module, "named_buffers") else {}
    )

    out, cache = module.forward(*inputs)
    projection = rng.standard_normal(out.shape).astype(out.dtype)

    def objective() -> float:
        value, _ = module.forward(*inputs)
        return float(np.sum(value * projection))

    for _, param in named_params:
        param.zero_grad()
    input_grads = module.backward(projection, cache)
    if not isinstance(input_grads, (tuple, list)):
        input_grads = (input_grads,)

    targets: List[Tuple[str, Tensor, Tensor]] = [
        (name, param.data, param.grad.copy()) for name, param in named_params
    ]
    for index, (x, grad) in enumerate(zip(inputs, input_grads)):
        if grad is not None:
            targets.append((f"input.{index}", x, grad))

    report = GradcheckReport(max_rel_error=0.0, tolerance=tolerance)
    for name, tensor, analytic in targets:
        flat = tensor.reshape(-1)
        positions = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            positions = rng.choice(flat.size, size=max_checks, replace=False)
        worst = 0.0
        for position in positions:
            original = flat[position]
            flat[position] = original + step
            plus = objective()
            flat[position] = original - step
            minus = objective()
            flat[position] = original
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[position]), numeric))
        report.errors[name] = worst
        report.checked += len(positions)
        report.max_rel_error = max(report.max_rel_error, worst)

    if hasattr(module, "named_buffers"):
        for name, buf in module.named_buffers():
            buf[...] = saved_buffers[name]

    logger.debug(
        f"gradcheck checked {report.checked} entries, max relative error "
        f"{report.max_rel_error:.3g} (worst: {report.worst()})"
    )
    return report

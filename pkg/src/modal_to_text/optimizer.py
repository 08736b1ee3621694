from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from modal_to_text.tensor import Tensor
from modal_to_text.utility import Logger, LoggerApi, LogLevel, NumericError


@dataclass(kw_only=True)
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)

    def as_readable_dict(self):
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "step": self.step,
            "parameter_count": len(self.first_moments),
        }


def adam_step(*, parameters: Mapping[str, Tensor], state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update applied in place to every parameter in `parameters`, in mapping
    order. A missing gradient counts as zero. Raises NumericError before touching any parameter if a
    gradient holds NaN or infinity.
    """
    for name, parameter in parameters.items():
        if parameter.grad is not None and not np.all(np.isfinite(parameter.grad)):
            raise NumericError(f"non-finite gradient for parameter {name} (shape {parameter.shape}) at Adam step {state.step + 1}")

    state.step += 1
    first_correction = 1.0 - state.beta1**state.step
    second_correction = 1.0 - state.beta2**state.step
    for name, parameter in parameters.items():
        grad = parameter.grad if parameter.grad is not None else np.zeros_like(parameter.data)
        first_moment = state.first_moments.get(name)
        if first_moment is None:
            first_moment = state.first_moments[name] = np.zeros_like(parameter.data)
            state.second_moments[name] = np.zeros_like(parameter.data)
        second_moment = state.second_moments[name]
        if first_moment.shape != parameter.shape:
            raise NumericError(f"Adam moments for {name} have shape {first_moment.shape}, parameter has {parameter.shape}")
        first_moment *= state.beta1
        first_moment += (1.0 - state.beta1) * grad
        second_moment *= state.beta2
        second_moment += (1.0 - state.beta2) * grad * grad
        parameter.data -= state.learning_rate * (first_moment / first_correction) / (np.sqrt(second_moment / second_correction) + state.epsilon)
    return state


class Adam:
    def __init__(
        self,
        *,
        parameters: Mapping[str, Tensor],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        logger: Optional[LoggerApi] = None,
    ) -> None:
        self.parameters = dict(parameters)
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self.logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)

    @property
    def learning_rate(self) -> float:
        return self.state.learning_rate

    @learning_rate.setter
    def learning_rate(self, value: float) -> None:
        self.state.learning_rate = value

    def zero_grad(self) -> None:
        for parameter in self.parameters.values():
            parameter.zero_grad()

    def step(self) -> None:
        adam_step(parameters=self.parameters, state=self.state)
        self.logger.trace("adam step", self.state)


def learning_rate_at_epoch(*, base_learning_rate: float, epoch: int, epochs: int, milestones: Sequence[float]) -> float:
    # epoch is 1-based; each milestone passed divides the rate by 10
    progress = (epoch - 1) / epochs
    passed = sum(1 for x in milestones if progress >= x)
    return base_learning_rate / (10**passed)

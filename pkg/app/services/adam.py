import numpy as np

from app.schemas.sae import AdamConfig


class Adam:
    """Adam over a dict of named numpy parameters, updated in place."""

    def __init__(self, learning_rate: float, config: AdamConfig | None = None) -> None:
        config = config or AdamConfig()
        self.learning_rate = learning_rate
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.epsilon = config.epsilon
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        step_size = self.learning_rate / correction1

        for name, param in params.items():
            grad = grads[name]
            if name not in self.first_moment:
                self.first_moment[name] = np.zeros_like(param)
                self.second_moment[name] = np.zeros_like(param)
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (grad * grad)
            param -= step_size * m / (np.sqrt(v / correction2) + self.epsilon)

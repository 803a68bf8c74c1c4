"""Learning-rate schedule: linear warmup followed by cosine annealing."""

import math

from mcsam.exceptions import ConfigurationError


def lr_at_step(step, base_lr, warmup_steps, total_steps, min_lr=0.0):
    """Closed-form learning rate at an optimizer step.

    During warmup: base_lr * (step + 1) / warmup_steps, rising linearly to
    base_lr at the end of warmup. Afterwards: cosine from base_lr towards
    min_lr over the remaining steps.
    """
    if total_steps < 1:
        raise ConfigurationError("total_steps must be >= 1")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class WarmupCosineSchedule:
    """Sets param-group learning rates directly from the closed form."""

    def __init__(self, optimizer, base_lr, warmup_steps, total_steps, min_lr=0.0):
        self.optimizer = optimizer
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.min_lr = min_lr
        self.step_num = 0
        self.apply()

    def apply(self):
        lr = lr_at_step(self.step_num, self.base_lr, self.warmup_steps, self.total_steps, self.min_lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def step(self):
        self.step_num += 1
        return self.apply()

    def state_dict(self):
        return {"step_num": self.step_num}

    def load_state_dict(self, state):
        self.step_num = state["step_num"]
        self.apply()

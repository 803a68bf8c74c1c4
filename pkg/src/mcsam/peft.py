"""Parameter-efficient fine-tuning variants and the freeze-policy engine.

Provides the plain bottleneck adapter and LoRA wrappers compared against
Mona, plus the glob-pattern policy that partitions model parameters into
frozen and trainable sets and the accounting helpers built on top of it.
"""

import fnmatch
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from mcsam.exceptions import ConfigurationError


@dataclass
class AdapterConfig:
    bottleneck: int = 64

    def __post_init__(self):
        if self.bottleneck <= 0:
            raise ConfigurationError("adapter bottleneck must be positive")


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 4.0
    target_patterns: tuple = (
        "block*.attn.qkv",
        "block*.attn.proj",
        "block*.mlp.lin1",
        "block*.mlp.lin2",
        "patch_embed.proj",
        "neck.0",
        "neck.2",
    )

    def __post_init__(self):
        self.target_patterns = tuple(self.target_patterns)
        if self.rank <= 0:
            raise ConfigurationError("lora rank must be positive")


class BottleneckAdapter(nn.Module):
    """Plain down-GeLU-up adapter sharing Mona's insertion sites.

    The up-projection is zero-initialized, so the adapter delta is exactly
    zero before training; the caller adds the residual.
    """

    def __init__(self, dim: int, bottleneck: int = 64):
        super().__init__()
        if bottleneck >= dim:
            raise ConfigurationError(
                f"adapter bottleneck {bottleneck} must be < feature dim {dim}"
            )
        self.down = nn.Linear(dim, bottleneck)
        self.up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return self.up(F.gelu(self.down(x)))


class LoraLinear(nn.Module):
    """Low-rank additive update around a frozen linear layer.

    forward(x) = base(x) + (alpha / rank) * x @ A^T @ B^T with B zero at
    init, so the wrapped layer starts out identical to the base layer.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        fan_out, fan_in = base.weight.shape
        if rank >= min(fan_in, fan_out):
            raise ConfigurationError(
                f"lora rank {rank} must be < min(fan_in={fan_in}, fan_out={fan_out})"
            )
        self.base = base
        self.lora_a = nn.Parameter(torch.empty(rank, fan_in))
        self.lora_b = nn.Parameter(torch.zeros(fan_out, rank))
        nn.init.normal_(self.lora_a, std=1.0 / rank)
        self.scaling = alpha / rank

    def forward(self, x):
        return self.base(x) + F.linear(F.linear(x, self.lora_a), self.lora_b) * self.scaling

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_b @ self.lora_a)

    def merged_forward(self, x):
        return F.linear(x, self.merged_weight(), self.base.bias)


class LoraConv2d(nn.Module):
    """LoRA on a conv layer via low-rank factorization of the flattened
    (out_ch, in_ch*k*k) kernel matrix: a k x k conv to `rank` channels
    followed by a 1x1 conv back out."""

    def __init__(self, base: nn.Conv2d, rank: int, alpha: float):
        super().__init__()
        out_ch, in_ch = base.weight.shape[:2]
        kh, kw = base.kernel_size
        fan_in, fan_out = in_ch * kh * kw, out_ch
        if rank >= min(fan_in, fan_out):
            raise ConfigurationError(
                f"lora rank {rank} must be < min(fan_in={fan_in}, fan_out={fan_out})"
            )
        self.base = base
        self.lora_a = nn.Parameter(torch.empty(rank, in_ch, kh, kw))
        self.lora_b = nn.Parameter(torch.zeros(out_ch, rank, 1, 1))
        nn.init.normal_(self.lora_a, std=1.0 / rank)
        self.scaling = alpha / rank

    def forward(self, x):
        delta = F.conv2d(
            F.conv2d(x, self.lora_a, stride=self.base.stride, padding=self.base.padding),
            self.lora_b,
        )
        return self.base(x) + delta * self.scaling

    def merged_weight(self) -> torch.Tensor:
        # (out, r, 1, 1) x (r, in, kh, kw) -> (out, in, kh, kw)
        delta = torch.einsum("orxy,rikl->oikl", self.lora_b, self.lora_a)
        return self.base.weight + self.scaling * delta

    def merged_forward(self, x):
        return F.conv2d(
            x,
            self.merged_weight(),
            self.base.bias,
            stride=self.base.stride,
            padding=self.base.padding,
        )


def apply_lora(module: nn.Module, cfg: LoraConfig) -> list:
    """Wrap every linear/conv submodule whose qualified name matches a
    target pattern. Returns the list of wrapped names."""
    targets = []
    for name, sub in module.named_modules():
        if isinstance(sub, (nn.Linear, nn.Conv2d)) and any(
            fnmatch.fnmatchcase(name, pat) for pat in cfg.target_patterns
        ):
            targets.append(name)
    if not targets:
        raise ConfigurationError(
            f"no linear/conv layers match lora target patterns {cfg.target_patterns}"
        )
    for name in targets:
        parent = module
        *path, leaf = name.split(".")
        for part in path:
            parent = getattr(parent, part)
        base = getattr(parent, leaf)
        wrapper = (
            LoraLinear(base, cfg.rank, cfg.alpha)
            if isinstance(base, nn.Linear)
            else LoraConv2d(base, cfg.rank, cfg.alpha)
        )
        setattr(parent, leaf, wrapper)
    return targets


@dataclass
class FreezePolicy:
    """Name-glob partition of parameters; trainable patterns win."""

    frozen_patterns: list = field(default_factory=list)
    trainable_patterns: list = field(default_factory=list)

    @classmethod
    def from_text(cls, text: str) -> "FreezePolicy":
        """Parse the declarative policy format: one glob per line, prefixed
        with `+` (trainable) or `-` (frozen); `#` starts a comment."""
        policy = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line[0] not in "+-" or not line[1:].strip():
                raise ConfigurationError(f"bad policy line {lineno}: {raw!r}")
            pattern = line[1:].strip()
            (policy.trainable_patterns if line[0] == "+" else policy.frozen_patterns).append(pattern)
        return policy

    @classmethod
    def from_file(cls, path) -> "FreezePolicy":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = [f"- {p}" for p in self.frozen_patterns]
        lines += [f"+ {p}" for p in self.trainable_patterns]
        return "\n".join(lines) + "\n"

    def decide(self, name: str) -> bool:
        """True if `name` is trainable. Raises if no pattern matches."""
        trainable = any(fnmatch.fnmatchcase(name, p) for p in self.trainable_patterns)
        frozen = any(fnmatch.fnmatchcase(name, p) for p in self.frozen_patterns)
        if not (trainable or frozen):
            raise ConfigurationError(
                f"parameter {name!r} matches no policy pattern; policies must be total"
            )
        return trainable


MCSAM_POLICY = FreezePolicy(
    frozen_patterns=["encoder.*"],
    trainable_patterns=["encoder.*.mona*", "neck.*", "decoder.*"],
)

FULL_FINETUNE_POLICY = FreezePolicy(frozen_patterns=[], trainable_patterns=["*"])

ALL_FROZEN_POLICY = FreezePolicy(frozen_patterns=["*"], trainable_patterns=[])


@dataclass
class PolicyReport:
    trainable: list
    frozen: list
    trainable_params: int
    frozen_params: int
    trainable_bytes: int
    frozen_bytes: int

    @property
    def total_params(self):
        return self.trainable_params + self.frozen_params

    def summary(self) -> str:
        frac = self.trainable_params / max(self.total_params, 1)
        return (
            f"trainable: {len(self.trainable)} tensors / {self.trainable_params} params "
            f"({self.trainable_bytes} bytes)\n"
            f"frozen:    {len(self.frozen)} tensors / {self.frozen_params} params "
            f"({self.frozen_bytes} bytes)\n"
            f"trainable fraction: {frac:.6f}"
        )


def apply_policy(model: nn.Module, policy: FreezePolicy) -> PolicyReport:
    """Mark each parameter trainable or frozen per the policy and report
    counts and byte totals per group."""
    trainable, frozen = [], []
    t_params = f_params = t_bytes = f_bytes = 0
    for name, param in model.named_parameters():
        if policy.decide(name):
            param.requires_grad_(True)
            trainable.append(name)
            t_params += param.numel()
            t_bytes += param.numel() * param.element_size()
        else:
            param.requires_grad_(False)
            frozen.append(name)
            f_params += param.numel()
            f_bytes += param.numel() * param.element_size()
    return PolicyReport(trainable, frozen, t_params, f_params, t_bytes, f_bytes)


def trainable_fraction(model: nn.Module) -> float:
    """Trainable / total parameter count for a model with a policy applied."""
    total = trainable = 0
    for param in model.parameters():
        total += param.numel()
        if param.requires_grad:
            trainable += param.numel()
    if total == 0:
        return 0.0
    return trainable / total

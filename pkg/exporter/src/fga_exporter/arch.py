"""Reference architectures and their export plans.

An export plan lists, in forward order, the FGA-MF layer entries an
architecture maps to. Dropout modules carry no entry: they are identity at
inference, so folding them is simply not exporting them.
"""

from __future__ import annotations

import torch
import torch.nn as nn


class LeNet5(nn.Module):
    """Valid-padding LeNet-5 for 28x28 grayscale: conv6@5, pool, conv16@5,
    pool, then dense 120/84/10."""

    def __init__(self, dropout: float = 0.0):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 6, 5)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.pool = nn.MaxPool2d(2, 2)
        self.fc1 = nn.Linear(256, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, 10)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(torch.relu(self.conv1(x)))
        x = self.pool(torch.relu(self.conv2(x)))
        x = x.flatten(1)
        x = self.drop(torch.relu(self.fc1(x)))
        x = self.drop(torch.relu(self.fc2(x)))
        return self.fc3(x)


ARCHITECTURES = {
    "lenet5": lambda: LeNet5(dropout=0.0),
    "lenet5_dropout": lambda: LeNet5(dropout=0.25),
}


def build(arch_id: str) -> nn.Module:
    if arch_id not in ARCHITECTURES:
        raise ValueError(
            f"unknown architecture {arch_id!r}; known: {sorted(ARCHITECTURES)}"
        )
    return ARCHITECTURES[arch_id]()


def export_plan(arch_id: str, model: nn.Module) -> list[dict]:
    """Ordered FGA-MF layer entries with their weight tensors (or None)."""
    if arch_id not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch_id!r}")
    conv = lambda name, mod: {
        "name": name,
        "kind": "conv2d",
        "params": {
            "out_channels": mod.out_channels,
            "kernel": list(mod.kernel_size),
            "stride": 1,
            "padding": "valid",
        },
        "weights": mod.weight.detach().numpy(),
        "bias": mod.bias.detach().numpy(),
    }
    dense = lambda name, mod: {
        "name": name,
        "kind": "dense",
        "params": {"out_features": mod.out_features},
        "weights": mod.weight.detach().numpy(),
        "bias": mod.bias.detach().numpy(),
    }
    plain = lambda name, kind, params=None: {
        "name": name, "kind": kind, **({"params": params} if params else {}),
        "weights": None, "bias": None,
    }
    pool = {"window": [2, 2], "stride": 2}
    return [
        conv("conv1", model.conv1),
        plain("relu1", "relu"),
        plain("pool1", "maxpool2d", pool),
        conv("conv2", model.conv2),
        plain("relu2", "relu"),
        plain("pool2", "maxpool2d", pool),
        plain("flatten", "flatten"),
        dense("dense1", model.fc1),
        plain("relu3", "relu"),
        dense("dense2", model.fc2),
        plain("relu4", "relu"),
        dense("dense3", model.fc3),
        plain("softmax", "softmax"),
    ]


HIDDEN_DENSE_LAYERS = ["dense1", "dense2"]  # capture points for rule mining

"""3D-convolution stem followed by a per-frame ResNet18 trunk."""
from __future__ import annotations

import torch
from torch import nn


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                                            nn.BatchNorm2d(out_ch))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class VisualFrontend(nn.Module):
    """(B, T, 1, 112, 112) -> (B, T, d_model).

    Conv3d(5x7x7, stride 1x2x2) + max-pool takes frames to 28x28; four
    residual stages (strides 1, 2, 2, 2) end at 4x4 with ``8*channels``
    maps, which are average-pooled to 1x1 and projected.
    """

    def __init__(self, d_model: int, channels: int = 64):
        super().__init__()
        c = channels
        self.stem = nn.Sequential(
            nn.Conv3d(1, c, (5, 7, 7), (1, 2, 2), (2, 3, 3), bias=False),
            nn.BatchNorm3d(c),
            nn.ReLU(inplace=True),
            nn.MaxPool3d((1, 3, 3), (1, 2, 2), (0, 1, 1)),
        )
        widths = [c, 2 * c, 4 * c, 8 * c]
        stages, in_ch = [], c
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages += [BasicBlock(in_ch, w, stride), BasicBlock(w, w)]
            in_ch = w
        self.trunk = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_channels = in_ch
        self.proj = nn.Linear(in_ch, d_model)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        b, t = frames.shape[:2]
        x = self.stem(frames.transpose(1, 2))  # (B, C, T, H, W)
        c, h, w = x.shape[1], x.shape[3], x.shape[4]
        x = x.transpose(1, 2).reshape(b * t, c, h, w)
        x = self.pool(self.trunk(x)).flatten(1)
        return self.proj(x).view(b, t, -1)

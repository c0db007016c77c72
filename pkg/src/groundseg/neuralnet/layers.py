"""
Functional ops and the modules built from them.

Tensors are NCHW.  Every op is differentiable through torch autograd; the
functional forms take weights explicitly so they can be gradient-checked in
isolation.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check(cond: bool, msg: str):
    if not cond:
        raise ShapeMismatch(msg)


def linear_bn_relu(x, weight, bias=None, gamma=None, beta=None, running_mean=None,
                   running_var=None, training=True):
    """relu(batchnorm(x @ W.T + b)); batch statistics when training."""
    _check(x.shape[-1] == weight.shape[1], f"input dim {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    y = F.linear(x, weight, bias)
    if gamma is not None or running_mean is not None:
        y = F.batch_norm(y, running_mean, running_var, gamma, beta, training, BN_MOMENTUM, BN_EPS)
    return F.relu(y)


def conv2d(x, kernel, bias=None, stride=1, groups=1):
    """Cross-correlation with 'same' padding for odd kernels (none for 1x1)."""
    _check(x.shape[1] == kernel.shape[1] * groups,
           f"input channels {x.shape[1]} != kernel fan-in {kernel.shape[1]} x groups {groups}")
    return F.conv2d(x, kernel, bias, stride=stride, padding=kernel.shape[-1] // 2, groups=groups)


def dsc(x, depthwise, pointwise):
    """Per-channel 3x3 convolution followed by 1x1 channel mixing."""
    _check(depthwise.shape[0] == x.shape[1], "need one depthwise kernel per input channel")
    return conv2d(conv2d(x, depthwise, groups=x.shape[1]), pointwise)


def sigmoid(x):
    return torch.sigmoid(x)


def channel_gate(x, w1, b1, w2, b2):
    avg = x.mean(dim=(2, 3))
    mx = x.amax(dim=(2, 3))

    def mlp(v):
        return F.linear(F.relu(F.linear(v, w1, b1)), w2, b2)

    return torch.sigmoid(mlp(avg) + mlp(mx))[:, :, None, None]


def spatial_gate(x, kernel, bias):
    pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
    return torch.sigmoid(conv2d(pooled, kernel, bias))


def cbam(x, w1, b1, w2, b2, spatial_kernel, spatial_bias):
    """Channel attention then spatial attention, each a sigmoid multiplier."""
    _check(w1.shape[1] == x.shape[1] and w2.shape[0] == x.shape[1], "attention MLP does not match channels")
    x = x * channel_gate(x, w1, b1, w2, b2)
    return x * spatial_gate(x, spatial_kernel, spatial_bias)


def maxpool2(x):
    return F.max_pool2d(x, 2, 2)


def upsample_bilinear2(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class LinearBNReLU(nn.Module):
    """Shared per-point layer of the simplified PointNet."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.linear = nn.Linear(in_features, out_features)
        self.bn = nn.BatchNorm1d(out_features, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        return linear_bn_relu(x, self.linear.weight, self.linear.bias, self.bn.weight, self.bn.bias,
                              self.bn.running_mean, self.bn.running_var, self.training)


class DSConv(nn.Module):
    """Depthwise-separable convolution + batch norm + ReLU."""

    def __init__(self, cin: int, cout: int, kernel_size: int = 3):
        super().__init__()
        self.depthwise = nn.Parameter(torch.empty(cin, 1, kernel_size, kernel_size))
        self.pointwise = nn.Parameter(torch.empty(cout, cin, 1, 1))
        self.bn = nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM)
        nn.init.kaiming_uniform_(self.depthwise, a=5 ** 0.5)
        nn.init.kaiming_uniform_(self.pointwise, a=5 ** 0.5)

    def forward(self, x):
        return F.relu(self.bn(dsc(x, self.depthwise, self.pointwise)))


class DoubleDSC(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.first = DSConv(cin, cout)
        self.second = DSConv(cout, cout)

    def forward(self, x):
        return self.second(self.first(x))


class CBAM(nn.Module):
    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        if channels % reduction:
            raise ShapeMismatch(f"reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.spatial = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2)

    def forward(self, x):
        return cbam(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias,
                    self.spatial.weight, self.spatial.bias)

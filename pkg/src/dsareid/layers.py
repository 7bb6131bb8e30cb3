"""Residual building blocks with optional channel grouping.

With ``groups=n`` a block behaves as n independent branches laid side by side
along the channel axis; batch norm is per channel, so branches never mix.
"""
import torch.nn as nn
import torch.nn.functional as F


def conv_bn(cin, cout, k, stride=1, groups=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, groups=groups, bias=False),
        nn.BatchNorm2d(cout),
    )


class BasicBlock(nn.Module):
    """ResNet-18 style: two 3x3 convolutions plus (projected) identity."""

    def __init__(self, cin, cout, stride=1, groups=1):
        super().__init__()
        self.conv1 = conv_bn(cin, cout, 3, stride, groups)
        self.conv2 = conv_bn(cout, cout, 3, 1, groups)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = conv_bn(cin, cout, 1, stride, groups)

    def forward(self, x):
        out = F.relu(self.conv1(x))
        out = self.conv2(out)
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Bottleneck(nn.Module):
    """ResNet-50 style 1x1 -> 3x3 -> 1x1 block; stride sits on the 3x3."""

    def __init__(self, cin, width, cout, stride=1, groups=1):
        super().__init__()
        self.conv1 = conv_bn(cin, width, 1, 1, groups)
        self.conv2 = conv_bn(width, width, 3, stride, groups)
        self.conv3 = conv_bn(width, cout, 1, 1, groups)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = conv_bn(cin, cout, 1, stride, groups)

    def forward(self, x):
        out = F.relu(self.conv1(x))
        out = F.relu(self.conv2(out))
        out = self.conv3(out)
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


def basic_stage(cin, cout, blocks, stride, groups=1):
    layers = [BasicBlock(cin, cout, stride, groups)]
    layers += [BasicBlock(cout, cout, 1, groups) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


def bottleneck_stage(cin, width, cout, blocks, stride, groups=1):
    layers = [Bottleneck(cin, width, cout, stride, groups)]
    layers += [Bottleneck(cout, width, cout, 1, groups) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


def init_weights(module):
    """Fan-in scaled Gaussian for convolutions, unit/zero batch norm."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

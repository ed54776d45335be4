"""Convolutional and fully-connected residual building blocks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def init_weights(module: nn.Module, gain: float = 1.0) -> None:
    """Gaussian weights scaled by fan-in, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            nn.init.normal_(m.weight, 0.0, gain / math.sqrt(fan_in))
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ConvResBlock(nn.Module):
    """Two stride-1 3x3 convolutions with an identity shortcut, then an
    optional stride-2 convolution to ``cout`` channels."""

    def __init__(self, ch: int, cout: int | None = None, downsample: bool = True):
        super().__init__()
        self.conv_a = conv3x3(ch, ch)
        self.conv_b = conv3x3(ch, ch)
        self.down = conv3x3(ch, cout or ch, stride=2) if downsample else None

    def residual(self, x):
        return x + F.relu(self.conv_b(F.relu(self.conv_a(x))))

    def forward(self, x):
        x = self.residual(x)
        if self.down is not None:
            x = F.relu(self.down(x))
        return x


class FCResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc_a = nn.Linear(width, width)
        self.fc_b = nn.Linear(width, width)

    def forward(self, x):
        h = F.relu(self.fc_a(x))
        h = F.relu(self.fc_b(h))
        return x + h


class FCResNet(nn.Module):
    """in -> width, ``n_blocks`` residual blocks, width -> out (linear output)."""

    def __init__(self, n_in: int, n_out: int, width: int = 512, n_blocks: int = 4):
        super().__init__()
        self.fc_in = nn.Linear(n_in, width)
        self.blocks = nn.Sequential(*[FCResBlock(width) for _ in range(n_blocks)])
        self.fc_out = nn.Linear(width, n_out)
        init_weights(self)
        # Keep the residual trunk close to identity at init.
        for blk in self.blocks:
            blk.fc_b.weight.data.mul_(0.1)

    def forward(self, x):
        return self.fc_out(self.blocks(F.relu(self.fc_in(x))))


class ConvEncoder(nn.Module):
    """N residual blocks with linearly growing widths, flattened into a linear bottleneck."""

    def __init__(self, cin: int, hw: tuple[int, int], n_blocks: int, base: int, out_dim: int):
        super().__init__()
        self.conv_in = conv3x3(cin, base)
        blocks = []
        h, w = hw
        for i in range(n_blocks):
            last = i == n_blocks - 1
            blocks.append(ConvResBlock(base * (i + 1), base * (i + 2), downsample=not last))
            if not last:
                h, w = (h + 1) // 2, (w + 1) // 2
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(base * n_blocks * h * w, out_dim)
        init_weights(self)

    def forward(self, x):
        h = self.blocks(F.relu(self.conv_in(x)))
        return self.fc(h.flatten(1))


class UNetDecoder(nn.Module):
    """U-Net-style generator: N blocks down, N blocks up, skip connections
    between matching resolutions, tanh output."""

    def __init__(self, cin: int, n_blocks: int, base: int, cout: int = 3):
        super().__init__()
        self.n_blocks = n_blocks
        widths = [base * (i + 1) for i in range(n_blocks)]
        self.conv_in = conv3x3(cin, base)
        self.down = nn.ModuleList(
            ConvResBlock(widths[i], widths[i + 1] if i + 1 < n_blocks else None,
                         downsample=i + 1 < n_blocks)
            for i in range(n_blocks))
        self.up_conv = nn.ModuleList(conv3x3(widths[i + 1], widths[i]) for i in range(n_blocks - 1))
        self.merge = nn.ModuleList(conv3x3(2 * widths[i], widths[i]) for i in range(n_blocks - 1))
        self.up = nn.ModuleList(ConvResBlock(widths[i], downsample=False) for i in range(n_blocks - 1))
        self.conv_out = conv3x3(base, cout)
        init_weights(self)

    def forward(self, x):
        return self._body(F.relu(self.conv_in(x)))

    def forward_tiled(self, vec, extra):
        """Same as ``forward(cat(tile(vec), extra))`` without materializing the tiling.

        vec: B x A spatially constant channels; extra: B x E x H x W.
        """
        a = vec.shape[1]
        w_vec, w_extra = self.conv_in.weight[:, :a], self.conv_in.weight[:, a:]
        h = F.conv2d(extra, w_extra, self.conv_in.bias, padding=1)
        per_tap = torch.einsum("ockl,bc->bokl", w_vec, vec)
        rows = _tap_validity(extra.shape[-2], h.dtype)
        cols = _tap_validity(extra.shape[-1], h.dtype)
        h = h + torch.einsum("bokl,ki,lj->boij", per_tap, rows, cols)
        return self._body(F.relu(h))

    def _body(self, h):
        skips = []
        for i, blk in enumerate(self.down):
            if blk.down is None:
                h = blk(h)
            else:
                # skip taken after the residual part, before the stride-2 conv
                h = blk.residual(h)
                skips.append(h)
                h = F.relu(blk.down(h))
        for i in reversed(range(self.n_blocks - 1)):
            skip = skips[i]
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = F.relu(self.up_conv[i](h))
            h = F.relu(self.merge[i](torch.cat([h, skip], dim=1)))
            h = self.up[i](h)
        return torch.tanh(self.conv_out(h))


def _tap_validity(n: int, dtype) -> torch.Tensor:
    """3 x n indicator: tap k of a padded 3-wide kernel reads inside the signal at position i."""
    idx = torch.arange(n)
    return torch.stack([(idx + k - 1 >= 0) & (idx + k - 1 < n) for k in range(3)]).to(dtype)


class ImageCritic(nn.Module):
    """Strided conv discriminator producing one logit per image."""

    def __init__(self, hw: tuple[int, int], base: int, n_layers: int):
        super().__init__()
        layers = []
        cin = 3
        h, w = hw
        for i in range(n_layers):
            cout = base * (i + 1)
            layers += [conv3x3(cin, cout, stride=2), nn.LeakyReLU(0.2)]
            cin = cout
            h, w = (h + 1) // 2, (w + 1) // 2
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin * h * w, 1)
        init_weights(self)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1)).squeeze(1)


class FCCritic(nn.Module):
    """Four fully-connected layers ending in one unbounded score."""

    def __init__(self, n_in: int, width: int = 512):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(n_in, width), nn.ReLU(),
            nn.Linear(width, width), nn.ReLU(),
            nn.Linear(width, width), nn.ReLU(),
            nn.Linear(width, 1),
        )
        init_weights(self)

    def forward(self, x):
        return self.net(x).squeeze(-1)

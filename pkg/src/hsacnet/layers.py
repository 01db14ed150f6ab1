import torch.nn as nn


class CBR(nn.Sequential):
    """Conv(k x k, groups g, 'same' padding) -> BatchNorm -> ReLU."""

    def __init__(self, in_ch, out_ch, kernel_size=3, groups=1):
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"channels ({in_ch}->{out_ch}) not divisible by groups={groups}")
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd for 'same' padding")
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size, padding=(kernel_size - 1) // 2, groups=groups, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    @property
    def conv(self) -> nn.Conv2d:
        return self[0]

    @property
    def bn(self) -> nn.BatchNorm2d:
        return self[1]

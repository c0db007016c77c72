"""
Closed-form parameter and multiply-accumulate accounting for GSECnet.

Conventions: a conv / linear weight contributes one MAC per weight per output
position; batch norm (folded scale + shift) and attention gating count one MAC
per element; max-pool, ReLU and bilinear upsampling count none.  The pillar
encoder is counted over the dense pillar tensor (every grid cell x every point
slot), which is what a fixed-shape deployment executes.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class LayerCost:
    name: str
    part: str  # "encoder" | "unet"
    params: int
    macs: int


@dataclass(frozen=True)
class ComplexityReport:
    layers: tuple[LayerCost, ...]

    def total(self, part: str | None = None, what: str = "params") -> int:
        return sum(getattr(l, what) for l in self.layers if part is None or l.part == part)

    @property
    def params(self) -> int:
        return self.total()

    @property
    def macs(self) -> int:
        return self.total(what="macs")

    def table(self) -> str:
        rows = [f"{'layer':<22}{'part':<9}{'params':>10}{'MACs':>16}"]
        rows += [f"{l.name:<22}{l.part:<9}{l.params:>10,}{l.macs:>16,}" for l in self.layers]
        for part in ("encoder", "unet"):
            rows.append(f"{'total ' + part:<31}{self.total(part):>10,}{self.total(part, 'macs'):>16,}")
        rows.append(f"{'total':<31}{self.params:>10,}{self.macs:>16,}")
        rows.append(f"params {self.params / 1e6:.3f}M | encoder {self.total('encoder', 'macs') / 1e9:.3f} GMac"
                    f" | U-Net {self.total('unet', 'macs') / 1e9:.3f} GMac | combined {self.macs / 1e9:.3f} GMac")
        return "\n".join(rows)


def conv_cost(cin: int, cout: int, k: int, h: int, w: int, bias: bool = False, groups: int = 1):
    params = cout * (cin // groups) * k * k + (cout if bias else 0)
    return params, h * w * cout * (cin // groups) * k * k


def dsc_cost(cin: int, cout: int, h: int, w: int):
    """Depthwise 3x3 + pointwise 1x1 + batch norm."""
    p_dw, m_dw = conv_cost(cin, cin, 3, h, w, groups=cin)
    p_pw, m_pw = conv_cost(cin, cout, 1, h, w)
    return p_dw + p_pw + 2 * cout, m_dw + m_pw + h * w * cout


def cbam_cost(c: int, reduction: int, h: int, w: int, kernel: int = 7):
    hidden = c // reduction
    mlp_params = c * hidden + hidden + hidden * c + c
    p_sp, m_sp = conv_cost(2, 1, kernel, h, w, bias=True)
    macs = 2 * (c * hidden + hidden * c) + h * w * c + m_sp + h * w * c
    return mlp_params + p_sp, macs


def count_complexity(cfg, points_per_pillar: int = 64) -> ComplexityReport:
    """Per-layer costs for a ``ModelConfig``-like object."""
    H, W = cfg.grid
    c_in, C = cfg.in_features, cfg.encoder_channels
    layers = []
    slots = H * W * points_per_pillar
    layers.append(LayerCost("pointnet.linear", "encoder", c_in * C + C, slots * c_in * C))
    layers.append(LayerCost("pointnet.bn", "encoder", 2 * C, slots * C))

    def double(name, cin, cout, h, w):
        for i, (a, b) in enumerate(((cin, cout), (cout, cout))):
            p, m = dsc_cost(a, b, h, w)
            layers.append(LayerCost(f"{name}.dsc{i + 1}", "unet", p, m))

    c0, c1, c2, c3 = cfg.ladder
    levels = [("inc", C, c0, 1), ("down1", c0, c1, 2), ("down2", c1, c2, 4), ("down3", c2, c3, 8)]
    for name, a, b, s in levels:
        double(name, a, b, H // s, W // s)
        if cfg.attention:
            p, m = cbam_cost(b, cfg.reduction, H // s, W // s)
            layers.append(LayerCost(f"{name}.cbam", "unet", p, m))
    double("up1", c3 + c2, c2, H // 4, W // 4)
    double("up2", c2 + c1, c1, H // 2, W // 2)
    double("up3", c1 + c0, c0, H, W)
    p, m = conv_cost(c0, 1, 1, H, W, bias=True)
    layers.append(LayerCost("head", "unet", p, m))
    return ComplexityReport(tuple(layers))

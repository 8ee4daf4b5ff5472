"""Closed-form parameter and multiply-accumulate counts.

A MAC is one kernel multiply. Bias additions and batch-norm work are not
counted. Ratios are returned as :class:`fractions.Fraction` so identities can
be checked exactly.

Parameter convention ``"paper"`` (default): standard, pseudo-3D, transposed
and final 1x1x1 convolutions are bias-free; depthwise and pointwise
convolutions carry one bias per output channel; every batch norm contributes
``gamma`` and ``beta``; fully connected layers carry biases. Convention
``"all"`` additionally counts the batch-norm running mean and variance and
includes encoder-side layers in the model total.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

from .layers import canonical_flavor

CONVENTIONS = ("paper", "all")
_INT64_MAX = 2**63 - 1


def _check_args(*args: int) -> None:
    for a in args:
        if int(a) != a or a < 1:
            raise ValueError(f"cost arguments must be positive integers, got {args}")


def _checked(v: int) -> int:
    if v > _INT64_MAX:
        raise OverflowError(f"MAC count {v} exceeds the 64-bit range")
    return v


def macs_standard(k, c_in, c_out, l, w, h) -> int:
    _check_args(k, c_in, c_out, l, w, h)
    return _checked(k**3 * c_in * c_out * l * w * h)


def macs_depthwise(k, c_in, l, w, h) -> int:
    _check_args(k, c_in, l, w, h)
    return _checked(k**3 * c_in * l * w * h)


def macs_pointwise(c_in, c_out, l, w, h) -> int:
    _check_args(c_in, c_out, l, w, h)
    return _checked(c_in * c_out * l * w * h)


def macs_depthwise_separable(k, c_in, c_out, l, w, h) -> int:
    return _checked(macs_depthwise(k, c_in, l, w, h) + macs_pointwise(c_in, c_out, l, w, h))


def macs_pseudo(k, c_in, c_out, l, w, h) -> int:
    _check_args(k, c_in, c_out, l, w, h)
    vol = l * w * h
    return _checked(k * k * c_in * c_in * vol + k * c_in * c_out * vol)


def macs(flavor: str, k, c_in, c_out, l, w, h) -> int:
    flavor = canonical_flavor(flavor)
    if flavor == "standard":
        return macs_standard(k, c_in, c_out, l, w, h)
    if flavor == "pseudo":
        return macs_pseudo(k, c_in, c_out, l, w, h)
    return macs_depthwise_separable(k, c_in, c_out, l, w, h)


def reduction_ratio_dw(k: int, c_out: int) -> Fraction:
    """Depthwise-separable over standard cost: 1/c_out + 1/k^3."""
    _check_args(k, c_out)
    return Fraction(1, c_out) + Fraction(1, k**3)


def ratio_dw_vs_pseudo(k: int, c_in: int, c_out: int) -> Fraction:
    """Depthwise-separable over pseudo-3D cost: (k^3 + c_out) / (k^2 c_in + k c_out)."""
    _check_args(k, c_in, c_out)
    return Fraction(k**3 + c_out, k * k * c_in + k * c_out)


def ratio_dw_vs_pseudo_approx(k: int, c_in: int) -> Fraction:
    """The large-channel approximation k / c_in of :func:`ratio_dw_vs_pseudo`."""
    _check_args(k, c_in)
    return Fraction(k, c_in)


# ---------------------------------------------------------- parameter counting

def bn_params(channels: int, convention: str = "paper") -> int:
    return (4 if convention == "all" else 2) * channels


def unit_params(flavor: str, k: int, c_in: int, c_out: int, *, batchnorm: bool = True,
                convention: str = "paper") -> int:
    """Parameters of one conv unit of the given flavor, normalization included."""
    flavor = canonical_flavor(flavor)
    bn = (lambda c: bn_params(c, convention)) if batchnorm else (lambda c: 0)
    if flavor == "standard":
        return k**3 * c_in * c_out + bn(c_out)
    if flavor == "pseudo":
        return k * k * c_in * c_in + bn(c_in) + k * c_in * c_out + bn(c_out)
    return (k**3 * c_in + c_in) + bn(c_in) + (c_in * c_out + c_out) + bn(c_out)


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    flavor: str = "standard"
    dims: tuple = ()
    section: str = "body"


@dataclass
class CostReport:
    model: str
    flavor: str
    layers: list[LayerCost] = field(default_factory=list)
    convention: str = "paper"
    baseline: "CostReport | None" = None

    @property
    def conv_params(self) -> int:
        return sum(c.params for c in self.layers if c.section == "conv")

    @property
    def total_params(self) -> int:
        """Model total; encoder-side layers only count under the ``all`` convention."""
        return sum(c.params for c in self.layers
                   if c.section != "encoder" or self.convention == "all")

    @property
    def all_params(self) -> int:
        return sum(c.params for c in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(c.macs for c in self.layers)

    @property
    def conv_macs(self) -> int:
        return sum(c.macs for c in self.layers if c.section == "conv")

    def conv_reduction(self) -> Fraction | None:
        if self.baseline is None:
            return None
        return 1 - Fraction(self.conv_params, self.baseline.conv_params)

    def total_reduction(self) -> Fraction | None:
        if self.baseline is None:
            return None
        return 1 - Fraction(self.total_params, self.baseline.total_params)

    # ----------------------------------------------------------- rendering

    def summary_row(self, label: str | None = None) -> dict:
        cr, tr = self.conv_reduction(), self.total_reduction()
        return {
            "method": label or self.model,
            "conv_params": self.conv_params,
            "conv_reduced_by": format_percent(cr),
            "total_params": self.total_params,
            "total_reduced_by": format_percent(tr),
        }

    def layer_rows(self) -> list[dict]:
        return [{"layer": c.name, "kind": c.kind, "section": c.section, "params": c.params,
                 "macs": c.macs} for c in self.layers]


def format_percent(frac: Fraction | None) -> str:
    if frac is None:
        return ""
    # round half up on the exact rational, independent of float rounding
    hundredths = (frac * 10000 * 2 + 1) // 2
    sign = "-" if hundredths < 0 else ""
    hundredths = abs(hundredths)
    return f"{sign}{hundredths // 100}.{hundredths % 100:02d}%"


SUMMARY_HEADERS = {
    "method": "method",
    "conv_params": "# param in conv layers",
    "conv_reduced_by": "reduced by",
    "total_params": "# param total",
    "total_reduced_by": "reduced by",
}


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def to_markdown(rows: list[dict], headers: dict | None = None) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    titles = [(headers or {}).get(k, k) for k in keys]

    def cell(v):
        return f"{v:,}" if isinstance(v, int) else str(v)

    body = [[cell(r[k]) for k in keys] for r in rows]
    widths = [max(len(t), *(len(b[i]) for b in body)) for i, t in enumerate(titles)]
    numeric = [all(isinstance(r[k], int) or str(r[k]).endswith("%") or r[k] == "" for r in rows)
               for k in keys]

    def line(cells):
        out = []
        for c, wd, num in zip(cells, widths, numeric):
            out.append(c.rjust(wd) if num else c.ljust(wd))
        return "| " + " | ".join(out) + " |"

    sep = "|" + "|".join(("-" * (wd + 1) + ":") if num else ("-" * (wd + 2))
                         for wd, num in zip(widths, numeric)) + "|"
    return "\n".join([line(titles), sep] + [line(b) for b in body])


def _voxels(shape) -> int:
    n = 1
    for s in shape[1:]:
        n *= s
    return n


def param_count(ls, flavor: str = "standard", convention: str = "paper") -> int:
    """Trainable parameters of one resolved layer spec (see :mod:`volt3d.netgraph`)."""
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}")
    kind = ls.kind
    cin = ls.in_shape[0] if ls.in_shape else None
    if kind == "fc":
        return cin * ls.out + (ls.out if ls.bias else 0)
    if kind == "bn":
        return bn_params(cin, convention)
    if kind in ("relu", "reshape", "flatten", "maxpool"):
        return 0
    if kind == "convtranspose":
        return cin * ls.out * ls.k**3
    if kind == "conv":
        return unit_params(flavor, ls.k, cin, ls.out, convention=convention)
    if kind == "block":
        return ls.units * unit_params(flavor, ls.k, cin, cin, convention=convention)
    if kind == "conv1x1":
        return cin * ls.out + (ls.out if ls.bias else 0)
    raise ValueError(f"unknown layer type {kind!r}")


def layer_macs(ls, flavor: str = "standard") -> int:
    kind = ls.kind
    if kind == "fc":
        return ls.in_shape[0] * ls.out
    if kind == "convtranspose":
        return ls.in_shape[0] * ls.out * ls.k**3 * _voxels(ls.in_shape)
    if kind in ("conv", "block"):
        cin, cout = ls.in_shape[0], ls.out_shape[0]
        d, h, w = ls.out_shape[1:]
        per = macs(flavor, ls.k, cin, cout, d, h, w)
        return per * (ls.units if kind == "block" else 1)
    if kind == "conv1x1":
        return ls.in_shape[0] * ls.out * _voxels(ls.in_shape)
    return 0


def model_cost(spec, convention: str = "paper", baseline: CostReport | None = None) -> CostReport:
    report = CostReport(spec.name, spec.flavor, convention=convention, baseline=baseline)
    for i, ls in enumerate(spec.layers):
        cin = ls.in_shape[0] if ls.in_shape else 0
        cout = ls.out_shape[0] if ls.out_shape else 0
        report.layers.append(LayerCost(
            name=f"{i:02d}_{ls.kind}", kind=ls.kind,
            params=param_count(ls, spec.flavor, convention),
            macs=layer_macs(ls, spec.flavor), flavor=spec.flavor,
            dims=(ls.k, cin, cout) + tuple(ls.out_shape[1:]),
            section=ls.section))
    return report

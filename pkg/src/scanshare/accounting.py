"""Parameter and FLOP accounting per architecture module, and sharing reports.

Costs are grouped into the five modules of the architecture:

==================== =========================================
Pixel Encoder        ``encoder``
Pixel Decoder        ``decoder_shared`` + ``decoder_<branch>``
Foveation            ``foveation_<branch>`` + ``memory_<branch>``
Aggregation          ``aggregation_<branch>``
Fixation Prediction  ``heads_<branch>``
==================== =========================================

A sharing report expresses what a split saves when the visual-search
branch reuses the free-viewing pixel decoder: the shared decoder's share
of the trainable parameters and of the trainable-path FLOPs (everything
except the frozen encoder).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import CENTER, VISUAL_SEARCH, TaskSpec
from .errors import ConfigurationError, FormatError, InputError, UsageError
from .model import PARTITIONS, SPLIT_NAMES, ModelConfig, ScanpathModel, SplitConfig, build_model, partition_of

MODULES = ("Pixel Encoder", "Pixel Decoder", "Foveation", "Aggregation", "Fixation Prediction")
TRAINABLE_MODULES = MODULES[1:]

# published per-module costs of the full-scale model: (million parameters, GFLOPS)
PUBLISHED_TABLE2 = {
    "Pixel Encoder": ("23.455", "13.418"),
    "Pixel Decoder": ("6.036", "22.997"),
    "Foveation": ("3.063", "1.545"),
    "Aggregation": ("9.489", "0.376"),
    "Fixation Prediction": ("0.740", "0.013"),
}
# published reductions per split: (trainable parameters %, FLOPs %)
PUBLISHED_TABLE3 = {
    "LS": ("31.23", "92.29"),
    "ES51": ("24.05", "52.48"),
    "ES42": ("20.26", "39.69"),
    "ES33": ("16.47", "26.91"),
    "ES24": ("12.68", "14.12"),
    "ES15": ("8.89", "1.34"),
}


def module_partitions(branch: str = VISUAL_SEARCH) -> dict[str, list[str]]:
    return {
        "Pixel Encoder": ["encoder"],
        "Pixel Decoder": ["decoder_shared", f"decoder_{branch}"],
        "Foveation": [f"foveation_{branch}", f"memory_{branch}"],
        "Aggregation": [f"aggregation_{branch}"],
        "Fixation Prediction": [f"heads_{branch}"],
    }


def count_parameters(model: ScanpathModel, partitions: Sequence[str] | None = None) -> int:
    """Exact number of scalars in the selected partitions (all if None)."""
    if partitions is not None:
        unknown = sorted(set(partitions) - set(PARTITIONS))
        if unknown:
            raise UsageError(f"unknown partition(s) {unknown}; valid: {', '.join(PARTITIONS)}")
        partitions = set(partitions)
    return sum(int(p.data.size) for n, p in model.params.items()
               if partitions is None or partition_of(n) in partitions)


def estimate_flops(model: ScanpathModel, input_size: tuple[int, int], branch: str = VISUAL_SEARCH,
                   partitions: Sequence[str] | None = None) -> dict[str, int]:
    """FLOPs per partition for one forward pass of one branch.

    The pass encodes a blank ``input_size`` = (width, height) image, decodes
    the pyramid and predicts the first fixation from the centre start, so
    token-dependent stages are counted at prefix length one.
    """
    width, height = input_size
    if width % 32 or height % 32 or width <= 0 or height <= 0:
        raise InputError(f"input size {input_size} must be positive multiples of 32")
    task = TaskSpec(branch) if branch != VISUAL_SEARCH else TaskSpec.search(1)
    image = np.zeros((3, height, width), dtype=ad.default_dtype())
    with ad.no_grad(), ad.FlopCounter() as counter:
        pyramid = model.pyramid(image, branch)
        model.predict(pyramid, [CENTER], task)
    flops = dict(counter.by_scope)
    stray = flops.pop("other", 0)
    if stray:
        raise RuntimeError(f"{stray} FLOPs recorded outside any component scope")
    if partitions is not None:
        flops = {k: v for k, v in flops.items() if k in set(partitions)}
    return flops


@dataclass
class ComponentCost:
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    components: list[ComponentCost]
    input_size: tuple[int, int]
    branch: str

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.components)

    @property
    def total_flops(self) -> int:
        return sum(c.flops for c in self.components)

    def get(self, name: str) -> ComponentCost:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Module", "Parameters", "FLOPs", "Params (M)", "GFLOPS"])
        for c in self.components + [ComponentCost("Total", self.total_params, self.total_flops)]:
            w.writerow([c.name, c.params, c.flops, f"{c.params / 1e6:.3f}", f"{c.flops / 1e9:.3f}"])
        return buf.getvalue()


def cost_report(model: ScanpathModel, input_size: tuple[int, int], branch: str = VISUAL_SEARCH) -> CostReport:
    """Per-module parameters and FLOPs of one branch, grouped like the published cost table."""
    flops = estimate_flops(model, input_size, branch)
    comps = []
    for name, parts in module_partitions(branch).items():
        comps.append(ComponentCost(name, count_parameters(model, parts), sum(flops.get(p, 0) for p in parts)))
    return CostReport(comps, tuple(input_size), branch)


# --------------------------------------------------------------------------
# sharing


@dataclass
class SharingRow:
    split: str
    shared_params: float
    shared_flops: float
    params_pct: str
    flops_pct: str


@dataclass
class SharingReport:
    trainable_params: float
    trainable_flops: float
    rows: list[SharingRow] = field(default_factory=list)

    def row(self, split: str) -> SharingRow:
        for r in self.rows:
            if r.split == split:
                return r
        raise KeyError(split)

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Split", "Reduced trainable params (%)", "Shared FLOPs (%)"])
        for r in self.rows:
            w.writerow([r.split, r.params_pct, r.flops_pct])
        return buf.getvalue()


def percent(part, whole) -> str:
    """``100 * part / whole`` rounded half-up to two decimals, as text."""
    part, whole = Decimal(str(part)), Decimal(str(whole))
    if whole == 0:
        raise InputError("cannot express a share of a zero total")
    if part < 0 or part > whole:
        raise InputError(f"shared cost {part} must lie in [0, {whole}]")
    return str((100 * part / whole).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def sharing_report(trainable_params, trainable_flops, shared: Mapping[str, tuple]) -> SharingReport:
    """Percentages of trainable parameters and trainable-path FLOPs saved per split.

    ``shared`` maps split name to (shared parameters, shared FLOPs).
    """
    report = SharingReport(trainable_params, trainable_flops)
    for split, (sp, sf) in shared.items():
        report.rows.append(SharingRow(split, sp, sf, percent(sp, trainable_params), percent(sf, trainable_flops)))
    return report


@dataclass
class PublishedTotals:
    params_total: Decimal
    flops_total: Decimal
    params_trainable: Decimal
    flops_trainable: Decimal


def table_totals(table: Mapping[str, tuple]) -> PublishedTotals:
    """Whole-model and trainable-path totals (encoder excluded) from per-module costs."""
    p = {k: Decimal(str(v[0])) for k, v in table.items()}
    f = {k: Decimal(str(v[1])) for k, v in table.items()}
    return PublishedTotals(sum(p.values()), sum(f.values()),
                           sum(p[m] for m in TRAINABLE_MODULES), sum(f[m] for m in TRAINABLE_MODULES))


def late_split_from_table(table: Mapping[str, tuple]) -> SharingReport:
    """LS reduction implied by a per-module cost table: the whole decoder is shared."""
    totals = table_totals(table)
    dec = table["Pixel Decoder"]
    return sharing_report(totals.params_trainable, totals.flops_trainable, {"LS": (Decimal(dec[0]), Decimal(dec[1]))})


def format_table2(table: Mapping[str, tuple] = PUBLISHED_TABLE2) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Module", "Params (M)", "GFLOPS"])
    for name in MODULES:
        w.writerow([name, *table[name]])
    return buf.getvalue()


def parse_table2(text: str) -> dict[str, tuple[str, str]]:
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    if not rows or [c.strip() for c in rows[0]] != ["Module", "Params (M)", "GFLOPS"]:
        raise FormatError("cost table must start with header 'Module,Params (M),GFLOPS'")
    table = {}
    for i, row in enumerate(rows[1:], 2):
        if len(row) != 3:
            raise FormatError(f"cost table line {i}: expected 3 fields, got {len(row)}")
        name, params, flops = (c.strip() for c in row)
        try:
            if Decimal(params) < 0 or Decimal(flops) < 0:
                raise FormatError(f"cost table line {i}: negative cost")
        except InvalidOperation as exc:
            raise FormatError(f"cost table line {i}: non-numeric cost") from exc
        table[name] = (params, flops)
    missing = [m for m in MODULES if m not in table]
    if missing:
        raise FormatError(f"cost table lacks module(s) {missing}")
    return table


def load_table2(path) -> dict[str, tuple[str, str]]:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read cost table {path}: {exc}") from exc
    return parse_table2(text)


def split_sharing_report(cfg: ModelConfig, input_size: tuple[int, int], seed: int = 0) -> SharingReport:
    """Measured sharing percentages of the given architecture for every split.

    The trainable path is the whole visual-search branch minus the encoder,
    identical across splits; the shared part is ``decoder_shared``.
    """
    shared, totals = {}, None
    for s in range(cfg.decoder_layers, 0, -1):
        model = build_model(cfg, SplitConfig(s, cfg.decoder_layers), seed)
        report = cost_report(model, input_size, VISUAL_SEARCH)
        flops = estimate_flops(model, input_size, VISUAL_SEARCH)
        path = [c for c in report.components if c.name in TRAINABLE_MODULES]
        t = (sum(c.params for c in path), sum(c.flops for c in path))
        if totals is not None and t != totals:
            raise ConfigurationError("trainable-path cost differs between splits")
        totals = t
        shared[SplitConfig(s, cfg.decoder_layers).name] = (count_parameters(model, ["decoder_shared"]),
                                                           flops.get("decoder_shared", 0))
    return sharing_report(totals[0], totals[1], shared)


def trainable_count(model: ScanpathModel, stage: str) -> int:
    from .training import trainable_names
    return sum(int(model.params[n].data.size) for n in trainable_names(model, stage))

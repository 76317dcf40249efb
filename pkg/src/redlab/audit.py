"""Closed-form trainable-parameter counts for published host architectures.

Counts are exact integers.  Rounded "million units" (millions with the number
of decimals the published table uses) are compared to the printed figures,
and any disagreement is reported rather than smoothed over.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .peft import PeftSpec

# Convention notes printed beside counts whose published value depends on them.
CONVENTIONS = {
    "red": "one scaling + one bias vector (d each) per edited site; default site = FFN output of every block",
    "lora": "W_down[d,r] + W_up[r,d] on W_q and W_v of every block",
    "adapter": "bottleneck with biases (d*r + r + r*d + d) after attention and FFN of every block",
    "adapter_ffn": "bottleneck with biases (d*r + r + r*d + d) after FFN of every block",
    "bitfit": "block biases (q,k,v,o,ffn in/out) + both LN biases; no embedding or head biases",
    "full_ft": "every base parameter (published total for presets)",
    "prefix": "prefix_len * d * 2 (key + value) per block",
    "prompt": "prompt_len * d at the embedding layer",
    "ft_top2": "all weights and biases of the top two blocks (12d^2 + 13d each for d_ff = 4d)",
}


class AuditError(ValueError):
    """Bad host descriptor or method for counting."""


@dataclass
class HostDescriptor:
    name: str
    n_layers: int
    d_model: int
    d_ff: int
    decoder_layers: int = 0
    total_params: int | None = None
    # Used only for the full-FT count of toy hosts built from a TransformerConfig.
    vocab_size: int | None = None
    max_seq_len: int | None = None
    n_classes: int | None = None

    def __post_init__(self):
        for f in ("n_layers", "d_model", "d_ff"):
            v = getattr(self, f)
            if not isinstance(v, int) or v < 1:
                raise AuditError(f"host {self.name!r}: {f} must be a positive int, got {v!r}")
        if self.decoder_layers < 0:
            raise AuditError(f"host {self.name!r}: decoder_layers must be >= 0")

    @property
    def n_blocks(self) -> int:
        return self.n_layers + self.decoder_layers

    @classmethod
    def from_config(cls, cfg, name: str = "toy") -> "HostDescriptor":
        return cls(name=name, n_layers=cfg.n_layers, d_model=cfg.d_model, d_ff=cfg.d_ff,
                   vocab_size=cfg.vocab_size, max_seq_len=cfg.max_seq_len, n_classes=cfg.n_classes)

    @classmethod
    def from_dict(cls, d: dict) -> "HostDescriptor":
        try:
            return cls(**d)
        except TypeError as exc:
            raise AuditError(f"bad host descriptor: {exc}") from None


PRESETS = {
    "roberta_base": HostDescriptor("roberta_base", 12, 768, 3072, total_params=125_000_000),
    "roberta_large": HostDescriptor("roberta_large", 24, 1024, 4096, total_params=355_000_000),
    "gpt2_medium": HostDescriptor("gpt2_medium", 24, 1024, 4096, total_params=355_000_000),
    "gpt2_large": HostDescriptor("gpt2_large", 36, 1280, 5120, total_params=774_000_000),
    "t5_base": HostDescriptor("t5_base", 12, 768, 3072, decoder_layers=12, total_params=220_000_000),
    "llama2_7b": HostDescriptor("llama2_7b", 32, 4096, 11008, total_params=6_739_000_000),
}


def _block_params(host: HostDescriptor) -> int:
    d, f = host.d_model, host.d_ff
    return 4 * d * d + 4 * d + d * f + f + f * d + d + 4 * d


def _full_count(host: HostDescriptor) -> int:
    if host.total_params is not None:
        return host.total_params
    if None in (host.vocab_size, host.max_seq_len, host.n_classes):
        raise AuditError(f"host {host.name!r} has no total_params and no toy dimensions")
    d = host.d_model
    return ((host.vocab_size + host.max_seq_len) * d + host.n_blocks * _block_params(host)
            + d * host.n_classes + host.n_classes)


def count(spec: PeftSpec, host: HostDescriptor) -> int:
    """Exact trainable-parameter count of ``spec`` on ``host``."""
    d, blocks = host.d_model, host.n_blocks
    m = spec.method
    if m == "red":
        per_site = d if spec.component_mask != "both" else 2 * d
        return per_site * len(spec.sites) * blocks
    if m == "lora":
        return 2 * (d * spec.rank + spec.rank * d) * blocks
    if m in ("adapter", "adapter_ffn"):
        return len(spec.sites) * blocks * (d * spec.rank + spec.rank + spec.rank * d + d)
    if m == "bitfit":
        return blocks * (7 * d + host.d_ff)
    if m == "full_ft":
        return _full_count(host)
    if m == "prefix":
        return spec.prefix_len * d * 2 * blocks
    if m == "prompt":
        return spec.prefix_len * d
    if m == "ft_top2":
        return 2 * _block_params(host)
    raise AuditError(f"cannot count method {m!r}")


def million_units(n: int, decimals: int | None = None) -> str:
    """Millions rounded half-up; default precision mimics the published tables."""
    millions = Decimal(n) / Decimal(1_000_000)
    if decimals is None:
        decimals = 2 if n < 100_000 else (1 if n < 100_000_000 else 0)
    q = Decimal(1).scaleb(-decimals)
    return str(millions.quantize(q, rounding=ROUND_HALF_UP))


def _decimals_of(printed: str) -> int:
    return len(printed.split(".")[1]) if "." in printed else 0


def reduction_factor(a: PeftSpec, b: PeftSpec, host: HostDescriptor) -> float:
    num, den = count(a, host), count(b, host)
    if den == 0:
        raise AuditError(f"{b.label()} has zero trainable parameters on {host.name}")
    return num / den


@dataclass
class PublishedRow:
    host: str
    spec: PeftSpec
    printed: str  # value in millions as printed
    source: str


def _s(method, **kw):
    return PeftSpec(method=method, **kw)


PUBLISHED_ROWS = [
    PublishedRow("roberta_base", _s("full_ft"), "125", "GLUE RoBERTa table"),
    PublishedRow("roberta_base", _s("adapter", rank=8), "0.4", "GLUE RoBERTa table"),
    PublishedRow("roberta_base", _s("lora", rank=8, alpha=8), "0.3", "GLUE RoBERTa table"),
    PublishedRow("roberta_base", _s("adapter_ffn", rank=16), "0.3", "GLUE RoBERTa table"),
    PublishedRow("roberta_base", _s("bitfit"), "0.1", "GLUE RoBERTa table"),
    PublishedRow("roberta_base", _s("red"), "0.02", "GLUE RoBERTa table"),
    PublishedRow("roberta_large", _s("full_ft"), "355", "GLUE RoBERTa table"),
    PublishedRow("roberta_large", _s("adapter", rank=8), "0.9", "GLUE RoBERTa table"),
    PublishedRow("roberta_large", _s("lora", rank=8, alpha=16), "0.8", "GLUE RoBERTa table"),
    PublishedRow("roberta_large", _s("adapter_ffn", rank=16), "0.8", "GLUE RoBERTa table"),
    PublishedRow("roberta_large", _s("red"), "0.05", "GLUE RoBERTa table"),
    PublishedRow("gpt2_medium", _s("full_ft"), "355", "E2E GPT-2 table"),
    PublishedRow("gpt2_medium", _s("ft_top2"), "25.2", "E2E GPT-2 table"),
    PublishedRow("gpt2_medium", _s("adapter", rank=8), "0.9", "E2E GPT-2 table"),
    PublishedRow("gpt2_medium", _s("lora", rank=8, alpha=32), "0.8", "E2E GPT-2 table"),
    PublishedRow("gpt2_medium", _s("adapter_ffn", rank=16), "0.8", "E2E GPT-2 table"),
    PublishedRow("gpt2_medium", _s("prefix", prefix_len=16), "0.8", "E2E GPT-2 table"),
    PublishedRow("gpt2_medium", _s("red"), "0.05", "E2E GPT-2 table"),
    PublishedRow("gpt2_medium", _s("adapter", rank=1), "0.25", "rank-1 table"),
    PublishedRow("gpt2_medium", _s("adapter_ffn", rank=1), "0.07", "rank-1 table"),
    PublishedRow("gpt2_medium", _s("lora", rank=1, alpha=1), "0.1", "rank-1 table"),
    PublishedRow("gpt2_large", _s("full_ft"), "774", "E2E GPT-2 table"),
    PublishedRow("gpt2_large", _s("adapter", rank=8), "1.8", "E2E GPT-2 table"),
    PublishedRow("gpt2_large", _s("lora", rank=8, alpha=32), "1.5", "E2E GPT-2 table"),
    PublishedRow("gpt2_large", _s("adapter_ffn", rank=16), "1.5", "E2E GPT-2 table"),
    PublishedRow("gpt2_large", _s("prefix", prefix_len=16), "1.5", "E2E GPT-2 table"),
    PublishedRow("gpt2_large", _s("red"), "0.09", "E2E GPT-2 table"),
    PublishedRow("t5_base", _s("full_ft"), "220", "GLUE T5 table"),
    PublishedRow("t5_base", _s("prompt", prefix_len=100), "0.08", "GLUE T5 table"),
    PublishedRow("t5_base", _s("red"), "0.04", "GLUE T5 table"),
    PublishedRow("llama2_7b", _s("full_ft"), "6739", "AlpacaEval table"),
    PublishedRow("llama2_7b", _s("lora", rank=16, alpha=16), "8.39", "AlpacaEval table"),
    PublishedRow("llama2_7b", _s("red"), "0.26", "AlpacaEval table"),
]


@dataclass
class AuditRow:
    host: str
    method: str
    exact: int
    units: str
    published: str | None = None
    delta: int | None = None
    status: str = ""
    convention: str = ""
    source: str = ""
    alt_exact: int | None = None
    alt_status: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


# Secondary conventions, reported next to the primary count and never replacing it.
# Bottleneck adapters are often trained together with the block's two layer norms.
ALT_CONVENTIONS = {
    "adapter": ("adapter modules + both layer norms of every block (+4d per block)",
                lambda host: 4 * host.d_model * host.n_blocks),
}


def audit_host(host: HostDescriptor, extra_specs=()) -> list:
    """Rows for every published entry of ``host`` plus any ``extra_specs``."""
    rows = []
    for pr in PUBLISHED_ROWS:
        if pr.host != host.name:
            continue
        exact = count(pr.spec, host)
        units = million_units(exact, _decimals_of(pr.printed))
        delta = exact - int(Decimal(pr.printed) * 1_000_000)
        row = AuditRow(host.name, pr.spec.label(), exact, units, pr.printed, delta,
                       "match" if units == pr.printed else "MISMATCH", CONVENTIONS[pr.spec.method], pr.source)
        if pr.spec.method in ALT_CONVENTIONS:
            row.alt_exact = exact + ALT_CONVENTIONS[pr.spec.method][1](host)
            alt_units = million_units(row.alt_exact, _decimals_of(pr.printed))
            row.alt_status = "match" if alt_units == pr.printed else "MISMATCH"
        rows.append(row)
    for spec in extra_specs:
        exact = count(spec, host)
        rows.append(AuditRow(host.name, spec.label(), exact, million_units(exact), convention=CONVENTIONS[spec.method]))
    return rows


@dataclass
class ClaimCheck:
    name: str
    host: str
    computed: float
    published: float
    band: tuple | None
    status: str

    def to_dict(self) -> dict:
        return asdict(self)


# (name, host, numerator, denominator, published factor, acceptance band or None = report only)
CLAIMS = [
    ("full_ft / red", "llama2_7b", _s("full_ft"), _s("red"), 25_700, (25_400, 26_000)),
    ("lora(r=16) / red", "llama2_7b", _s("lora", rank=16, alpha=16), _s("red"), 32, (32, 32.5)),
    ("full_ft / red", "roberta_base", _s("full_ft"), _s("red"), 7_200, None),
    ("lora(r=8) / red", "roberta_base", _s("lora", rank=8, alpha=8), _s("red"), 16, (16, 16.5)),
]


def check_claims() -> list:
    out = []
    for name, host, a, b, published, band in CLAIMS:
        value = reduction_factor(a, b, PRESETS[host])
        if band is None:
            status = "FLAGGED" if abs(value - published) / published > 0.005 else "match"
        else:
            status = "match" if band[0] <= value <= band[1] else "MISMATCH"
        out.append(ClaimCheck(name, host, value, published, band, status))
    return out


@dataclass
class AuditReport:
    rows: list = field(default_factory=list)
    claims: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"rows": [r.to_dict() for r in self.rows],
                           "claims": [c.to_dict() for c in self.claims]}, indent=2)

    def to_text(self) -> str:
        header = f"{'host':<14}{'method':<22}{'exact':>14}{'units(M)':>10}{'published(M)':>14}{'delta':>12}  status"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            published = r.published if r.published is not None else "-"
            delta = f"{r.delta:+d}" if r.delta is not None else "-"
            lines.append(f"{r.host:<14}{r.method:<22}{r.exact:>14,}{r.units:>10}{published:>14}{delta:>12}  {r.status}")
        if self.claims:
            lines += ["", f"{'reduction':<20}{'host':<14}{'computed':>12}{'published':>11}  status"]
            for c in self.claims:
                lines.append(f"{c.name:<20}{c.host:<14}{c.computed:>12,.1f}{c.published:>11,}  {c.status}")
        alts = [r for r in self.rows if r.alt_exact is not None]
        if alts:
            lines += ["", "alternative convention (reported only):"]
            for r in alts:
                desc = ALT_CONVENTIONS[r.method.split("(")[0]][0]
                lines.append(f"  {r.host:<14}{r.method:<16}{r.alt_exact:>12,}  {r.alt_status}  [{desc}]")
        notes = sorted({(r.method.split('(')[0].split('/')[0], r.convention) for r in self.rows if r.convention})
        if notes:
            lines += ["", "counting conventions:"]
            lines += [f"  {m}: {c}" for m, c in notes]
        return "\n".join(lines) + "\n"


def run_audit(hosts=None, extra_specs=()) -> AuditReport:
    """Audit the given descriptors (all presets when None) and the headline reduction claims."""
    if hosts is None:
        hosts = list(PRESETS.values())
        claims = check_claims()
    else:
        claims = [c for c in check_claims() if c.host in {h.name for h in hosts}]
    rows = []
    for h in hosts:
        rows.extend(audit_host(h, extra_specs))
    return AuditReport(rows, claims)

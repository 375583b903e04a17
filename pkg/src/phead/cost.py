"""Parameter counting, aggregate cost across users, and efficiency metrics.

All functions are pure.  Sizes are bytes at 4 bytes per float32 parameter;
the human-readable tables use binary megabytes (2**20 bytes).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import ConfigError, DataError

BYTES_PER_PARAM = 4
MB = 2**20


def count_ph_params(d_model: int, d_ff: int, include_output: bool = True) -> int:
    if d_model < 1 or d_ff < 1:
        raise ConfigError(f"dims must be >= 1, got d_model={d_model}, d_ff={d_ff}")
    attention = 4 * (d_model * d_model + d_model)
    ffn = (d_model * d_ff + d_ff) + (d_ff * d_model + d_model)
    norms = 4 * d_model
    out = count_linear_params(d_model, 2) if include_output else 0
    return attention + ffn + norms + out


def count_linear_params(d_model: int, n_out: int = 2) -> int:
    if d_model < 1 or n_out < 1:
        raise ConfigError(f"dims must be >= 1, got d_model={d_model}, n_out={n_out}")
    return d_model * n_out + n_out


@dataclass(frozen=True)
class CostModel:
    base_params: int
    head_params: int
    n_users: int
    linear_params: int = 0
    bytes_per_param: int = BYTES_PER_PARAM

    def __post_init__(self):
        if min(self.base_params, self.head_params, self.n_users, self.linear_params) < 0:
            raise ConfigError("cost model counts must be non-negative")
        if self.bytes_per_param != BYTES_PER_PARAM:
            raise ConfigError("bytes_per_param is fixed at 4 (float32)")


def aggregate_cost(model: CostModel, mode: str) -> dict:
    """Totals across ``n_users``.

    ``full_finetune``: every user trains and stores a full copy of base plus
    output layer.  ``ph_only``: every user trains and stores a head; one base
    is stored for everyone.
    """
    n = model.n_users
    if mode == "full_finetune":
        train = n * (model.base_params + model.linear_params)
        stored = train
    elif mode == "ph_only":
        train = n * model.head_params
        stored = model.base_params + n * model.head_params
    else:
        raise ConfigError(f"unknown cost mode {mode!r}")
    return {"mode": mode, "train_params_total": train, "stored_params_total": stored,
            "stored_bytes_total": stored * model.bytes_per_param}


def head_much_smaller(head_params: int, base_params: int) -> bool:
    """The premise that makes per-user heads worthwhile: |head| < |base|."""
    return head_params < base_params


@dataclass(frozen=True)
class PEInput:
    f_score: float
    training_cost: float
    model_size: float
    f_unit: str = "percent"

    def f_fraction(self) -> float:
        if self.f_unit == "percent":
            return self.f_score / 100.0
        if self.f_unit == "fraction":
            return self.f_score
        raise ConfigError(f"unknown F-score unit {self.f_unit!r}")


def personalization_efficiency(x: PEInput) -> float:
    """F^2 / (training cost * model size), F taken as a fraction."""
    if x.training_cost <= 0 or x.model_size <= 0:
        raise DataError("training cost and model size must be positive")
    f = x.f_fraction()
    return f * f / (x.training_cost * x.model_size)


def normalized_pe(x: PEInput, reference: PEInput) -> float:
    return personalization_efficiency(x) / personalization_efficiency(reference)


def storage_overhead(model_bytes: float, daily_user_data_bytes: float, lifetime_days: float) -> float:
    if daily_user_data_bytes <= 0 or lifetime_days <= 0 or model_bytes < 0:
        raise DataError("storage overhead inputs must be positive")
    return model_bytes / (daily_user_data_bytes * lifetime_days)


# ----------------------------------------------------------------------
# reports

# the PE and storage reference points the CLI reports against by default
BERT_BASE_PARAMS = 109_000_000
BERT_BASE_BYTES = 417 * MB
GMAIL_DAILY_BYTES = 1.4 * MB
GMAIL_LIFETIME_DAYS = 3 * 365
TABLE_HIDDEN_DIMS = (2048, 1024, 512, 256, 128)


def human_count(n: float) -> str:
    if n >= 1e9:
        return f"{n / 1e9:.2f}B"
    if n >= 1e6:
        return f"{n / 1e6:.2f}M"
    if n >= 1e3:
        return f"{n / 1e3:.1f}K"
    return str(int(n))


def human_bytes(b: float) -> str:
    if b >= MB:
        return f"{b / MB:.1f}MB"
    if b >= 1024:
        return f"{b / 1024:.1f}KB"
    return f"{int(b)}B"


def per_user_rows(d_model: int, hidden_dims, heads=(2, 4, 8)) -> list[dict]:
    rows = [{"model": "linear only", "hidden_dim": None, "heads": None,
             "params": count_linear_params(d_model),
             "bytes": BYTES_PER_PARAM * count_linear_params(d_model)}]
    for d_ff in hidden_dims:
        n = count_ph_params(d_model, d_ff, include_output=True)
        for h in heads:
            rows.append({"model": "ph", "hidden_dim": d_ff, "heads": h, "params": n,
                         "bytes": BYTES_PER_PARAM * n})
    return rows


@dataclass
class CostReport:
    cost_model: dict
    full_finetune: dict
    ph_only: dict
    stored_ratio: float | None
    per_user: list[dict]
    pe: list[dict]
    storage_overhead: list[dict]
    head_smaller_than_base: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_markdown(self) -> str:
        lines = ["## Per-user cost", "", "| Model | Hidden Dim | # Attn. Heads | # Params / User | Size / User |",
                 "|---|---|---|---|---|"]
        for r in self.per_user:
            lines.append(f"| {r['model']} | {r['hidden_dim'] or '-'} | {r['heads'] or '-'} | "
                         f"{human_count(r['params'])} | {human_bytes(r['bytes'])} |")
        lines += ["", "## Aggregate over users", "",
                  f"N = {self.cost_model['n_users']}, base = {human_count(self.cost_model['base_params'])}, "
                  f"head = {human_count(self.cost_model['head_params'])}", "",
                  "| Mode | Trained params | Stored params | Stored bytes |", "|---|---|---|---|"]
        for agg in (self.full_finetune, self.ph_only):
            lines.append(f"| {agg['mode']} | {agg['train_params_total']:.4g} | "
                         f"{agg['stored_params_total']:.4g} | {agg['stored_bytes_total']:.4g} |")
        if self.stored_ratio is not None:
            lines.append(f"\nStorage ratio full/ph: {self.stored_ratio:.2f}x")
        if self.pe:
            lines += ["", "## Personalization efficiency", "", "| Model | F | Train cost | Size | PE (normalized) |",
                      "|---|---|---|---|---|"]
            for r in self.pe:
                lines.append(f"| {r['name']} | {r['f_score']} | {human_count(r['training_cost'])} | "
                             f"{human_bytes(r['model_size'])} | {r['normalized']:.4g} |")
        if self.storage_overhead:
            lines += ["", "## Storage overhead vs. user data", "", "| Model | Size | Overhead |", "|---|---|---|"]
            for r in self.storage_overhead:
                lines.append(f"| {r['name']} | {human_bytes(r['model_bytes'])} | {100 * r['overhead']:.2f}% |")
        lines.append(f"\nHead smaller than base: {self.head_smaller_than_base}")
        return "\n".join(lines) + "\n"


def build_report(base_params: int, head_params: int, n_users: int, d_model: int = 768,
                 hidden_dims=TABLE_HIDDEN_DIMS, pe_entries: list[tuple[str, PEInput]] | None = None,
                 pe_reference: PEInput | None = None, daily_bytes: float = GMAIL_DAILY_BYTES,
                 lifetime_days: float = GMAIL_LIFETIME_DAYS) -> CostReport:
    linear = count_linear_params(d_model)
    cm = CostModel(base_params, head_params, n_users, linear_params=linear)
    full = aggregate_cost(cm, "full_finetune")
    ph = aggregate_cost(cm, "ph_only")
    ratio = full["stored_params_total"] / ph["stored_params_total"] if ph["stored_params_total"] else None
    pe_rows = []
    if pe_entries:
        ref = pe_reference or pe_entries[0][1]
        for name, x in pe_entries:
            pe_rows.append({"name": name, "f_score": x.f_score, "f_unit": x.f_unit,
                            "training_cost": x.training_cost, "model_size": x.model_size,
                            "pe": personalization_efficiency(x), "normalized": normalized_pe(x, ref)})
    overhead = [{"name": "base copy", "model_bytes": (base_params + linear) * BYTES_PER_PARAM,
                 "overhead": storage_overhead((base_params + linear) * BYTES_PER_PARAM, daily_bytes, lifetime_days)},
                {"name": "head", "model_bytes": head_params * BYTES_PER_PARAM,
                 "overhead": storage_overhead(head_params * BYTES_PER_PARAM, daily_bytes, lifetime_days)}]
    return CostReport(asdict(cm), full, ph, ratio, per_user_rows(d_model, hidden_dims), pe_rows, overhead,
                      head_much_smaller(head_params, base_params))

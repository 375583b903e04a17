import pytest
from hypothesis import given
from hypothesis import strategies as st

from phead.cost import (BERT_BASE_BYTES, MB, CostModel, PEInput, aggregate_cost, build_report, count_linear_params,
                        count_ph_params, head_much_smaller, human_bytes, human_count, normalized_pe,
                        personalization_efficiency, per_user_rows, storage_overhead)
from phead.errors import ConfigError, DataError

# published per-user parameter counts (millions) and sizes (MB) at d_model=768
PUBLISHED = {2048: (5.52, 21), 1024: (3.94, 15), 512: (3.15, 12), 256: (2.76, 11), 128: (2.57, 9.8)}


def oracle_count(d, f):
    # written out layer by layer, independent of the implementation's grouping
    q = k = v = o = d * d + d
    ff1, ff2 = d * f + f, f * d + d
    ln1 = ln2 = 2 * d
    out = 2 * d + 2
    return q + k + v + o + ff1 + ff2 + ln1 + ln2 + out


class TestCounts:
    @pytest.mark.parametrize("d_ff", sorted(PUBLISHED))
    def test_matches_published_table(self, d_ff):
        n = count_ph_params(768, d_ff)
        assert n == oracle_count(768, d_ff)
        assert abs(n / 1e6 - PUBLISHED[d_ff][0]) / PUBLISHED[d_ff][0] <= 0.005

    @pytest.mark.parametrize("d_ff", sorted(PUBLISHED))
    def test_sizes_match_published_table(self, d_ff):
        mb = 4 * count_ph_params(768, d_ff) / MB
        assert abs(mb - PUBLISHED[d_ff][1]) / PUBLISHED[d_ff][1] <= 0.10

    def test_exact_values(self):
        assert count_ph_params(768, 2048) == 5_515_522
        assert count_ph_params(1, 1) == 20
        assert count_ph_params(1, 1, include_output=False) == 16

    def test_linear(self):
        assert count_linear_params(768, 2) == 1538
        assert count_linear_params(64) == 130
        assert human_count(count_linear_params(768)) == "1.5K"

    def test_rejects_zero_dims(self):
        with pytest.raises(ConfigError):
            count_ph_params(0, 4)
        with pytest.raises(ConfigError):
            count_linear_params(4, 0)

    @given(st.integers(1, 512), st.integers(1, 512))
    def test_monotone_in_d_ff(self, d, f):
        assert count_ph_params(d, f + 1) > count_ph_params(d, f)
        assert count_ph_params(d, f) - count_ph_params(d, f, include_output=False) == count_linear_params(d)

    def test_rows_independent_of_heads(self):
        rows = [r for r in per_user_rows(768, [512]) if r["model"] == "ph"]
        assert {r["heads"] for r in rows} == {2, 4, 8}
        assert len({r["params"] for r in rows}) == 1


class TestAggregate:
    def test_headline_arithmetic(self):
        cm = CostModel(109_000_000, 5_520_000, 10**6)
        ph = aggregate_cost(cm, "ph_only")
        full = aggregate_cost(cm, "full_finetune")
        assert ph["stored_params_total"] == 109_000_000 + 5_520_000 * 10**6
        assert full["stored_params_total"] == 109 * 10**12
        assert ph["train_params_total"] == 5.52e12
        assert ph["stored_bytes_total"] == 4 * ph["stored_params_total"]

    def test_zero_users(self):
        cm = CostModel(100, 10, 0)
        assert aggregate_cost(cm, "ph_only")["stored_params_total"] == 100
        assert aggregate_cost(cm, "full_finetune")["stored_params_total"] == 0

    def test_one_user_ph_stores_more(self):
        cm = CostModel(100, 10, 1)
        assert aggregate_cost(cm, "ph_only")["stored_params_total"] > aggregate_cost(cm, "full_finetune")[
            "stored_params_total"]

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            aggregate_cost(CostModel(1, 1, 1), "lora")
        with pytest.raises(ConfigError):
            CostModel(1, 1, -1)
        with pytest.raises(ConfigError):
            CostModel(1, 1, 1, bytes_per_param=2)

    @given(st.integers(0, 10**6), st.integers(1, 10**4))
    def test_linear_in_users(self, n, head):
        a = aggregate_cost(CostModel(10**6, head, n), "ph_only")["stored_params_total"]
        b = aggregate_cost(CostModel(10**6, head, n + 1), "ph_only")["stored_params_total"]
        assert b - a == head

    @pytest.mark.parametrize("d_ff", sorted(PUBLISHED))
    def test_head_smaller_than_base(self, d_ff):
        assert head_much_smaller(count_ph_params(768, d_ff), 109_000_000)

    @pytest.mark.parametrize("d_ff", sorted(PUBLISHED))
    @pytest.mark.parametrize("n", [2, 10, 10**6])
    def test_shared_base_stores_less(self, d_ff, n):
        cm = CostModel(109_000_000, count_ph_params(768, d_ff), n, linear_params=count_linear_params(768))
        assert aggregate_cost(cm, "ph_only")["stored_params_total"] < \
            aggregate_cost(cm, "full_finetune")["stored_params_total"]

    def test_head_not_smaller(self):
        assert not head_much_smaller(10, 10)


class TestEfficiency:
    def test_pe_formula(self):
        assert personalization_efficiency(PEInput(90, 1e6, 4e6)) == pytest.approx(0.81 / 4e12)
        assert personalization_efficiency(PEInput(0.9, 1e6, 4e6, "fraction")) == pytest.approx(0.81 / 4e12)

    def test_normalized_reference_is_one(self):
        x = PEInput(95, 109e6, BERT_BASE_BYTES)
        assert normalized_pe(x, x) == pytest.approx(1.0)

    def test_bad_pe_inputs(self):
        with pytest.raises(DataError):
            personalization_efficiency(PEInput(90, 0, 1))
        with pytest.raises(ConfigError):
            personalization_efficiency(PEInput(90, 1, 1, "permille"))

    def test_storage_overhead_values(self):
        assert storage_overhead(417 * MB, 1.4 * MB, 1095) == pytest.approx(417 / (1.4 * 1095))
        assert storage_overhead(0, 1, 1) == 0.0
        with pytest.raises(DataError):
            storage_overhead(1, 0, 1)

    @given(st.floats(1, 1e9), st.floats(1, 1e9))
    def test_overhead_monotone(self, size, extra):
        assert storage_overhead(size + extra, 1.0, 10.0) > storage_overhead(size, 1.0, 10.0)


class TestReport:
    def test_report_contents(self):
        rep = build_report(109_000_000, 5_520_000, 10**6)
        assert rep.stored_ratio == pytest.approx((109e6 + 1538) * 1e6 / (109e6 + 5.52e12))
        assert rep.head_smaller_than_base
        md = rep.to_markdown()
        assert "5.52M" in md and "21.0MB" in md and "1.5K" in md
        assert rep.to_dict()["ph_only"]["stored_params_total"] == 109_000_000 + 5_520_000 * 10**6

    def test_zero_users_report(self):
        rep = build_report(100, 10, 0)
        assert rep.ph_only["stored_params_total"] == 100 and rep.stored_ratio == 0.0

    def test_human_formats(self):
        assert human_bytes(21.04 * MB) == "21.0MB"
        assert human_count(5_515_522) == "5.52M"

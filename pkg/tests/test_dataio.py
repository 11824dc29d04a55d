import numpy as np
import pytest

from yieldfield.dataio import (
    PAPER_MATURITIES,
    WindowSpec,
    YieldPanel,
    month_add,
    months_between,
    paper_origin_range,
    parse_fama_bliss,
    rolling_origins,
    to_long_csv,
    to_wide_csv,
)
from yieldfield.errors import DomainError, ParseError, ValidationError
from yieldfield.simulate import simulate_dns_panel


def synthetic_text(rows=3, value=5.0, start=198501):
    lines = []
    date = start
    for _ in range(rows):
        lines.append(f"{date} " + " ".join(f"{value:.4f}" for _ in range(17)))
        date = month_add(date, 1)
    return "\n".join(lines) + "\n"


class TestParse:
    def test_constant_synthetic_panel(self):
        panel = parse_fama_bliss(synthetic_text())
        assert panel.yields.shape == (3, 17)
        assert np.all(panel.yields == 5.0)
        assert list(panel.maturities) == list(PAPER_MATURITIES)

    def test_empty_input_is_a_parse_error(self):
        with pytest.raises(ParseError):
            parse_fama_bliss("")

    def test_header_lines_are_skipped(self):
        text = "# comment\nFama Bliss file\n" + synthetic_text()
        assert parse_fama_bliss(text).n_periods == 3

    def test_wrong_column_count_reports_line_number(self):
        text = synthetic_text() + "198504 1.0 2.0\n"
        with pytest.raises(ParseError) as err:
            parse_fama_bliss(text)
        assert err.value.line == 4

    def test_yyyymmdd_dates_accepted(self):
        text = "19850131 " + " ".join(["5.0"] * 17) + "\n19850228 " + " ".join(["5.1"] * 17)
        panel = parse_fama_bliss(text)
        assert list(panel.dates) == [198501, 198502]

    def test_gap_in_dates_fails_validation(self):
        text = synthetic_text().splitlines()
        del text[1]
        with pytest.raises(ValidationError):
            parse_fama_bliss("\n".join(text))

    def test_non_finite_yield_fails_validation(self):
        text = synthetic_text().replace("5.0000", "nan", 1)
        with pytest.raises(ValidationError):
            parse_fama_bliss(text)

    def test_row_order_is_normalized(self):
        lines = synthetic_text(rows=5).strip().splitlines()
        shuffled = [lines[i] for i in (3, 0, 4, 2, 1)]
        a = parse_fama_bliss("\n".join(lines))
        b = parse_fama_bliss("\n".join(shuffled))
        assert np.array_equal(a.yields, b.yields) and np.array_equal(a.dates, b.dates)

    def test_paper_restriction(self, paper_panel):
        assert paper_panel.n_periods == 192
        assert paper_panel.n_maturities == 17
        assert paper_panel.dates[0] == 198501 and paper_panel.dates[-1] == 200012


class TestCsvRoundTrip:
    def test_wide_roundtrip_is_bitwise(self):
        panel, _ = simulate_dns_panel(T=30, seed=1)
        again = parse_fama_bliss(to_wide_csv(panel))
        assert np.array_equal(panel.yields, again.yields)
        assert np.array_equal(panel.dates, again.dates)
        assert np.array_equal(panel.maturities, again.maturities)

    def test_long_form_has_all_cells(self):
        panel, _ = simulate_dns_panel(T=4, seed=1)
        text = to_long_csv(panel)
        assert len(text.strip().splitlines()) == 1 + 4 * 17


def _calendar_count(first, last):
    count = 0
    d = first
    while d <= last:
        count += 1
        d = month_add(d, 1)
    return count


@pytest.fixture(scope="module")
def long_panel():
    panel, _ = simulate_dns_panel(T=204, seed=2, start=198501)  # 1985-01..2001-12
    return panel


class TestRollingOrigins:
    def test_origin_count_matches_calendar_enumeration(self, long_panel):
        windows = rolling_origins(long_panel, 199412, 199912, horizon=12)
        assert len(windows) == _calendar_count(199412, 199912) == 61

    def test_single_origin(self, long_panel):
        assert len(rolling_origins(long_panel, 199412, 199412, horizon=1)) == 1

    def test_h1_final_target_is_december_2000(self, long_panel):
        windows = rolling_origins(long_panel, 199412, 200011, horizon=1)
        final = windows[-1]
        target_idx = final.train_end + final.horizon
        assert long_panel.dates[target_idx] == 200012

    def test_targets_stay_inside_panel(self, long_panel):
        for h in (1, 6, 12):
            for w in rolling_origins(long_panel, 199401, 200006, horizon=h):
                assert w.train_end + w.horizon <= long_panel.n_periods - 1

    def test_expanding_keeps_start_fixed(self, long_panel):
        windows = rolling_origins(long_panel, 199412, 199512, horizon=1, scheme="expanding")
        assert all(w.train_start == 0 for w in windows)

    def test_moving_keeps_length_fixed(self, long_panel):
        windows = rolling_origins(long_panel, 199412, 199512, horizon=1, scheme="moving")
        first_len = windows[0].train_end - windows[0].train_start + 1
        assert all(w.train_end - w.train_start + 1 == first_len for w in windows)
        assert first_len == long_panel.date_index(199412) + 1

    def test_horizon_beyond_panel_end_is_rejected(self, long_panel):
        with pytest.raises(DomainError):
            rolling_origins(long_panel, 199412, 200112, horizon=1)

    def test_minimum_training_sample_enforced(self, long_panel):
        with pytest.raises(ValidationError):
            rolling_origins(long_panel, 198601, 199001, horizon=1)

    def test_paper_origin_alignment(self):
        assert paper_origin_range(1) == (199412, 200011)
        assert paper_origin_range(6) == (199407, 200006)
        assert paper_origin_range(12) == (199401, 199912)


class TestPanelType:
    def test_negative_yields_rejected(self):
        with pytest.raises(ValidationError):
            YieldPanel(
                dates=np.array([198501, 198502]),
                maturities=np.array([3, 6]),
                yields=np.array([[1.0, 2.0], [-0.5, 1.0]]),
            )

    def test_window_slicing(self):
        panel, _ = simulate_dns_panel(T=30, seed=1)
        sub = panel.window(5, 20)
        assert sub.n_periods == 16
        assert sub.dates[0] == panel.dates[5]

    def test_months_between(self):
        assert months_between(199412, 199501) == 1
        assert months_between(198501, 200012) == 191

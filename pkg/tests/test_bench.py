import pytest

from treeattn.bench import bench_accumulation


@pytest.fixture(scope="module")
def report():
    return bench_accumulation([32, 64, 128, 256], d=8, d_ffn=16, heads=2, hier_size=20)


def test_op_counts_grow_like_n_log_n(report):
    for n, r in report.ratios("accumulate_ops"):
        assert 2.0 <= r <= 2.6, (n, r)
    assert report.max_residual < 0.2


def test_layer_ratio_is_subquadratic(report):
    for n, r in report.ratios("layer_ops"):
        assert r < 4.0, (n, r)


def test_counts_are_deterministic(report):
    again = bench_accumulation([32, 64, 128, 256], d=8, d_ffn=16, heads=2, hier_size=20)
    assert report.to_csv(timings=False) == again.to_csv(timings=False)


def test_csv_columns(report):
    head = report.to_csv().splitlines()[0].split(",")
    assert head[:3] == ["n", "m", "accumulate_ops"] and "layer_ns" in head
    assert "layer_ns" not in report.to_csv(timings=False)
    assert len(report.to_csv().splitlines()) == 5
    assert all(r.m == r.n - 1 for r in report.rows)


def test_empty_and_invalid():
    assert bench_accumulation([8, 16], repeats=0).rows == []
    with pytest.raises(ValueError):
        bench_accumulation([16, 8])


def test_accumulate_only():
    rep = bench_accumulation([8, 16], d=4, heads=1, include_layer=False)
    assert all(r.layer_ops == 0 for r in rep.rows)

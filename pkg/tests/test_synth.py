import numpy as np
import pytest

from stcgat.data import export_binary, ingest
from stcgat.errors import ConfigError
from stcgat.synth import SynthParams, generate


def test_fixed_seed_is_bit_identical(tmp_path):
    for name in ("a", "b"):
        export_binary(generate(SynthParams(n_nodes=5, steps=300, seed=9)).dataset, tmp_path / f"{name}.stds")
    assert (tmp_path / "a.stds").read_bytes() == (tmp_path / "b.stds").read_bytes()
    other = generate(SynthParams(n_nodes=5, steps=300, seed=10)).dataset.readings
    assert not np.array_equal(ingest(tmp_path / "a.stds").readings, other)


def test_header_matches_request(tmp_path):
    res = generate(SynthParams(n_nodes=7, steps=123, seed=1, unit_minutes=15))
    export_binary(res.dataset, tmp_path / "s.stds")
    ds = ingest(tmp_path / "s.stds")
    assert (ds.n_nodes, ds.total_steps, ds.n_features, ds.unit_minutes) == (7, 123, 1, 15)


def test_readings_are_seasonal_plus_noise():
    res = generate(SynthParams(n_nodes=4, steps=500, seed=2))
    np.testing.assert_allclose(res.dataset.readings[:, :, 0], (res.seasonal + res.noise).astype(np.float32))


def test_noise_recursion():
    p = SynthParams(n_nodes=6, steps=50, seed=3, rho=0.5, coupling=0.4, sigma=0.0)
    res = generate(p)
    assert np.all(res.noise == 0)


def test_zero_coupling_decorrelates_nodes():
    res = generate(SynthParams(n_nodes=6, steps=10_000, seed=4, coupling=0.0, radius=2.0))
    assert len(res.dataset.edges) == 15  # fully connected, yet uncoupled
    corr = np.corrcoef(res.noise)
    off = corr[~np.eye(6, dtype=bool)]
    assert np.max(np.abs(off)) < 0.05


def test_coupling_correlates_neighbours():
    res = generate(SynthParams(n_nodes=6, steps=10_000, seed=4, coupling=0.35, rho=0.5, radius=2.0))
    corr = np.corrcoef(res.noise)
    assert np.min(corr[~np.eye(6, dtype=bool)]) > 0.1


def test_unstable_process_rejected():
    with pytest.raises(ConfigError):
        SynthParams(rho=0.8, coupling=0.3)


def test_description_lists_equations_and_parameters():
    text = generate(SynthParams(n_nodes=3, steps=20, seed=0)).describe()
    assert "e_i(t) = rho*e_i(t-1)" in text and "seed=0" in text and "n_nodes=3" in text

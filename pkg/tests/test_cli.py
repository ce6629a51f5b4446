"""Config parsing, output formats, and the command-line surface."""

import json
from pathlib import Path

import numpy as np
import pytest

from modalgp.cli import (
    ConfigError,
    main,
    parse_config,
    read_iterations_ndjson,
    read_oracle,
    read_samples_csv,
    serialize_config,
    summarize_samples,
    write_oracle,
    write_samples_csv,
)

TOY_CLI_CONFIG = {
    "problem": {"kind": "toy"},
    "ilues": {"ensemble_size": 40, "initial_iters": 1, "alpha": 0.1},
    "gp": {"jitter": 1.0, "optimizer_iters": 30},
    "mcmc": {"chain_length": 1500, "burn_in_fraction": 0.2, "epsilon": 0.5},
    "convergence": {"delta_kl": 0.05, "n_kl_max": 2, "n_max": 2},
    "kmax": 4,
    "seed": 7,
}


class TestParseConfig:
    def test_minimal_config_gets_documented_defaults(self):
        cfg = parse_config('{"problem": {"kind": "toy"}, "seed": 3}')
        assert cfg.ilues.ensemble_size == 80
        assert cfg.ilues.initial_iters == 1
        assert cfg.mcmc.chain_length == 10_000
        assert cfg.mcmc.burn_in_fraction == 0.2
        assert cfg.convergence.delta_kl == 0.05
        assert cfg.kmax == 6

    def test_constraint_violation_names_dotted_key(self):
        payload = {"problem": {"kind": "toy"}, "seed": 1, "ilues": {"alpha": 1.5}}
        with pytest.raises(ConfigError, match="ilues.alpha"):
            parse_config(json.dumps(payload))

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="ilues.unknown"):
            parse_config('{"problem": {"kind": "toy"}, "seed": 1, "ilues": {"unknown": 1}}')
        with pytest.raises(ConfigError, match="extra"):
            parse_config('{"problem": {"kind": "toy"}, "seed": 1, "extra": {}}')

    def test_seed_required(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config('{"problem": {"kind": "toy"}}')

    def test_synthesis_and_explicit_data_mutually_exclusive(self):
        with pytest.raises(ConfigError, match="problem"):
            parse_config('{"problem": {"kind": "heat2d"}, "seed": 1}')

    def test_example1_reference_config(self):
        text = (Path(__file__).parent.parent / "configs" / "example1_heat2d.json").read_text()
        cfg = parse_config(text)
        assert cfg.ilues.ensemble_size == 80
        assert cfg.ilues.initial_iters == 1
        assert cfg.mcmc.chain_length == 10_000
        assert cfg.mcmc.burn_in_fraction == 0.2
        assert cfg.problem.noise_percent == 0.05
        assert cfg.problem.truth == [0.5, 0.5]

    def test_roundtrip_is_identity(self):
        cfg = parse_config(json.dumps(TOY_CLI_CONFIG))
        again = parse_config(serialize_config(cfg))
        assert again == cfg
        assert parse_config(serialize_config(again)) == again


class TestSummarize:
    def test_constant_samples_zero_mse(self):
        summary = summarize_samples(np.full((20, 2), 1.5))
        np.testing.assert_allclose(summary["mse"], [0.0, 0.0], atol=1e-20)

    def test_two_point_hand_case(self):
        summary = summarize_samples(np.array([[0.0], [2.0]]))
        assert summary["mean"] == [1.0]
        assert summary["mse"] == [1.0]

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        samples = rng.normal(size=(100, 2))
        s1 = summarize_samples(samples)
        s2 = summarize_samples(samples[rng.permutation(100)])
        np.testing.assert_allclose(s1["mean"], s2["mean"])
        np.testing.assert_allclose(s1["mse"], s2["mse"])

    def test_clusters_cover_separated_blobs(self):
        rng = np.random.default_rng(1)
        samples = np.vstack(
            [rng.normal(size=(60, 1)) * 0.3 - 5, rng.normal(size=(60, 1)) * 0.3 + 5]
        )
        summary = summarize_samples(samples)
        centers = sorted(c["center"][0] for c in summary["clusters"])
        assert len(centers) == 2
        assert centers[0] == pytest.approx(-5, abs=0.5)
        assert centers[1] == pytest.approx(5, abs=0.5)
        assert sum(c["weight"] for c in summary["clusters"]) == pytest.approx(1.0)


class TestFileFormats:
    def test_samples_csv_roundtrip_17_digits(self, tmp_path):
        samples = np.array([[0.1234567890123456789, -1e-17], [3.0, 2.0]])
        log_posts = np.array([-1.5, -2.5])
        path = tmp_path / "samples.csv"
        write_samples_csv(path, samples, log_posts)
        header = path.read_text().splitlines()[0]
        assert header == "theta_1,theta_2,log_post"
        back_s, back_lp = read_samples_csv(path)
        np.testing.assert_array_equal(back_s, samples)
        np.testing.assert_array_equal(back_lp, log_posts)

    def test_oracle_roundtrip(self, tmp_path):
        from modalgp.oracle import grid_posterior
        from helpers import scalar_problem

        spec = scalar_problem(d_obs=(0.4,), lower=(-2.0,), upper=(2.0,))
        gp = grid_posterior(spec, 15)
        write_oracle(tmp_path / "oracle", gp)
        back = read_oracle(tmp_path / "oracle")
        np.testing.assert_array_equal(back.log_post, gp.log_post)
        np.testing.assert_allclose(back.masses, gp.masses, atol=1e-15)
        np.testing.assert_allclose(back.axes[0], gp.axes[0], atol=1e-15)


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config_path = out / "config.json"
    config_path.write_text(json.dumps(TOY_CLI_CONFIG))
    code = main(["run", "--config", str(config_path), "--out", str(out / "result")])
    assert code == 0
    return config_path, out / "result"


class TestCommands:
    def test_run_writes_all_outputs(self, cli_run):
        _, out_dir = cli_run
        for name in ["samples.csv", "iterations.ndjson", "summary.json", "marginals.csv"]:
            assert (out_dir / name).exists(), name

    def test_summary_consistent_with_samples(self, cli_run):
        _, out_dir = cli_run
        samples, _ = read_samples_csv(out_dir / "samples.csv")
        summary = json.loads((out_dir / "summary.json").read_text())
        np.testing.assert_allclose(summary["mean"], samples.mean(axis=0), rtol=1e-12)
        records = read_iterations_ndjson(out_dir / "iterations.ndjson")
        assert summary["forward_calls_total"] == records[-1]["forward_calls"]
        assert summary["seed"] == TOY_CLI_CONFIG["seed"]

    def test_iterations_schema(self, cli_run):
        _, out_dir = cli_run
        records = read_iterations_ndjson(out_dir / "iterations.ndjson")
        assert records, "no iteration records written"
        expected_keys = ["n", "kl", "accept_rate", "k_clusters", "forward_calls", "wall_ms"]
        for rec in records:
            assert list(rec.keys()) == expected_keys

    def test_oracle_stats_compare_commands(self, cli_run, tmp_path, capsys):
        config_path, out_dir = cli_run
        oracle_dir = tmp_path / "oracle"
        assert main([
            "oracle", "--config", str(config_path),
            "--out", str(oracle_dir), "--resolution", "21",
        ]) == 0
        capsys.readouterr()
        assert main(["stats", "--samples", str(out_dir / "samples.csv")]) == 0
        stats_out = json.loads(capsys.readouterr().out)
        assert "mean" in stats_out and "clusters" in stats_out
        assert main([
            "compare", "--samples", str(out_dir / "samples.csv"),
            "--oracle", str(oracle_dir),
        ]) == 0
        report = json.loads(capsys.readouterr().out)
        assert "mean_delta" in report and "oracle_modes" in report
        assert max(abs(d) for d in report["mean_delta"]) < 0.5

    def test_marginals_masses_sum_to_one_per_block(self, cli_run):
        _, out_dir = cli_run
        lines = (out_dir / "marginals.csv").read_text().strip().splitlines()[1:]
        mass_1d = {}
        for line in lines:
            parts = line.split(",")
            if parts[0] == "1d":
                mass_1d.setdefault(parts[1], 0.0)
                mass_1d[parts[1]] += float(parts[-1])
        for total in mass_1d.values():
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"problem": {"kind": "toy"}, "seed": 1, "ilues": {"alpha": 2}}')
        assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1

    def test_missing_config_file_exit_code(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", "o"]) == 1

    def test_seed_override(self, tmp_path):
        config_path = tmp_path / "c.json"
        cfg = dict(TOY_CLI_CONFIG)
        cfg["mcmc"] = dict(cfg["mcmc"], chain_length=300)
        cfg["convergence"] = dict(cfg["convergence"], n_max=0)
        config_path.write_text(json.dumps(cfg))
        out1 = tmp_path / "o1"
        out2 = tmp_path / "o2"
        assert main(["run", "--config", str(config_path), "--out", str(out1), "--seed", "99"]) == 0
        assert main(["run", "--config", str(config_path), "--out", str(out2), "--seed", "99"]) == 0
        assert (out1 / "samples.csv").read_text() == (out2 / "samples.csv").read_text()
        summary = json.loads((out1 / "summary.json").read_text())
        assert summary["seed"] == 99

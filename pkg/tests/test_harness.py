import csv
import json
import shutil

import numpy as np
import pytest

from meanfield_lab import harness
from meanfield_lab.harness import (CSV_COLUMNS, SCHEMA, ExperimentConfig, load_ensemble_dir,
                                   load_manifest, run_dir, run_experiment)
from meanfield_lab.kernels import PotentialSpec

pytestmark = pytest.mark.filterwarnings("ignore::meanfield_lab.diagnostics.LowConfidenceWarning")

SPEC = PotentialSpec(2, attractive_log_coefficient=0.5, spectral_band=16).to_dict()


def chaos_cfg(out, **kw):
    base = dict(kind="chaos_rate", out=str(out), spec=SPEC, sigma=0.5, dt=1e-3, T=0.004,
                save_times=[0.0, 0.002, 0.004], N_list=[16, 32, 64], M=4, seed=11, grid=32,
                init="gaussian:0.15", bandwidth=0.1)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def chaos_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("chaos") / "out"
    run_experiment(chaos_cfg(out))
    return out


class TestConfig:
    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ValueError):
            ExperimentConfig(kind="nope", out=str(tmp_path))

    def test_missing_spec(self, tmp_path):
        with pytest.raises(ValueError):
            ExperimentConfig(kind="chaos_rate", out=str(tmp_path), T=0.01, dt=1e-3)

    def test_schedule_checked(self, tmp_path):
        with pytest.raises(ValueError):
            chaos_cfg(tmp_path, T=0.0045)
        with pytest.raises(ValueError):
            chaos_cfg(tmp_path, save_times=[0.0, 0.0015, 0.004])

    def test_N_list_increasing(self, tmp_path):
        with pytest.raises(ValueError):
            chaos_cfg(tmp_path, N_list=[32, 16, 64])

    def test_unknown_keys(self, tmp_path):
        with pytest.raises(ValueError, match="unknown config keys"):
            ExperimentConfig.from_dict({"kind": "ld_zero", "out": "x", "lamda": 1})

    def test_relative_paths(self, tmp_path):
        (tmp_path / "spec.json").write_text(json.dumps(SPEC))
        (tmp_path / "exp.json").write_text(json.dumps(
            {"kind": "chaos_rate", "out": "o", "spec": "spec.json", "T": 0.002, "dt": 1e-3}))
        cfg = ExperimentConfig.from_json(tmp_path / "exp.json")
        assert cfg.out == str(tmp_path / "o") and cfg.potential.to_dict() == SPEC
        assert cfg.save_times == [0.0, 0.002]

    def test_missing_spec_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ExperimentConfig.from_dict({"kind": "chaos_rate", "out": "o", "spec": "none.json"},
                                       base=tmp_path)


class TestChaosRate:
    def test_layout(self, chaos_out):
        assert (chaos_out / "manifest.json").exists()
        for name in ("report.csv", "schema.json", "summary.json", "l1_vs_N.svg"):
            assert (chaos_out / "report" / name).exists()
        assert len(list((chaos_out / "runs").iterdir())) == 3
        assert list((chaos_out / "pde").glob("field_*.bin"))

    def test_csv(self, chaos_out):
        with open(chaos_out / "report" / "report.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == CSV_COLUMNS
        body = rows[1:]
        assert len(body) == 3 * 3
        assert sorted({int(r[0]) for r in body}) == [16, 32, 64]
        for r in body:
            assert float(r[3]) >= 0 and r[6] != ""
        schema = json.loads((chaos_out / "report" / "schema.json").read_text())
        assert schema == json.loads(json.dumps(SCHEMA))

    def test_snapshot_files(self, chaos_out):
        cfg = chaos_cfg(chaos_out)
        d = run_dir(cfg, 32)
        raw = (d / "member_0002.bin").read_bytes()
        meta = json.loads((d / "member_0002.bin.json").read_text())
        assert meta["shape"] == [3, 32, 2] and meta["dtype"] == "<f8"
        arr = np.frombuffer(raw, "<f8").reshape(3, 32, 2)
        snaps, times, _, survivors, failures = load_ensemble_dir(d)
        assert np.array_equal(snaps[2], arr) and survivors == [0, 1, 2, 3] and not failures
        assert times.tolist() == [0.0, 0.002, 0.004]

    def test_rerun_is_cached_and_identical(self, chaos_out, capsys):
        before = (chaos_out / "manifest.json").read_bytes()
        stamps = {p: p.stat().st_mtime_ns for p in chaos_out.rglob("*.bin")}
        messages = []
        run_experiment(chaos_cfg(chaos_out), log=messages.append)
        assert (chaos_out / "manifest.json").read_bytes() == before
        assert {p: p.stat().st_mtime_ns for p in chaos_out.rglob("*.bin")} == stamps
        assert "pde: reused" in messages
        assert all("0 members simulated" in m for m in messages if m.startswith("N="))

    def test_manifest_covers_artifacts(self, chaos_out):
        man = load_manifest(chaos_out)
        assert man["kind"] == "chaos_rate"
        assert "report/report.csv" in man["artifacts"]
        assert set(man["stage_hashes"]) == {"pde", "ensemble_N16", "ensemble_N32",
                                            "ensemble_N64"}

    def test_summary_has_free_energy_proxy(self, chaos_out):
        summary = json.loads((chaos_out / "report" / "summary.json").read_text())
        proxy = summary["free_energy_proxy"]["64"]
        assert len(proxy) == 3 and all(p["label"] == "proxy" for p in proxy)

    def test_resume_after_deleting_members(self, chaos_out, tmp_path):
        copy = tmp_path / "out"
        shutil.copytree(chaos_out, copy)
        d = run_dir(chaos_cfg(copy), 64)
        for p in list(d.glob("member_0001*")) + list(d.glob("member_0003*")):
            p.unlink()
        shutil.rmtree(copy / "report")
        messages = []
        run_experiment(chaos_cfg(copy), log=messages.append)
        assert "N=64: 2 members simulated, 2 reused" in messages
        a, b = load_manifest(chaos_out), load_manifest(copy)
        assert a["artifacts"] == b["artifacts"] and a["results"] == b["results"]

    def test_fresh_directory_reproduces(self, chaos_out, tmp_path):
        run_experiment(chaos_cfg(tmp_path / "again", workers=2))
        assert load_manifest(tmp_path / "again") == load_manifest(chaos_out)

    def test_seed_changes_results(self, chaos_out, tmp_path):
        run_experiment(chaos_cfg(tmp_path / "other", seed=12))
        assert (load_manifest(tmp_path / "other")["artifacts"]["report/report.csv"]
                != load_manifest(chaos_out)["artifacts"]["report/report.csv"])

    def test_failures_are_counted(self, tmp_path, monkeypatch):
        real = harness.simulate_member

        def flaky(*args):
            if args[-1] == 1:
                raise FloatingPointError("particles 0 and 2 coincide")
            return real(*args)

        monkeypatch.setattr(harness, "simulate_member", flaky)
        run_experiment(chaos_cfg(tmp_path))
        summary = json.loads((tmp_path / "report" / "summary.json").read_text())
        assert summary["survivors"] == {"16": 3, "32": 3, "64": 3}
        assert all(list(v) == ["1"] for v in summary["failures"].values())
        assert list(run_dir(chaos_cfg(tmp_path), 16).glob("member_0001.failed.json"))


class TestOtherKinds:
    def test_blowup_records_flag_time(self, tmp_path):
        spec = PotentialSpec(2, attractive_log_coefficient=4.0, spectral_band=16).to_dict()
        cfg = ExperimentConfig(kind="blowup", out=str(tmp_path), spec=spec, sigma=0.1,
                               dt=1e-3, T=0.3, grid=32, init="gaussian:0.08")
        run_experiment(cfg)
        res = load_manifest(tmp_path)["results"]
        assert res["halted"] and 0 < res["flag_time"] < 0.3
        assert (tmp_path / "report" / "max_density.svg").exists()

    def test_ld_zero(self, tmp_path):
        run_experiment(ExperimentConfig(kind="ld_zero", out=str(tmp_path), grid=32))
        res = load_manifest(tmp_path)["results"]
        assert res["converged"] and abs(res["value"]) < 1e-6

    def test_partition(self, tmp_path):
        run_experiment(ExperimentConfig(kind="partition_bound", out=str(tmp_path), grid=32,
                                        N_list=[4, 8], samples=2000, target_gamma=0.3))
        res = load_manifest(tmp_path)["results"]
        assert res["gamma"] == pytest.approx(0.3, rel=1e-10)
        assert set(res["estimates"]) == {"2", "4", "8"}

    def test_repulsive(self, tmp_path):
        spec = {"kind": "riesz", "dimension": 2, "riesz_exponent": 0.5, "spectral_band": 16}
        run_experiment(ExperimentConfig(kind="repulsive_lower_bound", out=str(tmp_path),
                                        spec=spec, N_list=[8, 16, 32], samples=20, grid=32,
                                        init="uniform"))
        res = load_manifest(tmp_path)["results"]
        assert set(res["min_D"]) == {"8", "16", "32"}


def test_pde_record_reports_free_energy(tmp_path):
    cfg = chaos_cfg(tmp_path, T=0.02, save_times=[0.0, 0.01, 0.02])
    _, record = harness.solve_pde_cached(cfg)
    assert len(record["free_energy"]) == 3 and record["free_energy_increases_at"] == []

import json
import os

import numpy as np
import pytest

from gfflab.cli import (
    EXIT_INSUFFICIENT,
    EXIT_OK,
    EXIT_VALIDATION,
    RunManifest,
    config_hash,
    emit_config,
    main,
    parse_config,
)
from gfflab.errors import ValidationError


def test_defaults():
    cfg = parse_config(None, {})
    assert cfg["d"] == 3
    assert cfg["R"] == 4
    assert cfg["scales"] == [8, 12, 16, 24, 32]


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text("")
    cfg = parse_config(str(p))
    assert cfg["d"] == 3 and cfg["R"] == 4


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"dd": 3}))
    with pytest.raises(ValidationError):
        parse_config(str(p))


def test_d6_rejected():
    with pytest.raises(ValidationError):
        parse_config(None, {"d": 6})


def test_type_mismatch_rejected():
    with pytest.raises(ValidationError):
        parse_config(None, {"trials": "many"})
    with pytest.raises(ValidationError):
        parse_config(None, {"scales": [4, "x"]})


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"seed": 1, "trials": 10}))
    cfg = parse_config(str(p), {"seed": 99})
    assert cfg["seed"] == 99
    assert cfg["trials"] == 10


def test_config_roundtrip(tmp_path):
    cfg = parse_config(None, {"seed": 5, "trials": 44})
    path = tmp_path / "echo.json"
    emit_config(cfg, str(path))
    again = parse_config(str(path))
    assert again == cfg


def test_manifest_hash_validates(tmp_path):
    cfg = parse_config(None, {"experiment": "one-arm", "scales": [1]})
    m = RunManifest(cfg, ["p1", "p2"])
    path = tmp_path / "manifest.json"
    m.save(str(path))
    loaded = RunManifest.load(str(path), cfg)
    assert loaded.pending() == ["p1", "p2"]
    tampered = dict(cfg, seed=123456)
    with pytest.raises(ValidationError):
        RunManifest.load(str(path), tampered)


def _tiny_estimate_config(tmp_path, **extra):
    cfg = {"experiment": "one-arm", "d": 3, "R": 2, "scales": [1, 2],
           "trials": 30, "seed": 7}
    cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_estimate_and_resume_byte_identical(tmp_path):
    cfg = _tiny_estimate_config(tmp_path)
    fresh = tmp_path / "fresh"
    assert main(["estimate", "one-arm", "--config", cfg,
                 "--out", str(fresh)]) == EXIT_OK
    fresh_bytes = (fresh / "records.jsonl").read_bytes()

    # simulate an interruption: drop the second point's records, mark pending
    broken = tmp_path / "broken"
    assert main(["estimate", "one-arm", "--config", cfg,
                 "--out", str(broken)]) == EXIT_OK
    manifest = json.loads((broken / "manifest.json").read_text())
    last_point = manifest["points"][-1]["id"]
    manifest["points"][-1]["status"] = "pending"
    (broken / "manifest.json").write_text(json.dumps(manifest))
    lines = (broken / "records.jsonl").read_text().splitlines(keepends=True)
    kept = [l for l in lines if json.loads(l)["experiment_id"] != last_point]
    (broken / "records.jsonl").write_text("".join(kept))

    assert main(["resume", "--out", str(broken)]) == EXIT_OK
    assert (broken / "records.jsonl").read_bytes() == fresh_bytes


def test_resume_complete_is_noop(tmp_path, capsys):
    cfg = _tiny_estimate_config(tmp_path)
    out = tmp_path / "run"
    main(["estimate", "one-arm", "--config", cfg, "--out", str(out)])
    before = (out / "records.jsonl").read_bytes()
    assert main(["resume", "--out", str(out)]) == EXIT_OK
    assert (out / "records.jsonl").read_bytes() == before


def test_resume_refuses_tampered_config(tmp_path):
    cfg = _tiny_estimate_config(tmp_path)
    out = tmp_path / "run"
    main(["estimate", "one-arm", "--config", cfg, "--out", str(out)])
    echo = json.loads((out / "config.json").read_text())
    echo["seed"] = 42424242
    (out / "config.json").write_text(json.dumps(echo))
    assert main(["resume", "--out", str(out)]) == EXIT_VALIDATION


def test_thread_count_invariance(tmp_path):
    cfg1 = _tiny_estimate_config(tmp_path, threads=1)
    outs = []
    for threads, name in ((1, "t1"), (4, "t4"), (8, "t8")):
        out = tmp_path / name
        assert main(["estimate", "one-arm", "--config", cfg1,
                     "--threads", str(threads), "--out", str(out)]) == EXIT_OK
        rows = [json.loads(l) for l in
                (out / "records.jsonl").read_text().splitlines()]
        outs.append([(r["experiment_id"], r["params"]["sign"], r["successes"])
                     for r in rows])
    assert outs[0] == outs[1] == outs[2]


def test_estimate_rejects_missing_keys(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"experiment": "crossing", "trials": 5}))
    out = tmp_path / "x"
    assert main(["estimate", "crossing", "--config", str(path),
                 "--out", str(out)]) == EXIT_VALIDATION


def test_estimate_rejects_d6(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"d": 6, "scales": [1], "trials": 5}))
    out = tmp_path / "x"
    assert main(["estimate", "one-arm", "--config", str(path),
                 "--out", str(out)]) == EXIT_VALIDATION


def test_green_subcommand(tmp_path, capsys):
    path = tmp_path / "g.json"
    path.write_text(json.dumps({
        "d": 3, "radius": 2, "entries": [[[0, 0, 0], [1, 0, 0]]],
        "absorbing": [[0, 1, 0]],
    }))
    assert main(["green", "--config", str(path)]) == EXIT_OK
    row = json.loads(capsys.readouterr().out.strip())
    assert row["value"] > 0


def test_sample_subcommand(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"d": 3, "radius": 1, "replicas": 3, "seed": 2}))
    out = tmp_path / "fields.npz"
    assert main(["sample", "--config", str(path), "--out", str(out)]) == EXIT_OK
    data = np.load(out)
    assert data["values"].shape == (3, 27)
    assert data["plus_open"].shape[0] == 3


def test_verify_kernel_subcommand(tmp_path):
    path = tmp_path / "k.json"
    path.write_text(json.dumps({"d": 3, "radius": 4}))
    out = tmp_path / "kernel.json"
    assert main(["verify", "kernel", "--config", str(path),
                 "--out", str(out)]) == EXIT_OK
    result = json.loads(out.read_text())
    assert result["kernel"] > 0


def test_fit_and_report(tmp_path):
    # synthetic one-arm records following a clean power law
    records = tmp_path / "records.jsonl"
    rng = np.random.default_rng(0)
    lines = []
    from gfflab.montecarlo import EstimateRecord

    for N in (4, 8, 16, 32):
        p = 0.8 * N ** -0.5
        succ = int(rng.binomial(100000, p))
        rec = EstimateRecord.from_counts(
            f"one-arm/d=3/N={N}/R=2", "one-arm",
            {"d": 3, "N": N, "R": 2, "sign": "+"}, 100000, succ, 0, 0.0)
        lines.append(rec.to_json())
    records.write_text("\n".join(lines) + "\nnot json\n")
    fit_out = tmp_path / "fits.json"
    assert main(["fit", str(records), "--out", str(fit_out)]) == EXIT_OK
    fits = json.loads(fit_out.read_text())["fits"]
    assert len(fits) == 1
    assert abs(fits[0]["slope"] - (-0.5)) < 0.05
    assert fits[0]["pass"]

    rep_dir = tmp_path / "report"
    assert main(["report", str(records), "--out", str(rep_dir)]) == EXIT_OK
    assert (rep_dir / "one-arm.csv").exists()
    assert (rep_dir / "fits.csv").exists()
    assert "PASS" in (rep_dir / "fits.csv").read_text()


def test_report_empty_records(tmp_path):
    records = tmp_path / "empty.jsonl"
    records.write_text("")
    assert main(["report", str(records), "--out", str(tmp_path / "rep")]) == EXIT_OK

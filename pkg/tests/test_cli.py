import json
import re

import numpy as np
import pytest

from convlora.checkpoint import AdapterCheckpoint, file_sha256, load_base
from convlora.cli import PLACEMENTS, main
from convlora.config import ConfigError, RunConfig
from convlora.data import list_domains

SMALL = {
    "model": {"depth": 2, "base_channels": 4},
    "pretrain": {"epochs": 3, "batch_size": 4, "lr": 0.003},
    "esh": {"epochs": 2, "batch_size": 4},
    "adapt": {"epochs": 1, "target_sample_count": 4, "batch_size": 2, "lr": 0.001},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert run("gen-data", "--out", root / "data", "--seed", 3, "--size", 32, "--n-train", 8, "--n-test", 4) == 0
    assert run("pretrain", "--config", cfg, "--data", root / "data", "--out", root / "pre") == 0
    assert run("train-esh", "--config", cfg, "--base", root / "pre/base.clra", "--data", root / "data", "--out", root / "esh") == 0
    return root


def _adapt(workdir, out, *extra):
    return run(
        "adapt", "--config", workdir / "small.json", "--base", workdir / "esh/base.clra",
        "--data", workdir / "data", "--out", out, *extra,
    )


def test_gen_data_layout(workdir):
    domains = list_domains(workdir / "data")
    assert [r for _, r in domains].count("source") == 1 and len(domains) == 6
    assert (workdir / "data" / "config.json").exists()
    assert not list(workdir.glob(".*tmp-*"))


def test_pretrain_artifacts(workdir):
    log = (workdir / "pre" / "train.log").read_text()
    assert re.search(r"epoch=1 .*loss=", log) and "val_sds=" in log
    echoed = json.loads((workdir / "pre" / "config.json").read_text())
    assert echoed["model"]["base_channels"] == 4 and echoed["pretrain"]["epochs"] == 3
    assert load_base(workdir / "esh" / "base.clra")[1]["phase"] == "esh"


def test_unknown_config_key_fails(tmp_path, workdir):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pretrain": {"epochz": 3}}))
    assert run("pretrain", "--config", bad, "--data", workdir / "data", "--out", tmp_path / "o") == 1
    assert not (tmp_path / "o").exists()
    with pytest.raises(ConfigError, match="unknown config sections"):
        RunConfig.from_dict({"optimizer": {}})


def test_config_roundtrip():
    cfg = RunConfig.from_dict(SMALL)
    assert RunConfig.from_dict(json.loads(cfg.to_json())).to_json() == cfg.to_json()
    cfg.override("adapt", rank=4, lr=None)
    assert cfg.adapt.rank == 4 and cfg.adapt.lr == 0.001


def test_missing_base_exits_nonzero(tmp_path, workdir):
    assert run("params", "--base", tmp_path / "nope.clra") == 1


def test_adapt_eval_merge(workdir, capsys):
    out = workdir / "ad"
    assert _adapt(workdir, out, "--target-domain", "strong", "--seeds", 2) == 0
    ckpts = sorted((out / "strong").glob("seed*.clra"))
    assert [p.name for p in ckpts] == ["seed0.clra", "seed1.clra"]
    log = (out / "adapt.log").read_text()
    for p in ckpts:
        assert f"sha256={file_sha256(p)}" in log
    assert json.loads((out / "config.json").read_text())["adapt"]["target_sample_count"] == 4

    capsys.readouterr()
    assert run("eval", "--base", workdir / "esh/base.clra", "--adapter", *ckpts, "--data", workdir / "data", "--out", workdir / "ev") == 0
    printed = capsys.readouterr().out
    assert "summary domain=strong seeds=2 sds_mean=" in printed
    report = (workdir / "ev" / "report.txt").read_text()
    adapted = _image_scores(report, "seed=0")
    assert len(adapted) == 4

    merged = workdir / "merged.clra"
    assert run("merge", "--base", workdir / "esh/base.clra", "--adapter", ckpts[0], "--out", merged) == 0
    assert run("eval", "--base", merged, "--data", workdir / "data", "--domain", "strong", "--out", workdir / "evm") == 0
    merged_scores = _image_scores((workdir / "evm" / "report.txt").read_text(), "model=merged")
    assert adapted.keys() == merged_scores.keys()
    for k in adapted:
        assert abs(adapted[k][0] - merged_scores[k][0]) <= 1e-5
        assert abs(adapted[k][1] - merged_scores[k][1]) <= 1e-5


def _image_scores(report, tag):
    pat = re.compile(rf"^image domain=(\S+) {re.escape(tag)} id=(\S+) sds=(\S+) dice=(\S+)$")
    out = {}
    for line in report.splitlines():
        m = pat.match(line)
        if m:
            out[(m[1], m[2])] = (float(m[3]), float(m[4]))
    return out


def test_adapt_is_byte_deterministic(tmp_path, workdir):
    for name in ("a", "b"):
        assert _adapt(workdir, tmp_path / name, "--target-domain", "mild", "--seeds", 1) == 0
    a = (tmp_path / "a" / "mild" / "seed0.clra").read_bytes()
    assert a == (tmp_path / "b" / "mild" / "seed0.clra").read_bytes()
    assert (tmp_path / "a" / "adapt.log").read_bytes() == (tmp_path / "b" / "adapt.log").read_bytes()


def test_worker_processes_match_inline(tmp_path, workdir, monkeypatch):
    assert _adapt(workdir, tmp_path / "one", "--target-domain", "mild", "severe", "--seeds", 1) == 0
    monkeypatch.setenv("CONVLORA_THREADS", "2")
    assert _adapt(workdir, tmp_path / "two", "--target-domain", "mild", "severe", "--seeds", 1) == 0
    for d in ("mild", "severe"):
        assert (tmp_path / "one" / d / "seed0.clra").read_bytes() == (tmp_path / "two" / d / "seed0.clra").read_bytes()
    monkeypatch.setenv("CONVLORA_THREADS", "zero")
    assert _adapt(workdir, tmp_path / "bad", "--target-domain", "mild", "--seeds", 1) == 1


def test_blocks_subset_trains_fewer_factors(tmp_path, workdir):
    counts = {}
    for blocks in ("1", "all"):
        assert _adapt(workdir, tmp_path / blocks, "--target-domain", "mild", "--seeds", 1, "--blocks", blocks) == 0
        ckpt = AdapterCheckpoint.load(tmp_path / blocks / "mild" / "seed0.clra")
        counts[blocks] = sum(v.size for v in ckpt.factors.values())
    assert 0 < counts["1"] < counts["all"]


def test_adabn_off_keeps_base_statistics(tmp_path, workdir):
    assert _adapt(workdir, tmp_path / "off", "--target-domain", "mild", "--seeds", 1, "--adabn", "off") == 0
    ckpt = AdapterCheckpoint.load(tmp_path / "off" / "mild" / "seed0.clra")
    assert ckpt.adabn is False
    base = load_base(workdir / "esh" / "base.clra")[0].buffers()
    for k, v in ckpt.bn_stats.items():
        assert np.array_equal(v, base[k]), k


def test_params_reports(workdir, capsys):
    capsys.readouterr()
    assert run("params", "--base", workdir / "esh/base.clra") == 0
    assert "reduction: 100.00%" in capsys.readouterr().out
    assert run("params", "--base", workdir / "esh/base.clra", "--adapter-spec", "2,all") == 0
    text = capsys.readouterr().out
    reduction = float(re.search(r"reduction: (\S+)%", text)[1])
    assert 0 < reduction < 100
    assert run("params", "--base", workdir / "esh/base.clra", "--adapter-spec", "two") == 1


def test_matrix_table(tmp_path, workdir, capsys):
    # the placement grid needs four encoder blocks
    deep = tmp_path / "deep.json"
    deep.write_text(json.dumps({**SMALL, "model": {"depth": 4, "base_channels": 3}}))
    assert run("pretrain", "--config", deep, "--data", workdir / "data", "--out", tmp_path / "pre") == 0
    args = ("--config", deep, "--data", workdir / "data")
    assert run("train-esh", *args, "--base", tmp_path / "pre/base.clra", "--out", tmp_path / "esh") == 0
    capsys.readouterr()
    assert run(
        "adapt", *args, "--base", tmp_path / "esh/base.clra", "--out", tmp_path / "m",
        "--target-domain", "mild", "extreme", "--seeds", 2, "--matrix",
    ) == 0
    text = (tmp_path / "m" / "matrix.txt").read_text()
    assert text == capsys.readouterr().out
    lines = text.splitlines()
    labels = [p[2] for p in PLACEMENTS]
    assert lines[1].split() == ["domain"] + labels
    rows = {ln.split()[0]: ln.split()[1:] for ln in lines[2:-1]}
    assert set(rows) == {"mild", "extreme", "mean"}
    assert all(len(v) == 5 for v in rows.values())
    assert lines[-1].split()[0] == "best" and lines[-1].split()[1] in labels
    for lab in labels:
        for d in ("mild", "extreme"):
            assert len(list((tmp_path / "m" / lab / d).glob("seed*.clra"))) == 2
    means = [float(x) for x in rows["mean"]]
    # the table rounds to 4 places while "best" compares unrounded means
    assert means[labels.index(lines[-1].split()[1])] == max(means)

import csv
import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import rxn
from pathmed.cli import effect_rows, main
from pathmed.effects import summarize
from pathmed.exceptions import InputError
from pathmed.graph import write_reactions
from pathmed.io import json_dumps, load_inputs, read_chain, read_config, read_table, write_chain, write_csv
from pathmed.sampler import ChainConfig, run_chain

METS = [f"m{i}" for i in range(1, 11)]


def _reactions(cycle=True):
    r = [
        rxn("r1", ["m1"], ["m2"], ["PA"]),
        rxn("r2", ["m2"], ["m3"], ["PA"]),
        rxn("r3", ["m4"], ["m5"], ["PB"]),
        rxn("r4", ["m5"], ["m6"], ["PB"]),
        rxn("r5", ["m7"], ["m8", "m9"], ["PC"]),
    ]
    if cycle:
        r.append(rxn("r6", ["m3"], ["m1"], ["PA"]))
    return r


def _write_data(path, n=40, seed=0, mets=METS, drop=None):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    age = rng.standard_normal(n)
    M = rng.standard_normal((n, len(mets)))
    M[:, 0] += 0.8 * x
    M[:, 1] += 0.5 * M[:, 0]
    y = 0.5 * x + 0.8 * M[:, 1] + 0.2 * age + rng.standard_normal(n)
    cols = [m for m in mets if m != drop]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "exposure", "outcome", "age"] + cols)
        for i in range(n):
            w.writerow([f"s{i}", repr(float(x[i])), repr(float(y[i])), repr(float(age[i]))]
                       + [repr(float(M[i, j])) for j, m in enumerate(mets) if m != drop])


@pytest.fixture
def toy(tmp_path):
    data = tmp_path / "data.csv"
    pw = tmp_path / "pathways.jsonl"
    _write_data(data)
    write_reactions(pw, _reactions())
    return tmp_path, data, pw


def _diag(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


FIT = ["--iters", "60", "--burnin", "20", "--seed", "7"]


# ---------------------------------------------------------------------------
# file formats


def test_read_table_splits_columns(toy):
    _, data, pw = toy
    table, graph, unmapped = load_inputs(data, pw)
    assert table.covariate_names == ("age",)
    assert table.metabolite_names == tuple(METS)
    assert unmapped == ["m10"]
    assert graph.K == 10 and graph.L == 3
    t2 = read_table(data, covariates=[])
    assert t2.metabolite_names == ("age", *METS)
    with pytest.raises(InputError, match="covariate columns not found"):
        read_table(data, covariates=["sex"])


def test_read_table_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,outcome,exposure,m1\ns1,1,2,3\n")
    with pytest.raises(InputError, match="first three columns"):
        read_table(p)
    p.write_text("id,exposure,outcome,m1\ns1,1,2,abc\n")
    with pytest.raises(InputError, match="m1"):
        read_table(p)
    p.write_text("id,exposure,outcome,m1\ns1,1,2\n")
    with pytest.raises(InputError, match="fields"):
        read_table(p)
    p.write_text("id,exposure,outcome,m1\ns1,1,2,\n")
    with pytest.raises(InputError, match="missing value"):
        read_table(p)
    p.write_text("id,exposure,outcome,m1\ns1,1,2,inf\n")
    with pytest.raises(InputError, match="non-finite"):
        read_table(p)


def test_chain_archive_round_trip(toy):
    tmp, data, pw = toy
    table, graph, _ = load_inputs(data, pw)
    chain = run_chain(table.dataset(), graph, ChainConfig(n_iter=40, n_burnin=10))
    write_chain(tmp / "arch", chain, {"note": "x"})
    back, meta = read_chain(tmp / "arch")
    assert meta == {"note": "x"}
    for name in ("psi", "phi", "delta", "alpha", "alpha_Z", "gamma", "sigma_k2", "beta", "beta_Z", "theta", "sigma2", "rho",
                 "w_ptr", "w_pathway", "w_metabolite", "w_value", "edges"):
        assert np.array_equal(getattr(back, name), getattr(chain, name)), name
    assert back.hyper == chain.hyper and back.accept == chain.accept
    a = json_dumps(summarize(chain).to_dict())
    b = json_dumps(summarize(back).to_dict())
    assert a == b
    # rewriting replaces the archive in place
    write_chain(tmp / "arch", chain, {"note": "y"})
    assert read_chain(tmp / "arch")[1] == {"note": "y"}
    assert sorted(p.name for p in tmp.iterdir() if p.name.startswith(".")) == []


def test_read_chain_rejects_foreign_directories(tmp_path):
    with pytest.raises(InputError, match="manifest"):
        read_chain(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(InputError, match="format"):
        read_chain(tmp_path)


def test_read_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\niters = 100\nfdr-q=0.1  # trailing\n\nstandardize = yes\n")
    assert read_config(p) == {"iters": "100", "fdr_q": "0.1", "standardize": "yes"}
    p.write_text("nonsense\n")
    with pytest.raises(InputError, match=":1"):
        read_config(p)


def test_write_csv_formats(tmp_path):
    write_csv(tmp_path / "o.csv", [{"a": 0.1, "b": float("nan")}, {"a": 1 / 3}], ["a", "b"])
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines == ["a,b", "0.10000000000000001,", "0.33333333333333331,"]


# ---------------------------------------------------------------------------
# validate


def test_validate_report(toy, capsys):
    tmp, data, pw = toy
    assert main(["validate", "--data", str(data), "--pathways", str(pw), "--out", str(tmp / "v.json")]) == 0
    rep = json.loads((tmp / "v.json").read_text())
    assert rep["issues"] == []
    assert rep["graph"]["removed_edges"] == 1
    assert rep["coverage"]["unmapped"] == ["m10"]
    assert any("m10" in w for w in rep["warnings"])
    assert rep["standardization"]["standardized"] is False
    assert (rep["n_samples"], rep["n_metabolites"], rep["n_pathways"]) == (40, 10, 3)


def test_validate_clean_inputs_have_no_warnings(tmp_path, capsys):
    mets = METS[:9]
    data = tmp_path / "d.csv"
    _write_data(data, mets=mets)
    # standardize the metabolite block in place
    rows = list(csv.reader(open(data)))
    M = np.array([[float(v) for v in r[4:]] for r in rows[1:]])
    M = (M - M.mean(0)) / M.std(0, ddof=1)
    with open(data, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(rows[0])
        for r, m in zip(rows[1:], M):
            w.writerow(r[:4] + [repr(float(v)) for v in m])
    pw = tmp_path / "p.jsonl"
    write_reactions(pw, _reactions(cycle=False))
    assert main(["validate", "--data", str(data), "--pathways", str(pw)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["issues"] == [] and rep["warnings"] == []
    assert rep["graph"]["removed_edges"] == 0


def test_missing_metabolite_column_exits_2(tmp_path, capsys):
    data = tmp_path / "d.csv"
    _write_data(data, drop="m5")
    pw = tmp_path / "p.jsonl"
    write_reactions(pw, _reactions())
    code = main(["fit", "--data", str(data), "--pathways", str(pw), "--out-dir", str(tmp_path / "o"), *FIT])
    assert code == 2
    d = _diag(capsys)
    assert d["error"] == "input" and "m5" in d["message"]


def test_input_error_paths_exit_2(toy, capsys):
    tmp, data, pw = toy
    cases = [
        ["fit", "--data", str(data), "--pathways", str(pw), "--out-dir", str(tmp / "o")],  # no seed
        ["fit", "--data", str(tmp / "nope.csv"), "--pathways", str(pw), "--out-dir", str(tmp / "o"), "--seed", "1"],
        ["fit", "--data", str(data), "--pathways", str(pw), "--out-dir", str(tmp / "o"), "--seed", "1", "--iters", "0"],
        ["simulate", "--scenario", "S9", "--seed", "1", "--out-dir", str(tmp / "o")],
        ["bogus"],
    ]
    for argv in cases:
        assert main(argv) == 2, argv
        assert _diag(capsys)["error"] == "input"


# ---------------------------------------------------------------------------
# fit / summarize / effects


def _fit(tmp, data, pw, out, *extra):
    return main(["fit", "--data", str(data), "--pathways", str(pw), "--out-dir", str(out), *FIT, *extra])


def test_fit_outputs_and_determinism(toy):
    tmp, data, pw = toy
    assert _fit(tmp, data, pw, tmp / "a", "--standardize") == 0
    assert _fit(tmp, data, pw, tmp / "b", "--standardize") == 0
    summ = json.loads((tmp / "a" / "summary.json").read_text())
    for p in summ["pathways"]:
        assert 0 <= p["inclusion_prob"] <= 1
    for m in summ["metabolites"]:
        assert 0 <= m["psi_prob"] <= 1 and 0 <= m["phi_prob"] <= 1
    assert (tmp / "a" / "summary.json").read_bytes() == (tmp / "b" / "summary.json").read_bytes()
    cmp = filecmp.dircmp(tmp / "a" / "chain", tmp / "b" / "chain")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for f in cmp.common_files:
        assert (tmp / "a" / "chain" / f).read_bytes() == (tmp / "b" / "chain" / f).read_bytes()
    _, meta = read_chain(tmp / "a" / "chain")
    assert len(meta["standardization"]["mean"]) == 10


def test_threads_do_not_change_output(toy):
    tmp, data, pw = toy
    assert _fit(tmp, data, pw, tmp / "t1", "--threads", "1") == 0
    assert _fit(tmp, data, pw, tmp / "t4", "--threads", "4") == 0
    for f in ["summary.json", "chain/manifest.json", "chain/theta.csv", "chain/weights.csv"]:
        assert (tmp / "t1" / f).read_bytes() == (tmp / "t4" / f).read_bytes()


def test_summarize_reproduces_fit_summary(toy, capsys):
    tmp, data, pw = toy
    assert _fit(tmp, data, pw, tmp / "a") == 0
    assert main(["summarize", "--chain", str(tmp / "a" / "chain"), "--out", str(tmp / "s.json")]) == 0
    assert (tmp / "s.json").read_bytes() == (tmp / "a" / "summary.json").read_bytes()


def test_effects_contrast_scales_linearly(toy):
    tmp, data, pw = toy
    assert _fit(tmp, data, pw, tmp / "a") == 0
    ch = str(tmp / "a" / "chain")
    assert main(["effects", "--chain", ch, "--out", str(tmp / "e1.csv")]) == 0
    assert main(["effects", "--chain", ch, "--x", "3", "--x-star", "1", "--out", str(tmp / "e2.csv")]) == 0
    e1 = json.loads((tmp / "e1.json").read_text())["effects"]
    e2 = json.loads((tmp / "e2.json").read_text())["effects"]
    assert [r["effect"] for r in e1][:3] == ["NDE", "NIE", "TE"]
    for a, b in zip(e1, e2):
        for k in ("mean", "lower", "upper"):
            assert b[k] == pytest.approx(2 * a[k], rel=1e-12, abs=1e-14)
    with open(tmp / "e1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 + 3 and float(rows[0]["mean"]) == pytest.approx(e1[0]["mean"], rel=1e-15)


def test_empty_chain_exits_2(toy, capsys):
    tmp, data, pw = toy
    table, graph, _ = load_inputs(data, pw)
    chain = run_chain(table.dataset(), graph, ChainConfig(n_iter=3, n_burnin=0))
    chain.psi = chain.psi[:0]
    for name in ("phi", "delta", "alpha", "alpha_Z", "gamma", "sigma_k2", "beta", "beta_Z", "theta", "sigma2", "rho"):
        setattr(chain, name, getattr(chain, name)[:0])
    chain.w_ptr = chain.w_ptr[:1]
    chain.w_pathway = chain.w_pathway[:0]
    chain.w_metabolite = chain.w_metabolite[:0]
    chain.w_value = chain.w_value[:0]
    write_chain(tmp / "empty", chain)
    assert main(["effects", "--chain", str(tmp / "empty")]) == 2
    assert "no kept draws" in _diag(capsys)["message"]
    assert main(["summarize", "--chain", str(tmp / "empty")]) == 2


def test_effect_rows_match_summary(toy):
    tmp, data, pw = toy
    table, graph, _ = load_inputs(data, pw)
    chain = run_chain(table.dataset(), graph, ChainConfig(n_iter=50, n_burnin=10))
    rows = effect_rows(chain)
    summ = summarize(chain)
    for r in rows[:3]:
        assert (r["mean"], r["lower"], r["upper"]) == summ.effects[r["effect"]]


def test_sampler_failure_exits_3(toy, capsys, monkeypatch):
    from pathmed import sampler
    from pathmed.exceptions import NumericalError

    def boom(*a, **k):
        raise NumericalError("Cholesky factorization failed for beta")

    monkeypatch.setattr(sampler, "update_beta_betaZ", boom)
    tmp, data, pw = toy
    assert _fit(tmp, data, pw, tmp / "x") == 3
    d = _diag(capsys)
    assert d["error"] == "runtime" and d["iteration"] == 0 and d["step"] == "8-beta"


# ---------------------------------------------------------------------------
# config files


def test_config_file_with_flag_override(toy):
    tmp, data, pw = toy
    cfg = tmp / "run.cfg"
    cfg.write_text(f"data = {data}\npathways = {pw}\nseed = 7\niters = 60\nburnin = 20\nthreads = 2\n")
    assert main(["fit", "--config", str(cfg), "--out-dir", str(tmp / "c")]) == 0
    assert _fit(tmp, data, pw, tmp / "d") == 0
    assert (tmp / "c" / "summary.json").read_bytes() == (tmp / "d" / "summary.json").read_bytes()
    assert main(["fit", "--config", str(cfg), "--iters", "40", "--out-dir", str(tmp / "e")]) == 0
    assert json.loads((tmp / "e" / "summary.json").read_text())["sampler"]["n_iter"] == 40


def test_config_unknown_key_exits_2(toy, capsys):
    tmp, data, pw = toy
    cfg = tmp / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert main(["validate", "--config", str(cfg)]) == 2
    assert "colour" in _diag(capsys)["message"]


# ---------------------------------------------------------------------------
# simulate


def test_simulate_smoke(tmp_path):
    out = tmp_path / "sim"
    argv = ["simulate", "--scenario", "S2", "--replicates", "2", "--iters", "40", "--burnin", "20",
            "--seed", "3", "--n-mc", "20000", "--out-dir", str(out)]
    assert main(argv + ["--misspecify-adjacency"]) == 0
    with open(out / "effects_table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["effect"] for r in rows] == ["Pathway A", "Pathway B", "Pathway C", "Pathway D", "Overall", "Total"]
    assert all(r["true_value"] and r["relative_bias"] and r["cp"] for r in rows)
    assert all(r["specification"] == "misspecified" for r in rows)
    with open(out / "selection_rates.csv") as fh:
        rates = list(csv.DictReader(fh))
    assert len(rates) == 6 and all(r["value"] for r in rates)
    study = json.loads((out / "study.json").read_text())
    assert study["misannotation"] is True
    assert study["studies"][0]["misannotated_fraction"] > 0


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "pathmed.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "pathmed" in r.stdout
    r = subprocess.run([sys.executable, "-m", "pathmed.cli", "effects", "--chain", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 2
    assert json.loads(r.stderr.strip().splitlines()[-1])["error"] == "input"

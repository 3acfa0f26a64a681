"""CSV ingestion, option layering, application pipeline, CLI entry point."""

import json
import math

import numpy as np
import pytest

from spatialbias import (
    CovarianceSpec,
    CsvParseError,
    DataSet,
    GaussianPairSpec,
    InvalidArgumentError,
    LocationSet,
    SchemaError,
    WeightConfig,
    application_pipeline,
    emit_tables,
    generate,
    main,
    model_spec,
    read_spatial_csv,
    read_weight_csv,
    run_experiment,
    sample_locations,
    write_dataset_csv,
)
from spatialbias.cli import (
    OUT_ENV_VAR,
    _coerce,
    default_application_schemes,
    load_config,
    render_application_csv,
    resolve_options,
)
from spatialbias.montecarlo import MODEL_MENU

from test_montecarlo import scenario1_config

HEADER = "x,y,Y,A,U\n"


def write_csv(tmp_path, body, name="data.csv", header=HEADER):
    path = tmp_path / name
    path.write_text(header + body)
    return path


def m6_dataset(n=80, seed=4, rho=0.0):
    pair = GaussianPairSpec(
        rho=rho, sd_treat=1.0, sd_conf=1.0,
        corr_treat=CovarianceSpec("exponential", 1.0),
        corr_conf=CovarianceSpec("exponential", 1.0),
    )
    spec = model_spec(
        "m6", effect_treat=5.0, effect_treat_lag=3.0, effect_conf=2.5,
        effect_conf_lag=2.0, pair=pair,
        weight_treat=WeightConfig("knn", k=4),
        weight_conf=WeightConfig("knn", k=4),
        error=CovarianceSpec("exponential", 2.0, variance=1.0),
    )
    return generate(spec, sample_locations(n, seed=seed), seed=seed + 1)


class TestReadSpatialCsv:
    def test_happy_path(self, tmp_path):
        path = write_csv(tmp_path, "0,0,1.5,1,0.2\n1,0,2.5,0,0.4\n0,1,3.5,1,0.6\n")
        data = read_spatial_csv(path)
        assert len(data) == 3
        np.testing.assert_array_equal(data.outcome, [1.5, 2.5, 3.5])
        np.testing.assert_array_equal(data.treatment, [1.0, 0.0, 1.0])
        np.testing.assert_array_equal(data.confounder, [0.2, 0.4, 0.6])
        assert data.ingest_report == {"rows": 3, "dropped_missing": 0, "jittered": 0}

    def test_missing_outcome_column_named(self, tmp_path):
        path = write_csv(tmp_path, "0,0,1\n1,1,0\n", header="x,y,A\n")
        with pytest.raises(SchemaError, match="'Y'.*'outcome'"):
            read_spatial_csv(path)

    def test_parse_error_carries_file_row(self, tmp_path):
        path = write_csv(tmp_path, "0,0,1.5,1,0.2\n1,0,oops,0,0.4\n")
        with pytest.raises(CsvParseError) as err:
            read_spatial_csv(path)
        assert err.value.row == 3

    def test_missing_core_rows_dropped(self, tmp_path):
        path = write_csv(tmp_path, "0,0,1.5,1,0.2\n1,0,,0,0.4\n0,1,3.5,1,0.6\n")
        with pytest.warns(UserWarning, match="dropped 1 rows"):
            data = read_spatial_csv(path)
        assert len(data) == 2
        assert data.ingest_report["dropped_missing"] == 1

    def test_all_missing_confounder_becomes_absent(self, tmp_path):
        path = write_csv(tmp_path, "0,0,1.5,1,\n1,0,2.5,0,na\n0,1,3.5,1,NaN\n")
        data = read_spatial_csv(path)
        assert data.confounder is None
        assert len(data) == 3

    def test_partially_missing_confounder_drops_rows(self, tmp_path):
        path = write_csv(tmp_path, "0,0,1.5,1,0.2\n1,0,2.5,0,\n0,1,3.5,1,0.6\n")
        with pytest.warns(UserWarning):
            data = read_spatial_csv(path)
        assert len(data) == 2

    def test_duplicate_coordinates_jittered_order_free(self, tmp_path):
        body_ab = "1,2,5.0,1,0.1\n1,2,3.0,0,0.2\n0,0,1.0,1,0.3\n"
        body_ba = "1,2,3.0,0,0.2\n1,2,5.0,1,0.1\n0,0,1.0,1,0.3\n"
        with pytest.warns(UserWarning, match="duplicate"):
            first = read_spatial_csv(write_csv(tmp_path, body_ab, "a.csv"))
        with pytest.warns(UserWarning, match="duplicate"):
            second = read_spatial_csv(write_csv(tmp_path, body_ba, "b.csv"))
        assert first.ingest_report["jittered"] == 1
        # The same logical row gets the same jitter in either file order.
        x_of = lambda d: {float(o): float(x) for o, x in zip(d.outcome, d.loc.points[:, 0])}
        assert x_of(first) == x_of(second)
        assert x_of(first)[3.0] == 1.0
        assert x_of(first)[5.0] == pytest.approx(1.000001)

    def test_custom_column_map(self, tmp_path):
        path = write_csv(tmp_path, "0,0,9,1\n1,1,8,0\n", header="lon,lat,resp,dose\n")
        data = read_spatial_csv(path, {"x": "lon", "y": "lat",
                                       "outcome": "resp", "treatment": "dose"})
        np.testing.assert_array_equal(data.outcome, [9.0, 8.0])
        assert data.confounder is None

    def test_explicit_confounder_must_exist(self, tmp_path):
        path = write_csv(tmp_path, "0,0,9,1\n1,1,8,0\n", header="x,y,Y,A\n")
        with pytest.raises(SchemaError, match="confounder"):
            read_spatial_csv(path, {"confounder": "U"})

    def test_unknown_role_rejected(self, tmp_path):
        path = write_csv(tmp_path, "0,0,1,1,0\n1,1,2,0,0\n")
        with pytest.raises(InvalidArgumentError):
            read_spatial_csv(path, {"mediator": "M"})

    def test_empty_and_headerless_files(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        with pytest.raises(SchemaError):
            read_spatial_csv(empty)
        headers_only = write_csv(tmp_path, "", "h.csv")
        with pytest.raises(SchemaError, match="no data rows"):
            read_spatial_csv(headers_only)

    def test_round_trip_from_generator(self, tmp_path):
        data = m6_dataset(n=30)
        path = tmp_path / "gen.csv"
        write_dataset_csv(data, path)
        back = read_spatial_csv(path)
        np.testing.assert_allclose(back.outcome, data.outcome, atol=1e-12)
        np.testing.assert_allclose(back.treatment, data.treatment, atol=1e-12)
        np.testing.assert_allclose(back.confounder, data.confounder, atol=1e-12)


class TestOptionLayers:
    def test_coerce(self):
        assert _coerce("true") is True
        assert _coerce("OFF") is False
        assert _coerce("42") == 42
        assert _coerce("0.5") == 0.5
        assert _coerce("knn") == "knn"

    def test_load_config_sections(self, tmp_path):
        cfg = tmp_path / "conf.ini"
        cfg.write_text(
            "[common]\nout-dir = /tmp/results\n\n"
            "[experiment]\ntable = T3\nreplicates = 25\nthreads = 2\n"
        )
        merged = load_config(str(cfg), "experiment")
        assert merged == {"out_dir": "/tmp/results", "table": "T3",
                          "replicates": 25, "threads": 2}
        assert load_config(str(cfg), "simulate") == {"out_dir": "/tmp/results"}
        assert load_config(None, "experiment") == {}

    def test_load_config_missing_file(self):
        with pytest.raises(InvalidArgumentError):
            load_config("/nonexistent/conf.ini", "simulate")

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "conf.ini"
        cfg.write_text("[simulate]\nmodle = m2\n")
        with pytest.raises(InvalidArgumentError, match="modle"):
            resolve_options("simulate", {"config": str(cfg), "seed": 1})

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "conf.ini"
        cfg.write_text("[simulate]\nn = 30\nseed = 7\n")
        opts = resolve_options("simulate", {"config": str(cfg), "n": 25})
        assert opts.n == 25
        assert opts.seed == 7

    def test_stochastic_commands_require_seed(self):
        with pytest.raises(InvalidArgumentError, match="seed"):
            resolve_options("simulate", {})
        resolve_options("fit", {})  # deterministic commands do not

    def test_out_dir_from_environment(self, monkeypatch):
        monkeypatch.setenv(OUT_ENV_VAR, "/tmp/fromenv")
        assert resolve_options("experiment", {"seed": 1}).out_dir == "/tmp/fromenv"
        monkeypatch.delenv(OUT_ENV_VAR)
        assert resolve_options("experiment", {"seed": 1}).out_dir == "."
        assert resolve_options(
            "experiment", {"seed": 1, "out_dir": "given"}
        ).out_dir == "given"


class TestApplicationPipeline:
    def test_menu_block_per_scheme(self):
        table = application_pipeline(m6_dataset(), fix_nugget=True)
        assert table.schemes == ("knn4", "dist50")
        menu = [m for m, _ in MODEL_MENU]
        for scheme in table.schemes:
            block = [r for r in table.rows if r.scheme == scheme]
            assert [r.model for r in block] == menu
            ok = [r for r in block if not r.failed]
            assert ok, "every model failed"
            best = [r for r in ok if r.best]
            assert len(best) == 1
            assert best[0].aic == min(r.aic for r in ok)
            for r in ok:
                assert r.ci_low <= r.estimate <= r.ci_high

    def test_requires_confounder(self):
        data = m6_dataset(n=30)
        stripped = DataSet(loc=data.loc, outcome=data.outcome,
                           treatment=data.treatment)
        with pytest.raises(InvalidArgumentError, match="confounder"):
            application_pipeline(stripped)

    def test_row_order_invariance(self):
        data = m6_dataset(n=50)
        perm = np.random.default_rng(0).permutation(50)
        shuffled = DataSet(
            loc=LocationSet(data.loc.points[perm], data.loc.bounds),
            outcome=data.outcome[perm],
            treatment=data.treatment[perm],
            confounder=data.confounder[perm],
        )
        base = DataSet(loc=data.loc, outcome=data.outcome,
                       treatment=data.treatment, confounder=data.confounder)
        first = render_application_csv([application_pipeline(base, fix_nugget=True)])
        second = render_application_csv([application_pipeline(shuffled, fix_nugget=True)])
        assert first == second

    def test_constant_confounder_flags_rows(self):
        data = m6_dataset(n=40)
        broken = DataSet(loc=data.loc, outcome=data.outcome,
                         treatment=data.treatment,
                         confounder=np.ones(40))
        table = application_pipeline(
            broken, [("knn4", WeightConfig("knn", k=4))], fix_nugget=True)
        by_model = {r.model: r for r in table.rows}
        assert by_model["T+DSC"].failed
        assert math.isnan(by_model["T+DSC"].aic)
        assert not by_model["T+I"].failed
        assert len(table.rows) == 7

    def test_custom_scheme_parameters(self):
        schemes = default_application_schemes(k=2, threshold=0.75)
        assert schemes[0][0] == "knn2"
        assert schemes[1][0] == "dist75"
        assert schemes[0][1].k == 2
        assert schemes[1][1].percentile == 0.75


class TestEmitTables:
    def make_summary(self):
        return run_experiment(scenario1_config(replicates=6, n_locations=30,
                                               table="T1"))

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            emit_tables([], out_dir=str(tmp_path))

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            emit_tables([self.make_summary()], formats=("yaml",),
                        out_dir=str(tmp_path))

    def test_stray_type_rejected(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            emit_tables([object()], out_dir=str(tmp_path))

    def test_mixed_outputs_deterministic(self, tmp_path):
        summary = self.make_summary()
        app = application_pipeline(
            m6_dataset(n=40), [("knn4", WeightConfig("knn", k=4))],
            fix_nugget=True)
        d1, d2 = tmp_path / "one", tmp_path / "two"
        w1 = emit_tables([summary, app], out_dir=str(d1))
        w2 = emit_tables([summary, app], out_dir=str(d2))
        assert set(w1) == {"csv", "json", "markdown"}
        for fmt in w1:
            a = open(w1[fmt], "rb").read()
            b = open(w2[fmt], "rb").read()
            assert a == b
        text = open(w1["csv"]).read()
        assert text.startswith("table,cell,")
        assert "scheme,model," in text
        md = open(w1["markdown"]).read()
        assert "## T1" in md and "## application (knn4)" in md


class TestMainEntry:
    def test_simulate_happy_and_deterministic(self, tmp_path, capsys):
        out1 = tmp_path / "a.csv"
        out2 = tmp_path / "b.csv"
        args = ["simulate", "--model", "m2", "--n", "40", "--seed", "3"]
        assert main(args + ["--out", str(out1)]) == 0
        assert main(args + ["--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        assert "wrote 40 rows" in capsys.readouterr().out
        data = read_spatial_csv(out1)
        assert len(data) == 40

    def test_simulate_missing_seed_exits_2(self, tmp_path, capsys):
        assert main(["simulate", "--out", str(tmp_path / "x.csv")]) == 2
        assert "seed" in capsys.readouterr().err

    def test_missing_input_file_exits_2(self, capsys):
        code = main(["fit", "--input", "/nonexistent/data.csv"])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_parse_error_exits_2(self, tmp_path, capsys):
        path = write_csv(tmp_path, "0,0,1.5,1,0.2\n1,0,oops,0,0.4\n")
        assert main(["fit", "--input", str(path)]) == 2
        assert "row 3" in capsys.readouterr().err

    def test_degenerate_fit_exits_3(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 10, size=(20, 2))
        a = rng.standard_normal(20)
        lines = [f"{x},{y},{2 * ai},{ai},0\n"
                 for (x, y), ai in zip(pts, a)]
        path = write_csv(tmp_path, "".join(lines))
        code = main(["fit", "--input", str(path), "--estimator", "gls-ml",
                     "--terms", "intercept,treatment"])
        assert code == 3
        assert "numerical failure" in capsys.readouterr().err

    def test_bad_table_choice_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["experiment", "--table", "T9", "--seed", "1"])
        assert err.value.code == 2

    def test_fit_prints_json(self, tmp_path, capsys):
        data = m6_dataset(n=30)
        path = tmp_path / "d.csv"
        write_dataset_csv(data, path)
        assert main(["fit", "--input", str(path), "--estimator", "ols"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["method"] == "ols"
        assert payload["names"] == ["intercept", "treatment"]

    def test_weights_round_trip(self, tmp_path, capsys):
        data = m6_dataset(n=25)
        src = tmp_path / "d.csv"
        write_dataset_csv(data, src)
        out = tmp_path / "w.csv"
        assert main(["weights", "--input", str(src), "--scheme", "knn",
                     "--k", "3", "--out", str(out)]) == 0
        w = read_weight_csv(out)
        assert w.scheme == "knn(k=3)"
        np.testing.assert_allclose(w.matrix.sum(axis=1), 1.0, atol=1e-12)

    def test_bias_poisson_audit(self, capsys):
        assert main(["bias", "--formula", "poisson", "--effect-conf", "1.5",
                     "--rate-own", "2", "--rate-shared", "6"]) == 0
        record = json.loads(capsys.readouterr().out)
        assert record["formula"] == "poisson-confounding"
        assert record["value"] == pytest.approx(1.125)

    def test_experiment_writes_tables(self, tmp_path, capsys):
        code = main([
            "experiment", "--table", "T1", "--cell", "discrete/case1/s1/knn4",
            "--replicates", "8", "--seed", "5", "--out-dir", str(tmp_path),
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "T1/discrete/case1/s1/knn4: bias=" in out
        for name in ("results.csv", "results.json", "tables.md"):
            assert (tmp_path / name).exists()
        rows = json.loads((tmp_path / "results.json").read_text())
        assert len(rows) == 1
        assert rows[0]["replicates"] == 8

    def test_experiment_unmatched_cell_exits_2(self, tmp_path, capsys):
        code = main(["experiment", "--table", "T1", "--cell", "bogus",
                     "--seed", "1", "--out-dir", str(tmp_path)])
        assert code == 2

    def test_apply_writes_tables(self, tmp_path, capsys):
        data = m6_dataset(n=50)
        src = tmp_path / "d.csv"
        write_dataset_csv(data, src)
        code = main(["apply", "--input", str(src), "--fix-nugget",
                     "--out-dir", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "## application (knn4)" in out
        for name in ("results.csv", "results.json", "tables.md"):
            assert (tmp_path / name).exists()

    def test_config_file_via_main(self, tmp_path):
        cfg = tmp_path / "conf.ini"
        out = tmp_path / "sim.csv"
        cfg.write_text(f"[simulate]\nn = 30\nseed = 9\nout = {out}\n")
        assert main(["simulate", "--config", str(cfg)]) == 0
        assert len(read_spatial_csv(out)) == 30

import csv
import json
import os

import pytest

from bihyper.cli import (
    MAX_RUNS,
    RESULT_COLUMNS,
    ConfigParseError,
    main,
    parse_config,
)

HAPPY = ("problem=quad-scalar\nsearch.estimator=neumann_k\nsearch.K=2\nsearch.T=4\nsearch.gamma=0.25\n"
         "search.gamma_alpha=0.01\nsearch.rounds=100\nsearch.seed=7")

K_SWEEP = ("problem=quad-scalar\nsearch.estimator=neumann_k\nsearch.T=10\nsearch.gamma=0.25\n"
           "search.gamma_alpha=0.1\nsearch.rounds=30\nsweep.K=0,1,2,3\n")


def write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestParseConfig:
    def test_happy_path(self):
        cfg = parse_config(HAPPY)
        assert cfg.problem == "quad-scalar"
        assert cfg.search["K"] == 2 and cfg.search["seed"] == 7
        assert cfg.n_runs() == 1

    def test_negative_gamma(self):
        with pytest.raises(ConfigParseError) as err:
            parse_config("search.gamma=-1")
        assert (1, "gamma must be > 0") in err.value.errors

    def test_sweep_plan(self):
        cfg = parse_config(K_SWEEP)
        plan = cfg.plan()
        assert len(plan) == 4 and [f["K"] for _, f in plan] == [0, 1, 2, 3]
        assert len({rid for rid, _ in plan}) == 4

    def test_unknown_key_line_number(self):
        with pytest.raises(ConfigParseError) as err:
            parse_config("problem=quad-scalar\n# comment\nsearch.estimator=t1t2\nsearch.bogus=3\n")
        assert err.value.errors == [(4, "unknown key 'search.bogus'")]

    def test_K_for_reverse_mode(self):
        with pytest.raises(ConfigParseError, match="K does not apply to reverse_mode"):
            parse_config("problem=quad-scalar\nsearch.estimator=reverse_mode\nsearch.T=3\nsearch.K=1\n")

    def test_unknown_estimator_lists_kinds(self):
        with pytest.raises(ConfigParseError, match="conjugate_gradient"):
            parse_config("problem=quad-scalar\nsearch.estimator=adam\n")

    def test_product_guard(self):
        axis = ",".join(str(k) for k in range(400))
        text = f"problem=quad-scalar\nsearch.estimator=neumann_k\nsweep.K={axis}\nsweep.seed={axis}\n"
        with pytest.raises(ConfigParseError, match=str(MAX_RUNS)):
            parse_config(text)

    def test_empty_axis_and_bad_value(self):
        with pytest.raises(ConfigParseError) as err:
            parse_config("problem=quad-scalar\nsweep.K=\nsearch.T=abc\n")
        assert [ln for ln, _ in err.value.errors][:2] == [2, 3]

    def test_inline_problem(self):
        cfg = parse_config("problem=inline\nproblem.A=2,0;0,1\nproblem.B=1;0\nproblem.c=1;1\n"
                           "search.estimator=exact_ift\n")
        assert cfg.problem_params["A"].shape == (2, 2)
        with pytest.raises(ConfigParseError, match="SPD|symmetric|positive"):
            parse_config("problem=inline\nproblem.A=1,2;2,1\nproblem.B=1;0\nproblem.c=1;1\n"
                         "search.estimator=exact_ift\n")

    def test_gamma_checked_against_quadratic(self):
        with pytest.raises(ConfigParseError, match="lambda_max"):
            parse_config("problem=quad-scalar\nsearch.estimator=neumann_k\nsearch.K=1\nsweep.gamma=0.25,0.9\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigParseError, match="duplicate"):
            parse_config("problem=quad-scalar\nproblem=quad-10d\n")


class TestBench:
    def test_single_run_rows(self, tmp_path):
        cfg = write(tmp_path, HAPPY.replace("rounds=100", "rounds=10"))
        assert main(["search", cfg, "--out", str(tmp_path / "o")]) == 0
        rows = read_rows(tmp_path / "o" / "results.csv")
        assert tuple(rows[0]) == RESULT_COLUMNS
        assert len(rows) == 11 and {r[0] for r in rows[1:]} == {"run00000"}
        assert all(r[RESULT_COLUMNS.index("S")] == "" for r in rows[1:])
        assert read_rows(tmp_path / "o" / "errors.csv") == [["run_id", "stage", "message"]]

    def test_sweep_oracle_error_monotone_in_K(self, tmp_path):
        cfg = write(tmp_path, K_SWEEP)
        assert main(["sweep", cfg, "--out", str(tmp_path / "o")]) == 0
        rows = read_rows(tmp_path / "o" / "results.csv")[1:]
        k_col, err_col, round_col = (RESULT_COLUMNS.index(c) for c in ("K", "hyper_oracle_err", "round"))
        final = {int(r[k_col]): float(r[err_col]) for r in rows if r[round_col] == "29"}
        assert sorted(final) == [0, 1, 2, 3]
        assert all(final[k + 1] <= final[k] for k in range(3))

    def test_rerun_identical_except_wall_time(self, tmp_path):
        cfg = write(tmp_path, K_SWEEP)
        main(["bench", cfg, "--out", str(tmp_path / "a")])
        main(["bench", cfg, "--out", str(tmp_path / "b"), "--jobs", "2"])
        a = [r[:-1] for r in read_rows(tmp_path / "a" / "results.csv")]
        b = [r[:-1] for r in read_rows(tmp_path / "b" / "results.csv")]
        assert a == b

    def test_failed_run_recorded(self, tmp_path):
        text = ("problem=quad-10d\nsearch.estimator=one_step_unrolled\nsearch.T=1\nsearch.gamma_alpha=0.1\n"
                "search.rounds=400\nsweep.gamma=0.1,5.0\n")
        cfg = write(tmp_path, text)
        assert main(["bench", cfg, "--out", str(tmp_path / "o")]) == 1
        errs = read_rows(tmp_path / "o" / "errors.csv")[1:]
        assert len(errs) == 1 and errs[0][0] == "run00001" and errs[0][1] == "search"
        rows = read_rows(tmp_path / "o" / "results.csv")[1:]
        assert sum(r[0] == "run00000" for r in rows) == 400
        assert sum(r[0] == "run00001" for r in rows) < 400

    def test_json_format(self, tmp_path):
        cfg = write(tmp_path, HAPPY.replace("rounds=100", "rounds=5"))
        assert main(["search", cfg, "--out", str(tmp_path / "o"), "--format", "json"]) == 0
        doc = json.loads((tmp_path / "o" / "trajectories" / "run00000.json").read_text())
        assert len(doc["rounds"]) == 5
        assert not (tmp_path / "o" / "results.csv").exists()

    def test_seed_override(self, tmp_path):
        cfg = write(tmp_path, HAPPY.replace("rounds=100", "rounds=2"))
        main(["search", cfg, "--out", str(tmp_path / "o"), "--seed", "123"])
        rows = read_rows(tmp_path / "o" / "results.csv")[1:]
        assert {r[RESULT_COLUMNS.index("seed")] for r in rows} == {"123"}

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("BIHYPER_OUT", str(tmp_path / "env"))
        cfg = write(tmp_path, HAPPY.replace("rounds=100", "rounds=2"))
        assert main(["search", cfg]) == 0
        assert os.path.exists(tmp_path / "env" / "results.csv")

    def test_search_rejects_sweep(self, tmp_path):
        assert main(["search", write(tmp_path, K_SWEEP), "--out", str(tmp_path / "o")]) == 2

    def test_config_error_exit_code(self, tmp_path, capsys):
        assert main(["bench", write(tmp_path, "search.gamma=-1\n"), "--out", str(tmp_path / "o")]) == 2
        assert "gamma must be > 0" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_missing_config(self, tmp_path):
        assert main(["bench", str(tmp_path / "nope.cfg")]) == 2


class TestVerify:
    def test_theorem1(self, tmp_path, capsys):
        assert main(["verify", "theorem1", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.startswith("PASS theorem1")
        rep = json.loads((tmp_path / "verify_theorem1.json").read_text())
        assert rep["passed"] and max(r["error"] / r["bound"] for r in rep["details"]
                                     if r.get("case") == "bound" and r["bound"] > 0) <= 1.0

    def test_all(self, tmp_path, capsys):
        assert main(["verify", "all", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 6

    def test_unknown_check(self, capsys):
        assert main(["verify", "nosuch"]) == 2
        assert "corollary2" in capsys.readouterr().err

    def test_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2

import json
import os

from splineformer.cli import main

ABS_SPLINE = {"n": 1, "p": 1, "grid": [[{"op": "max", "args": [
    {"op": "poly", "terms": [{"coef": "1", "exps": {"x_1_1": 1}}]},
    {"op": "poly", "terms": [{"coef": "-1", "exps": {"x_1_1": 1}}]}]}]]}

CUBE_SPLINE = {"n": 1, "p": 1, "grid": [[
    {"op": "poly", "terms": [{"coef": "1", "exps": {"x_1_1": 3}}]}]]}

IDENTITY_SPLINE = {"n": 1, "p": 1, "grid": [[
    {"op": "poly", "terms": [{"coef": "1", "exps": {"x_1_1": 1}}]}]]}

AUTOREGRESSIVE_SPLINE = {"n": 1, "p": 2, "grid": [[
    {"op": "poly", "terms": [{"coef": "1", "exps": {"x_1_1": 1}}]},
    {"op": "poly", "terms": [{"coef": "1", "exps": {"x_1_1": 1, "x_1_2": 1}}]}]]}

NOT_AUTOREGRESSIVE = {"n": 1, "p": 2, "grid": [[
    {"op": "poly", "terms": [{"coef": "1", "exps": {"x_1_2": 1}}]},
    {"op": "poly", "terms": [{"coef": "1", "exps": {"x_1_1": 1}}]}]]}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def compile_to(tmp_path, spline, name="w.json", extra=()):
    spath = write(tmp_path / "spline.json", spline)
    out = str(tmp_path / name)
    code = main(["compile", spath, "-o", out, *extra])
    assert code == 0
    return spath, out


class TestCompile:
    def test_abs_stats(self, tmp_path, capsys):
        _, out = compile_to(tmp_path, ABS_SPLINE)
        stats = json.loads(capsys.readouterr().out)
        assert stats["stages"] == 1
        assert os.path.exists(out)
        assert os.path.exists(out.replace(".json", ".layout.json"))
        sidecar = json.loads(open(out.replace(".json", ".layout.json")).read())
        assert sidecar["mode"] in ("faithful", "pruned")
        assert all({"monomial", "column", "row"} <= set(r) for r in sidecar["rows"])

    def test_masked_on_bad_declaration_exits_3(self, tmp_path, capsys):
        spath = write(tmp_path / "bad.json", NOT_AUTOREGRESSIVE)
        code = main(["compile", spath, "--masked", "-o", str(tmp_path / "w.json")])
        assert code == 3
        assert "column" in capsys.readouterr().err

    def test_parse_error_exits_2(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        assert main(["compile", str(p), "-o", str(tmp_path / "w.json")]) == 2

    def test_byte_identical_reruns(self, tmp_path, capsys):
        spath = write(tmp_path / "s.json", CUBE_SPLINE)
        outs = []
        for name in ("a.json", "b.json"):
            out = str(tmp_path / name)
            assert main(["compile", spath, "-o", out]) == 0
            outs.append((open(out, "rb").read(),
                         open(out.replace(".json", ".layout.json"), "rb").read(),
                         capsys.readouterr().out.replace(name, "X.json")))
        assert outs[0][:2] == outs[1][:2]


class TestEval:
    def test_cube_at_two(self, tmp_path, capsys):
        _, out = compile_to(tmp_path, CUBE_SPLINE)
        capsys.readouterr()
        xpath = write(tmp_path / "x.json", [["2"]])
        assert main(["eval", out, xpath]) == 0
        assert json.loads(capsys.readouterr().out) == [["8"]]

    def test_identity_echoes(self, tmp_path, capsys):
        _, out = compile_to(tmp_path, IDENTITY_SPLINE)
        capsys.readouterr()
        xpath = write(tmp_path / "x.json", [["-7/3"]])
        assert main(["eval", out, xpath]) == 0
        assert json.loads(capsys.readouterr().out) == [["-7/3"]]

    def test_masked_prefix_dependence(self, tmp_path, capsys):
        spath = write(tmp_path / "s.json", AUTOREGRESSIVE_SPLINE)
        out = str(tmp_path / "w.json")
        assert main(["compile", spath, "--masked", "-o", out]) == 0
        capsys.readouterr()
        assert main(["eval", out, write(tmp_path / "x1.json", [["2", "3"]])]) == 0
        first = json.loads(capsys.readouterr().out)
        assert main(["eval", out, write(tmp_path / "x2.json", [["2", "5"]])]) == 0
        second = json.loads(capsys.readouterr().out)
        assert first[0][0] == second[0][0]  # column 1 fixed by the prefix
        assert first[0][1] != second[0][1]

    def test_shape_mismatch_exits_2(self, tmp_path, capsys):
        _, out = compile_to(tmp_path, CUBE_SPLINE)
        capsys.readouterr()
        xpath = write(tmp_path / "x.json", [["1"], ["2"]])
        assert main(["eval", out, xpath]) == 2

    def test_backend_flag(self, tmp_path, capsys):
        _, out = compile_to(tmp_path, CUBE_SPLINE)
        capsys.readouterr()
        xpath = write(tmp_path / "x.json", [["2"]])
        assert main(["eval", out, xpath, "--backend", "float"]) == 0
        assert json.loads(capsys.readouterr().out) == [[8.0]]
        fpath = write(tmp_path / "xf.json", [[2.0]])
        assert main(["eval", out, fpath, "--backend", "rational"]) == 2


class TestVerify:
    def test_exact_pair_exits_0(self, tmp_path, capsys):
        spath, out = compile_to(tmp_path, ABS_SPLINE)
        capsys.readouterr()
        assert main(["verify", out, spath, "--samples", "200"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["exact"] is True and report["samples"] == 200

    def test_corrupted_weights_exit_1_with_witness(self, tmp_path, capsys):
        spath, out = compile_to(tmp_path, CUBE_SPLINE)
        capsys.readouterr()
        weights = json.loads(open(out).read())
        weights["blocks"][0]["heads"][0]["A_V"][0][0] = "2"
        corrupted = write(tmp_path / "bad.json", weights)
        assert main(["verify", corrupted, spath, "--samples", "100"]) == 1
        report = json.loads(capsys.readouterr().out)
        assert report["exact"] is False and "first_failure" in report

    def test_seed_env_override(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("SPLINEFORMER_SEED", "7")
        spath, out = compile_to(tmp_path, ABS_SPLINE)
        capsys.readouterr()
        assert main(["verify", out, spath, "--samples", "10"]) == 0
        assert json.loads(capsys.readouterr().out)["seed"] == 7

    def test_byte_identical_reruns(self, tmp_path, capsys):
        spath, out = compile_to(tmp_path, ABS_SPLINE)
        capsys.readouterr()
        runs = []
        for _ in range(2):
            assert main(["verify", out, spath, "--samples", "50"]) == 0
            runs.append(capsys.readouterr().out)
        assert runs[0] == runs[1]


class TestDegree:
    def test_default_bound_from_blocks(self, tmp_path, capsys):
        _, out = compile_to(tmp_path, ABS_SPLINE)
        capsys.readouterr()
        assert main(["degree", out, "--trials", "10"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["bound"] == 3  # one block
        assert report["bound_satisfied"] is True
        assert report["modal_degree"] == 1

    def test_explicit_bound(self, tmp_path, capsys):
        _, out = compile_to(tmp_path, CUBE_SPLINE)
        capsys.readouterr()
        assert main(["degree", out, "--trials", "10", "--bound", "81"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["bound"] == 81 and report["bound_satisfied"] is True


class TestSmooth:
    def test_softplus_table(self, tmp_path, capsys):
        _, out = compile_to(tmp_path, ABS_SPLINE)
        capsys.readouterr()
        assert main(["smooth", out, "--betas", "10,100", "--samples", "20"]) == 0
        report = json.loads(capsys.readouterr().out)
        errs = [r["max_abs_error"] for r in report["rows"]]
        assert len(errs) == 2 and errs[1] <= errs[0]

    def test_softmax_probability_columns(self, tmp_path, capsys):
        _, out = compile_to(tmp_path, ABS_SPLINE)
        capsys.readouterr()
        assert main(["smooth", out, "--activation", "softmax", "--samples", "5"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["probability_columns"] is True
        assert report["finite_outputs"] is True

    def test_empty_betas_empty_table(self, tmp_path, capsys):
        _, out = compile_to(tmp_path, ABS_SPLINE)
        capsys.readouterr()
        assert main(["smooth", out, "--betas", "", "--samples", "3"]) == 0
        assert json.loads(capsys.readouterr().out)["rows"] == []

import json
import xml.etree.ElementTree as ET

import jsonschema
import pytest

from fracspace.cli import InputError, RunConfig, main, validate_report


def _run(tmp_path, *argv, name="out.json"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, (json.loads(out.read_text()) if out.exists() else None)


@pytest.fixture
def square_file(tmp_path):
    p = tmp_path / "square.json"
    p.write_text(json.dumps({"type": "polygon", "vertices": [[0, 0], [1, 0], [1, 1], [0, 1]]}))
    return str(p)


@pytest.mark.parametrize("argv", [
    ["whitney", "--max-level", "4"],
    ["certify", "--max-level", "4", "--pairs", "30"],
    ["norm", "--max-level", "4", "--variant", "shadow", "--rho", "3"],
    ["extend", "--max-level", "4", "--f", "bump"],
    ["t1", "--max-level", "4", "--kernel", "riesz2"],
    ["harness", "--max-level", "4", "--f", "x1*x2"],
    ["sharpness"],
])
def test_every_command_emits_valid_report(tmp_path, argv):
    code, rep = _run(tmp_path, *argv)
    assert code == 0
    validate_report(rep, argv[0])
    assert len(rep["provenance"]["config_hash"]) == 64


def test_certify_is_byte_identical(tmp_path, square_file):
    args = ["certify", "--domain", square_file, "--max-level", "5", "--pairs", "500", "--seed", "42"]
    main([*args, "--out", str(tmp_path / "a.json")])
    main([*args, "--out", str(tmp_path / "b.json")])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_ball_with_q_above_p_names_hypothesis(tmp_path, capsys):
    code, rep = _run(tmp_path, "norm", "--variant", "ball", "--q", "4", "--p", "2", "--rho", "0.5",
                     "--max-level", "4")
    assert code == 2 and rep is None
    assert "1<q≤p<∞" in capsys.readouterr().err


def test_invalid_regime_names_condition(tmp_path, capsys):
    code, _ = _run(tmp_path, "norm", "--s", "0.2", "--p", "2", "--q", "8", "--max-level", "4")
    assert code == 2 and "s > d/p - d/q" in capsys.readouterr().err


def test_constant_has_zero_seminorm(tmp_path):
    code, rep = _run(tmp_path, "norm", "--f", "const", "--max-level", "4")
    assert code == 0 and rep["report"]["seminorm_part"] == 0.0


@pytest.mark.parametrize("content", ["{not json", '{"vertices": [[0,0],[1,1],[1,0],[0,1]]}'])
def test_bad_domain_file_is_input_error(tmp_path, content):
    bad = tmp_path / "bad.json"
    bad.write_text(content)
    code, _ = _run(tmp_path, "whitney", "--domain", str(bad))
    assert code == 2


def test_unknown_command_and_kernel_exit_2():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["t1", "--kernel", "hilbert"])
    assert e.value.code == 2


def test_failed_certificate_exit_1(tmp_path):
    code, rep = _run(tmp_path, "certify", "--domain", "corridor:0.4", "--max-level", "7", "--pairs", "50")
    assert code == 1 and rep["certificate"]["rho_eps"] is None


def test_incompatible_c_w_is_input_error(tmp_path, capsys):
    code, _ = _run(tmp_path, "whitney", "--max-level", "5", "--c-w", "1")
    assert code == 2 and "c_w" in capsys.readouterr().err


def test_config_round_trip(tmp_path):
    cfg = RunConfig("norm", domain="lshape", levels=[4, 5], rho=3.0, variant="shadow",
                    quad={"J": 4}, out="x.json")
    assert RunConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    moved = RunConfig.from_json({**cfg.to_json(), "out": "elsewhere.json"})
    assert moved.digest() == cfg.digest()
    with pytest.raises(InputError):
        RunConfig.from_json({**cfg.to_json(), "colour": "red"})
    with pytest.raises(InputError):
        RunConfig("norm", quad={"collar": "mirror"})


def test_saved_config_reproduces_run(tmp_path):
    saved = tmp_path / "cfg.json"
    code, a = _run(tmp_path, "--save-config", str(saved), "norm", "--max-level", "4", "--f", "bump",
                   name="a.json")
    assert code == 0
    cfg = json.loads(saved.read_text())
    cfg["out"] = str(tmp_path / "b.json")
    saved.write_text(json.dumps(cfg))
    assert main(["--config", str(saved)]) == 0
    b = json.loads((tmp_path / "b.json").read_text())
    assert a["report"] == b["report"]
    assert a["provenance"]["config_hash"] == b["provenance"]["config_hash"]


def test_extended_values_file_feeds_back(tmp_path):
    vals = tmp_path / "t1.json"
    code, _ = _run(tmp_path, "t1", "--max-level", "4", "--values-out", str(vals), "--kernel", "riesz1")
    assert code == 0
    code, rep = _run(tmp_path, "norm", "--max-level", "4", "--f", f"@{vals}", name="n.json")
    assert code == 0 and rep["report"]["seminorm_part"] > 0
    code, _ = _run(tmp_path, "norm", "--max-level", "5", "--f", f"@{vals}", name="n2.json")
    assert code == 2


def test_svg_and_csv_outputs(tmp_path):
    svg, csv = tmp_path / "c.svg", tmp_path / "t.csv"
    assert main(["certify", "--max-level", "4", "--pairs", "20", "--svg", str(svg),
                 "--out", str(tmp_path / "o.json")]) == 0
    root = ET.fromstring(svg.read_text())
    assert root.tag.endswith("svg") and len(root) > 10
    assert main(["extend", "--max-level", "5", "--svg", str(svg), "--out", str(tmp_path / "o.json")]) == 0
    assert any(el.tag.endswith("line") for el in ET.fromstring(svg.read_text()))
    assert main(["norm", "--levels", "4", "5", "--csv", str(csv), "--out", str(tmp_path / "o.json")]) == 0
    rows = csv.read_text().strip().splitlines()
    assert rows[0] == "level,m,r,value,tail,collar" and len(rows) == 3


def test_schema_rejects_missing_fields():
    with pytest.raises(jsonschema.ValidationError):
        validate_report({"command": "norm", "status": 0}, "norm")

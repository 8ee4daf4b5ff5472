import csv
import hashlib
import io
import re

import pytest

from volt3d import cli, cost

SUBCOMMANDS = {
    "params": ["--arch", "--flavor", "--convention", "--format", "--threads"],
    "flops": ["--k", "--cin", "--cout", "--dhw", "--verify", "--format", "--threads"],
    "gen-data": ["--samples", "--resolution", "--classes", "--seed", "--out", "--threads"],
    "train-cls": ["--flavor", "--epochs", "--lr", "--batch-size", "--preset", "--target", "--seed",
                  "--out", "--data", "--threads"],
    "train-rec": ["--arch", "--flavor", "--epochs", "--lr", "--batch-size", "--preset", "--target",
                  "--threshold", "--out", "--data", "--threads"],
    "eval": ["--task", "--checkpoint", "--format", "--data", "--threads"],
}


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("cmd", sorted(SUBCOMMANDS))
def test_help_lists_every_flag(cmd, capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main([cmd, "--help"])
    assert ei.value.code == 0
    out = capsys.readouterr().out
    for flag in SUBCOMMANDS[cmd]:
        assert flag in out, flag


def test_top_level_help(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["--help"])
    assert ei.value.code == 0
    out = capsys.readouterr().out
    assert all(cmd in out for cmd in SUBCOMMANDS)


@pytest.mark.parametrize("argv", [[], ["params"], ["params", "--arch", "rec7", "--flavor", "dw"],
                                  ["flops", "--k", "0", "--cin", "1", "--cout", "1", "--dhw", "1,1,1"],
                                  ["flops", "--k", "3", "--cin", "1", "--cout", "1", "--dhw", "1,1"]])
def test_usage_errors_exit_one(argv, capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(argv)
    assert ei.value.code == 1


# ------------------------------------------------------------------- params

@pytest.mark.parametrize("arch,flavor,conv,total,red_conv,red_total", [
    ("rec6", "standard", "4,646,656", "21,768,928", "", ""),
    ("rec6", "pseudo", "2,067,968", "19,190,240", "55.50%", "11.85%"),
    ("rec16", "dw", "411,520", "17,533,792", "95.62%", "33.90%"),
])
def test_params_summary(arch, flavor, conv, total, red_conv, red_total, capsys):
    code, out, _ = run(capsys, "params", "--arch", arch, "--flavor", flavor)
    assert code == 0
    summary = out.strip().splitlines()[-1]
    cells = [c.strip() for c in summary.strip("|").split("|")]
    assert cells[1:] == [conv, red_conv, total, red_total]


def test_params_csv(capsys):
    code, out, _ = run(capsys, "params", "--arch", "rec6", "--flavor", "dw", "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    by = {r["layer"]: r for r in rows}
    assert int(by["conv_subtotal"]["params"]) == 201_600
    assert by["conv_subtotal"]["reduced_by"] == "95.66%"
    assert int(by["total"]["params"]) == 17_323_872
    layers = [r for r in rows if r["layer"] not in ("conv_subtotal", "total")]
    assert sum(int(r["params"]) for r in layers if r["section"] != "encoder") == 17_323_872


def test_params_vgg_scaled(capsys):
    code, out, _ = run(capsys, "params", "--arch", "vgg13", "--flavor", "dw", "--resolution", "8",
                       "--width", "0.125", "--hidden", "64,64", "--classes", "3")
    assert code == 0 and "conv" in out


# -------------------------------------------------------------------- flops

def test_flops_example(capsys):
    code, out, _ = run(capsys, "flops", "--k", "3", "--cin", "2", "--cout", "4", "--dhw", "4,4,4")
    lines = out.splitlines()
    assert code == 0
    assert lines[0] == "13824 / 3968 / 3840"
    assert any(re.search(r"31/108 = 1/4\+1/27 = 0\.287037", ln) for ln in lines)


def test_flops_csv_parses(capsys):
    code, out, _ = run(capsys, "flops", "--k", "3", "--cin", "64", "--cout", "64", "--dhw", "8,8,8",
                       "--format", "csv")
    rows = {r["quantity"]: r for r in csv.DictReader(io.StringIO(out))}
    assert code == 0 and rows["dw:std"]["exact"] == "91/1728"


def test_flops_verify_ok(capsys):
    code, out, _ = run(capsys, "flops", "--k", "3", "--cin", "2", "--cout", "4", "--dhw", "4,4,4", "--verify")
    assert code == 0 and "verify     ok" in out


def test_flops_verify_refuses_large(capsys):
    code, _, err = run(capsys, "flops", "--k", "3", "--cin", "64", "--cout", "64", "--dhw", "8,8,8", "--verify")
    assert code == 2 and "reference" in err


def test_flops_verify_mismatch_exits_three(capsys, monkeypatch):
    real = cost.macs_standard
    monkeypatch.setattr(cli.cost, "macs_standard", lambda *a: real(*a) + 1)
    code, _, err = run(capsys, "flops", "--k", "3", "--cin", "2", "--cout", "4", "--dhw", "4,4,4", "--verify")
    assert code == 3 and "standard" in err


# ----------------------------------------------------------------- gen-data

def _digest(d):
    h = hashlib.sha256()
    for p in sorted(d.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(d).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_gen_data_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen-data", "--samples", "6", "--resolution", "8", "--classes", "3",
                   "--seed", "5", "--out", str(tmp_path / name))[0] == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert (tmp_path / "a" / "samples.csv").exists()


def test_gen_data_bad_classes_is_runtime_error(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--classes", "20", "--out", str(tmp_path))
    assert code == 2 and "n_classes" in err


# ------------------------------------------------------------ train and eval

def test_train_cls_and_eval(tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = run(capsys, "train-cls", "--flavor", "standard", "--epochs", "200", "--target", "0.999",
                        "--quiet", "--out", str(out))
    assert code == 0, text
    assert {"history.csv", "model.vwt", "model.txt"} <= {p.name for p in out.iterdir()}
    hist = list(csv.DictReader(open(out / "history.csv")))
    assert len(hist) < 200
    code, text, _ = run(capsys, "eval", "--task", "cls", "--checkpoint", str(out / "model.vwt"))
    assert code == 0 and text.startswith("accuracy 1.0000")


def test_train_cls_from_data_dir(tmp_path, capsys):
    run(capsys, "gen-data", "--samples", "6", "--resolution", "8", "--classes", "2", "--out", str(tmp_path / "d"))
    code, text, err = run(capsys, "train-cls", "--data", str(tmp_path / "d"), "--epochs", "1",
                          "--out", str(tmp_path / "r"))
    assert code == 0 and "epoch    0" in err


def test_train_rec_smoke_and_eval(tmp_path, capsys):
    out = tmp_path / "rec"
    code, text, _ = run(capsys, "train-rec", "--samples", "2", "--classes", "2", "--epochs", "1",
                        "--quiet", "--out", str(out))
    assert code == 0, text
    code, text, _ = run(capsys, "eval", "--task", "rec", "--checkpoint", str(out / "model.vwt"),
                        "--samples", "2", "--classes", "2", "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(text)))
    assert code == 0 and [float(r["threshold"]) for r in rows] == [0.1, 0.3, 0.5, 0.7, 0.9]
    assert sum(r["best"] == "*" for r in rows) == 1


def test_eval_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--task", "cls", "--checkpoint", str(tmp_path / "none.vwt"))
    assert code == 2 and "does not exist" in err


def test_eval_wrong_flavor_checkpoint(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d, fl in ((a, "standard"), (b, "dw")):
        assert run(capsys, "train-cls", "--flavor", fl, "--epochs", "0", "--quiet", "--out", str(d))[0] == 0
    (a / "model.txt").write_text((b / "model.txt").read_text())
    code, _, err = run(capsys, "eval", "--task", "cls", "--checkpoint", str(a / "model.vwt"))
    assert code == 2 and "CheckpointShapeError" in err


def test_corrupt_checkpoint_exit_two(tmp_path, capsys):
    d = tmp_path / "r"
    run(capsys, "train-cls", "--epochs", "0", "--quiet", "--out", str(d))
    (d / "model.vwt").write_bytes(b"junk")
    code, _, err = run(capsys, "eval", "--task", "cls", "--checkpoint", str(d / "model.vwt"))
    assert code == 2 and "BadMagicError" in err


# ------------------------------------------------------------------ threads

def test_threads_flag_and_env(monkeypatch, capsys):
    assert run(capsys, "--threads", "1", "flops", "--k", "1", "--cin", "1", "--cout", "1", "--dhw", "1,1,1")[0] == 0
    assert run(capsys, "flops", "--threads", "2", "--k", "1", "--cin", "1", "--cout", "1", "--dhw", "1,1,1")[0] == 0
    monkeypatch.setenv("VOLT3D_THREADS", "1")
    assert run(capsys, "flops", "--k", "1", "--cin", "1", "--cout", "1", "--dhw", "1,1,1")[0] == 0
    monkeypatch.setenv("VOLT3D_THREADS", "zero")
    code, _, err = run(capsys, "flops", "--k", "1", "--cin", "1", "--cout", "1", "--dhw", "1,1,1")
    assert code == 1 and "VOLT3D_THREADS" in err

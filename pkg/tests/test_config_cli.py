import csv
from pathlib import Path

import pytest

from lmcca import tensor as T
from lmcca.cli import EXIT_ARTIFACT, EXIT_CONFIG, EXIT_OK, EXIT_SELFTEST, REPORT_HEADER, main
from lmcca.config import (ConfigError, KEYS, PRESETS, build_config, expand_sweep, parse_value,
                          read_config_text)

# small synthetic runs: 600 train / 200 test images of shape 1x28x28
FAST = ["dataset=synthetic", "epochs=1", "train_steps=1", "eval_steps=1", "cca_steps=1",
        "validation_size=100", "batch_size=100"]


def fast(*changes):
    """FAST with some keys replaced."""
    keys = {c.split("=")[0] for c in changes}
    return [item for item in FAST if item.split("=")[0] not in keys] + list(changes)


def sets(*items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out-dir", str(out)] + sets(*FAST)) == EXIT_OK
    return out


# --- config file ---------------------------------------------------------------

def test_config_text_comments_and_fractions():
    raw = read_config_text("# demo\nmethod = lm_cca  # inline\nepsilon = 8/255\n\nk = auto\n")
    cfg = build_config(raw)
    assert cfg.method == "lm_cca"
    assert cfg.epsilon == 8 / 255
    assert cfg.mask_k == round(0.1 * cfg.arch.penultimate_dim)


@pytest.mark.parametrize("text,key", [("bogus = 1", "bogus"), ("seed = 1\nseed = 2", "seed"),
                                      ("gamma = high", "gamma")])
def test_config_text_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as err:
        build_config(read_config_text(text))
    assert err.value.key == key


@pytest.mark.parametrize("key,value", [("gamma", "1.0"), ("k", "999"), ("method", "fat"),
                                       ("lr_step_epochs", "5,3"), ("preset", "huge")])
def test_invalid_values_rejected(key, value):
    with pytest.raises(ConfigError) as err:
        build_config({key: value})
    assert err.value.key == key


def test_long_run_preset_resolves_full_recipe():
    text = build_config({"preset": "paper-cifar10"}).resolved_text()
    assert "epsilon = 8/255" in text
    assert "alpha = 2/255" in text
    assert "lr_step_epochs = 75,90" in text
    assert "epochs = 120" in text
    assert "lr = 0.1\n" in text and "momentum = 0.9\n" in text and "weight_decay = 0.0005\n" in text


def test_resolved_text_round_trips():
    cfg = build_config({"method": "lc_cca_star_delta", "delta": "2/255", "gamma": "0.1"})
    raw = read_config_text(cfg.resolved_text())
    assert build_config(raw) == cfg
    assert [line.split(" = ")[0] for line in cfg.resolved_text().splitlines()
            if not line.startswith("#")] == list(KEYS)


def test_desk_preset_steps_follow_epochs():
    assert build_config({"epochs": "5"}).lr_step_epochs == (3, 4)
    assert build_config({}).lr_step_epochs == (6, 8)


def test_every_preset_is_valid():
    for name in PRESETS:
        build_config({"preset": name})


def test_sweep_expansion():
    runs = expand_sweep({"gamma": "0,0.1", "k": "5,10", "method": "sat"})
    assert [suffix for suffix, _ in runs] == ["gamma=0_k=5", "gamma=0_k=10", "gamma=0.1_k=5",
                                             "gamma=0.1_k=10"]
    assert all(raw["method"] == "sat" for _, raw in runs)
    assert expand_sweep({"gamma": "0.1"}) == [("", {"gamma": "0.1"})]


def test_parse_value_unknown_key():
    with pytest.raises(ConfigError):
        parse_value("nope", "1")


# --- train ----------------------------------------------------------------------

def test_train_writes_artifacts(trained):
    for name in ("metrics.csv", "last.ckpt", "best.ckpt", "config.resolved", "timing.csv"):
        assert (trained / name).exists(), name
    assert "dataset = synthetic" in (trained / "config.resolved").read_text()
    assert len(rows(trained / "metrics.csv")) == 2


def test_train_twice_byte_identical(trained, tmp_path):
    assert main(["train", "--out-dir", str(tmp_path)] + sets(*FAST)) == EXIT_OK
    assert (tmp_path / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
    assert (tmp_path / "last.ckpt").read_bytes() == (trained / "last.ckpt").read_bytes()


def test_train_zero_epochs(tmp_path):
    assert main(["train", "--out-dir", str(tmp_path)] + sets(*fast("epochs=0"))) == EXIT_OK
    assert len(rows(tmp_path / "metrics.csv")) == 1
    assert not (tmp_path / "last.ckpt").exists()


def test_train_from_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("\n".join(item.replace("=", " = ") for item in fast("epochs=0")) + "\n")
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_OK
    assert "epochs = 0" in (tmp_path / "o" / "config.resolved").read_text()


def test_train_sweep_subdirectories(tmp_path):
    assert main(["train", "--out-dir", str(tmp_path)] + sets(*fast("epochs=0", "gamma=0,0.1"))) == EXIT_OK
    assert sorted(p.name for p in tmp_path.iterdir()) == ["gamma=0", "gamma=0.1"]
    assert "gamma = 0.1" in (tmp_path / "gamma=0.1" / "config.resolved").read_text()


def test_train_unknown_key_exit_2(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path), "--set", "colour=blue"]) == EXIT_CONFIG
    assert "colour" in capsys.readouterr().err


def test_train_bad_value_exit_2(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path), "--set", "gamma=1.5"]) == EXIT_CONFIG
    assert "gamma" in capsys.readouterr().err


def test_train_missing_dataset_exit_3(tmp_path, capsys):
    code = main(["train", "--out-dir", str(tmp_path), "--data-dir", str(tmp_path / "none"),
                 "--set", "preset=paper-cifar10"])
    assert code == EXIT_ARTIFACT
    text = (tmp_path / "config.resolved").read_text()
    assert "epsilon = 8/255" in text and "epochs = 120" in text


# --- evaluate -----------------------------------------------------------------------

def evaluate_args(trained, out, *extra):
    return ["evaluate", "--checkpoint", str(trained / "best.ckpt"), "--out", str(out)] + \
        sets(*FAST) + list(extra)


def test_evaluate_clean_only(trained, tmp_path):
    assert main(evaluate_args(trained, tmp_path / "r.csv", "--modes", "clean")) == EXIT_OK
    table = rows(tmp_path / "r.csv")
    assert tuple(table[0]) == REPORT_HEADER
    assert len(table) == 2 and table[1][0] == "clean" and table[1][-1] == ""


def test_evaluate_three_modes(trained, tmp_path):
    modes = "pgd,pgd_with_lm_cca,pgd_with_lc_cca"
    assert main(evaluate_args(trained, tmp_path / "r.csv", "--modes", modes,
                              "--max-samples", "40")) == EXIT_OK
    table = rows(tmp_path / "r.csv")
    assert [r[0] for r in table[1:]] == modes.split(",")
    assert all(0 <= float(r[-1]) <= 100 for r in table[1:])


def test_evaluate_steps_override_recorded(trained, tmp_path):
    assert main(evaluate_args(trained, tmp_path / "r.csv", "--modes", "pgd", "--eval-steps", "3",
                              "--max-samples", "20")) == EXIT_OK
    assert rows(tmp_path / "r.csv")[1][1] == "3"


def test_evaluate_architecture_mismatch_exit_3(trained, tmp_path):
    args = ["evaluate", "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path / "r.csv")] + \
        sets(*fast("preset=cifar-slim"))
    assert main(args) == EXIT_ARTIFACT


def test_evaluate_corrupt_checkpoint_exit_3(trained, tmp_path):
    blob = bytearray((trained / "best.ckpt").read_bytes())
    blob[100] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    args = ["evaluate", "--checkpoint", str(tmp_path / "bad.ckpt"), "--out", str(tmp_path / "r.csv")] + sets(*FAST)
    assert main(args) == EXIT_ARTIFACT


def test_evaluate_unknown_mode_exit_2(trained, tmp_path):
    assert main(evaluate_args(trained, tmp_path / "r.csv", "--modes", "fgsm")) == EXIT_CONFIG


# --- diagnose-latents ------------------------------------------------------------------

def test_diagnose_latents_rows(trained, tmp_path):
    out = tmp_path / "lat.csv"
    args = ["diagnose-latents", "--checkpoint", str(trained / "best.ckpt"), "--samples", "4",
            "--max-samples", "60", "--out", str(out)] + sets(*FAST)
    assert main(args) == EXIT_OK
    table = rows(out)
    d = build_config({}).arch.penultimate_dim
    assert table[0][:5] == ["sample_id", "variant", "predicted_label", "true_label", "cosine_to_clean"]
    assert table[0][5:] == [f"z_{j}" for j in range(d)]
    assert len(table) == 13
    assert [r[1] for r in table[1:4]] == ["clean", "adversarial", "cca"]
    for r in table[1:]:
        assert len(r) == 5 + d
        if r[1] == "clean":
            assert r[4] == "1.0"
        assert -1.0 <= float(r[4]) <= 1.0
    ids = [r[0] for r in table[1:]]
    assert all(ids[i] == ids[i + 1] == ids[i + 2] for i in range(0, 12, 3))


# --- selftest ------------------------------------------------------------------------

def test_selftest_quick_passes(capsys):
    assert main(["selftest", "--quick"]) == EXIT_OK
    assert "selftest passed" in capsys.readouterr().out


def test_selftest_detects_corrupted_gradient_rule(monkeypatch, capsys):
    original = T.GRAD_RULES["relu"]

    def broken(node, g, needs):
        return [2 * grad for grad in original(node, g, needs)]

    monkeypatch.setitem(T.GRAD_RULES, "relu", broken)
    assert main(["selftest", "--quick"]) == EXIT_SELFTEST
    assert "tensor-core/relu" in capsys.readouterr().out


def test_csv_outputs_use_lf_and_dot_decimal(trained):
    blob = (trained / "metrics.csv").read_bytes()
    assert b"\r" not in blob
    assert all("," not in cell or cell.count(",") == 0 for cell in rows(trained / "metrics.csv")[1])
    assert Path(trained / "metrics.csv").read_text().splitlines()[1].split(",")[-2] == repr(build_config({}).lr)

import json

import pytest

from mvposediff import cli
from mvposediff.evalmetrics import read_report

TINY = ["resolution=[32,32]", "base_width=16", "channel_mult=[1,2]", "self_attn_levels=[1]",
        "d_c=32", "cond_width=8", "T=50", "batch_size=2", "sample_steps=3", "log_every=1",
        "ckpt_every=0"]


def _sets(extra=()):
    out = []
    for kv in list(TINY) + list(extra):
        out += ["--set", kv]
    return out


@pytest.fixture(autouse=True)
def _root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUTPUT_ROOT, str(tmp_path / "root"))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_dataset):
    out = tmp_path_factory.mktemp("trained")
    code = cli.main(["train", "--data", str(tiny_dataset), "--steps", "2", "--out", str(out)] + _sets())
    assert code == 0
    return out / "last.pt"


def test_gen_data_defaults(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d")]) == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(m["records"]) == 64 and m["resolution"] == [64, 48]
    assert "config hash" in capsys.readouterr().out


def test_gen_data_seed_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--n-identities", "3", "--seed", "7", "--resolution", "32x32",
                         "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


@pytest.mark.parametrize("res", ["15x15", "64x15", "abc"])
def test_gen_data_rejects_resolution(tmp_path, res, capsys):
    assert cli.main(["gen-data", "--resolution", res, "--out", str(tmp_path / "d")]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_verb_and_help():
    assert cli.main(["bogus"]) == 2
    assert cli.main(["--help"]) == 0


def test_default_output_root(tmp_path, tiny_dataset):
    assert cli.main(["gen-data", "--n-identities", "1", "--resolution", "32x32"]) == 0
    assert (tmp_path / "root" / "data" / "manifest.json").is_file()


def test_train_paper_profile_echo(tmp_path, tiny_dataset, capsys):
    code = cli.main(["train", "--data", str(tiny_dataset), "--profile", "paper", "--steps", "1",
                     "--out", str(tmp_path / "p")] + _sets(["batch_size=1", "T=1000"]))
    assert code == 0
    out = capsys.readouterr().out
    assert "lr = 1e-05" in out and "drop_prob = 0.05" in out and "omega = 0.7" in out
    assert "batch_size = 1" in out and "T = 1000" in out
    assert (tmp_path / "p" / "config.txt").is_file()


def test_train_ablate_no_rescva_echo(tmp_path, tiny_dataset, capsys):
    code = cli.main(["train", "--data", str(tiny_dataset), "--ablate", "no-rescva", "--steps", "1",
                     "--out", str(tmp_path / "n")] + _sets())
    assert code == 0
    out = capsys.readouterr().out
    assert "use_rescva = false" in out and 'ablation = "no-rescva"' in out


def test_train_missing_dataset(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nope")]) == 2


def test_train_config_file_and_log(tmp_path, tiny_dataset):
    from conftest import tiny_config

    cfg_path = tmp_path / "run.txt"
    tiny_config(steps=1).save(cfg_path)
    out = tmp_path / "c"
    assert cli.main(["train", "--data", str(tiny_dataset), "--config", str(cfg_path), "--out", str(out)]) == 0
    lines = (out / "train_log.tsv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].split("\t")[2] == tiny_config(steps=1).hash()


def test_resume_continues_at_next_step(tmp_path, tiny_dataset, capsys):
    out = tmp_path / "r"
    assert cli.main(["train", "--data", str(tiny_dataset), "--steps", "100", "--out", str(out)]
                    + _sets(["ckpt_every=100", "log_every=0"])) == 0
    ck = out / "ckpt_step000100.pt"
    assert ck.is_file()
    capsys.readouterr()
    assert cli.main(["train", "--data", str(tiny_dataset), "--resume", str(ck), "--steps", "101"]) == 0
    out_text = capsys.readouterr().out
    assert "resuming at step 101" in out_text
    steps = [int(l.split("\t")[0]) for l in (out / "train_log.tsv").read_text().splitlines()]
    assert steps[-2:] == [100, 101]


def test_resume_reproduces_uninterrupted_run(tmp_path, tiny_dataset):
    a, b = tmp_path / "a", tmp_path / "b"
    base = ["train", "--data", str(tiny_dataset)]
    assert cli.main(base + ["--steps", "4", "--out", str(a)] + _sets(["log_every=0"])) == 0
    assert cli.main(base + ["--steps", "2", "--out", str(b)] + _sets(["log_every=0"])) == 0
    assert cli.main(base + ["--resume", str(b / "last.pt"), "--steps", "4"]) == 0
    la = [float(l.split("\t")[1]) for l in (a / "train_log.tsv").read_text().splitlines()]
    lb = [float(l.split("\t")[1]) for l in (b / "train_log.tsv").read_text().splitlines()]
    assert la == pytest.approx(lb, rel=1e-5)


def test_sample_ref_arity(tmp_path, trained, tiny_dataset):
    rec = tiny_dataset / "rec_00000"
    poses = [str(rec / f"pose{k}.png") for k in range(4)]
    assert cli.main(["sample", "--checkpoint", str(trained), "--pose", *poses, "--out", str(tmp_path)]) == 2
    refs = []
    for s in range(4):
        refs += ["--ref", f"{s}:{rec / f'view{s}.png'}"]
    assert cli.main(["sample", "--checkpoint", str(trained), *refs, "--pose", *poses]) == 2
    assert cli.main(["sample", "--checkpoint", str(trained), "--record", str(rec), "--n-refs", "0"]) == 2
    assert cli.main(["sample", "--checkpoint", str(trained), "--record", str(rec), "--n-refs", "4"]) == 2


def test_sample_one_and_three_refs(tmp_path, trained, tiny_dataset):
    rec = tiny_dataset / "rec_00001"
    for n in (1, 3):
        out = tmp_path / f"n{n}"
        assert cli.main(["sample", "--checkpoint", str(trained), "--record", str(rec),
                         "--n-refs", str(n), "--out", str(out)]) == 0
        meta = json.loads((out / "target.json").read_text())
        assert meta["ref_slots"] == list(range(n)) and meta["omega"] == 0.7
        assert {"seed", "checkpoint_hash", "config_hash", "schedule", "guidance"} <= set(meta)
        assert (out / "target.png").is_file() and (out / "grid.png").is_file()


def test_sample_deterministic_bytes(tmp_path, trained, tiny_dataset):
    rec = tiny_dataset / "rec_00002"
    poses = [str(rec / f"pose{k}.png") for k in range(4)]
    for name in ("a", "b"):
        assert cli.main(["sample", "--checkpoint", str(trained), "--ref", str(rec / "view0.png"),
                         "--ref", f"2:{rec / 'view2.png'}", "--pose", *poses, "--text", "red shirt",
                         "--seed", "5", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "target.png").read_bytes() == (tmp_path / "b" / "target.png").read_bytes()


def test_sample_rejects_bad_omega(tmp_path, trained, tiny_dataset):
    rec = tiny_dataset / "rec_00000"
    assert cli.main(["sample", "--checkpoint", str(trained), "--record", str(rec), "--omega", "1.5",
                     "--out", str(tmp_path)]) == 2


def test_eval_lists_absent_checkpoint(tmp_path, trained, tiny_dataset, capsys):
    out = tmp_path / "report.tsv"
    code = cli.main(["eval", "--checkpoint", str(trained), str(tmp_path / "missing.pt"),
                     "--data", str(tiny_dataset), "--limit", "2", "--steps", "2", "--out", str(out)])
    assert code == 0
    rows = read_report(out)
    assert len(rows) == 2
    assert rows[0]["variant"] == "full" and -1 <= float(rows[0]["ssim"]) <= 1
    assert rows[1]["variant"].startswith("absent:") and rows[1]["n_samples"] == "0"
    assert "absent" in capsys.readouterr().out


@pytest.mark.slow
def test_ablate_table(tmp_path, tiny_dataset):
    out = tmp_path / "ab"
    code = cli.main(["ablate", "--data", str(tiny_dataset), "--steps", "2", "--limit", "2",
                     "--sample-steps", "2", "--out", str(out)] + _sets())
    assert code == 0
    rows = read_report(out / "ablation.tsv")
    assert [r["variant"] for r in rows] == ["full", "no-rescva", "no-text-summarization", "no-mask"]
    assert all(r["ssim"] and r["pdist"] and r["ffd"] for r in rows)
    assert rows[0]["loss_step0"] == rows[1]["loss_step0"]

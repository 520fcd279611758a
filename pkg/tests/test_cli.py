import hashlib
import json

import pytest

from attnforge import cli, ppm


def run(*argv):
    return cli.main(list(argv))


def read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small end-to-end workspace: dataset + 1-epoch checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    ckpt = root / "model.bin"
    assert run("gen-data", "--scenes", "4", "--seed", "3", "--out", str(data)) == 0
    assert run("train", "--data", str(data), "--out", str(ckpt),
               "--epochs", "1", "--seed", "3") == 0
    return {"root": root, "data": data, "ckpt": ckpt}


class TestGenData:
    def test_outputs_and_config(self, tmp_path):
        out = tmp_path / "d"
        assert run("gen-data", "--scenes", "3", "--seed", "1", "--out", str(out)) == 0
        assert (out / "manifest.jsonl").exists()
        assert len(list(out.glob("*.ppm"))) == 3
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["command"] == "gen-data"
        assert cfg["seed"] == 1

    def test_deterministic_across_runs(self, tmp_path):
        digests = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            run("gen-data", "--scenes", "3", "--seed", "8", "--out", str(out))
            blob = (out / "manifest.jsonl").read_bytes()
            for p in sorted(out.glob("*.ppm")):
                blob += p.read_bytes()
            digests.append(hashlib.sha256(blob).hexdigest())
        assert digests[0] == digests[1]

    def test_missing_required_flag_is_usage_error(self):
        assert run("gen-data", "--seed", "1") == 1

    def test_unknown_command_is_usage_error(self):
        assert run("frobnicate") == 1


class TestTrain:
    def test_checkpoint_and_loss_curve(self, workspace):
        ckpt = workspace["ckpt"]
        assert ckpt.exists()
        lines = (ckpt.parent / "model.bin.loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,mean_loss"
        assert len(lines) == 2
        assert json.loads((ckpt.parent / "model.bin.config.json").read_text())["epochs"] == 1

    def test_lambda_sweep_writes_one_checkpoint_per_value(self, workspace, tmp_path):
        out = tmp_path / "m.bin"
        assert run("train", "--data", str(workspace["data"]), "--out", str(out),
                   "--epochs", "1", "--lambda", "0", "0.005") == 0
        assert (tmp_path / "m.lam0.bin").exists()
        assert (tmp_path / "m.lam0.005.bin").exists()

    def test_missing_dataset_is_data_error(self, tmp_path):
        assert run("train", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "m.bin")) == 2


class TestCaption:
    def test_one_record_per_scene(self, workspace, tmp_path):
        out = tmp_path / "caps.jsonl"
        assert run("caption", "--ckpt", str(workspace["ckpt"]),
                   "--data", str(workspace["data"]), "--out", str(out)) == 0
        records = read_jsonl(out)
        assert len(records) == 4
        assert all(r["method"] == "self" for r in records)

    def test_corrupt_checkpoint_is_data_error(self, workspace, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"not a checkpoint\n")
        assert run("caption", "--ckpt", str(bad),
                   "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "x.jsonl")) == 2


class TestForce:
    def test_limited_requires_steps(self, workspace, tmp_path):
        assert run("force", "--method", "limited",
                   "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "f.jsonl")) == 1

    def test_additive_requires_weight(self, workspace, tmp_path):
        assert run("force", "--method", "additive",
                   "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "f.jsonl")) == 1

    def test_self_method_matches_caption_command(self, workspace, tmp_path):
        caps, forced = tmp_path / "c.jsonl", tmp_path / "f.jsonl"
        run("caption", "--ckpt", str(workspace["ckpt"]),
            "--data", str(workspace["data"]), "--out", str(caps))
        assert run("force", "--method", "self", "--ckpt", str(workspace["ckpt"]),
                   "--data", str(workspace["data"]), "--out", str(forced)) == 0
        by_scene = {r["scene"]: r["caption"] for r in read_jsonl(caps)}
        for r in read_jsonl(forced):
            assert r["caption"] == by_scene[r["scene"]]

    def test_unlimited_bundle_structure(self, workspace, tmp_path):
        out = tmp_path / "u.jsonl"
        assert run("force", "--method", "unlimited", "--ckpt", str(workspace["ckpt"]),
                   "--data", str(workspace["data"]), "--out", str(out)) == 0
        records = read_jsonl(out)
        methods = {r["method"] for r in records}
        assert methods == {"self", "control", "unlimited"}
        assert sum(r["method"] == "self" for r in records) == 4
        assert sum(r["method"] == "control" for r in records) == 4
        for r in records:
            if r["method"] == "control":
                assert r["mirror"] == "unlimited"
            if r["method"] == "unlimited":
                assert isinstance(r["box"], int) and "category" in r

    def test_single_thread_matches_parallel(self, workspace, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run("force", "--method", "unlimited", "--ckpt", str(workspace["ckpt"]),
            "--data", str(workspace["data"]), "--out", str(a), "--threads", "1")
        run("force", "--method", "unlimited", "--ckpt", str(workspace["ckpt"]),
            "--data", str(workspace["data"]), "--out", str(b), "--threads", "4")
        assert a.read_bytes() == b.read_bytes()


class TestSweepAndRender:
    def test_sweep_then_render(self, workspace, tmp_path):
        sweep_out = tmp_path / "s.jsonl"
        assert run("sweep", "--mode", "limited", "--values", "1", "3", "5",
                   "--scene", "0", "--box", "0", "--ckpt", str(workspace["ckpt"]),
                   "--data", str(workspace["data"]), "--out", str(sweep_out)) == 0
        records = read_jsonl(sweep_out)
        assert [r["param"] for r in records] == [1, 3, 5]
        assert all("alpha_used" in r for r in records)
        fig = tmp_path / "fig.ppm"
        assert run("render", "--mode", "sweep", "--records", str(sweep_out),
                   "--data", str(workspace["data"]), "--out", str(fig)) == 0
        assert ppm.read_ppm(fig).ndim == 3

    def test_missing_scene_is_data_error(self, workspace, tmp_path):
        assert run("sweep", "--mode", "limited", "--values", "1",
                   "--scene", "999", "--ckpt", str(workspace["ckpt"]),
                   "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "s.jsonl")) == 2

    def test_render_without_alpha_is_data_error(self, workspace, tmp_path):
        caps = tmp_path / "c.jsonl"
        run("caption", "--ckpt", str(workspace["ckpt"]),
            "--data", str(workspace["data"]), "--out", str(caps))
        assert run("render", "--mode", "overlay", "--records", str(caps),
                   "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "f.ppm")) == 2

    def test_render_overlay_with_alpha(self, workspace, tmp_path):
        caps = tmp_path / "c.jsonl"
        run("caption", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
            "--out", str(caps), "--dump-alpha")
        fig = tmp_path / "f.ppm"
        assert run("render", "--mode", "overlay", "--records", str(caps),
                   "--data", str(workspace["data"]), "--out", str(fig),
                   "--scene", "1") == 0
        assert fig.exists()


class TestEvaluate:
    def test_report_from_force_bundle(self, workspace, tmp_path):
        bundle = tmp_path / "u.jsonl"
        run("force", "--method", "unlimited", "--ckpt", str(workspace["ckpt"]),
            "--data", str(workspace["data"]), "--out", str(bundle))
        report = tmp_path / "report.csv"
        assert run("evaluate", "--bundle", str(bundle), "--ckpt", str(workspace["ckpt"]),
                   "--report", str(report)) == 0
        lines = report.read_text().splitlines()
        assert lines[0].startswith("method,param,general_sens")
        assert lines[1].startswith("unlimited,")
        assert (tmp_path / "report.csv.txt").exists()

    def test_missing_bundle_is_data_error(self, workspace, tmp_path):
        assert run("evaluate", "--bundle", str(tmp_path / "nope.jsonl"),
                   "--ckpt", str(workspace["ckpt"]),
                   "--report", str(tmp_path / "r.csv")) == 2

import csv
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from dsaa import checkpoint
from dsaa import config as configmod
from dsaa.cli import init_dsaa, main

SMALL = ["--set", "data.train_records=16", "--set", "data.eval_records_per_subset=4"]


def run(*args, tmp):
    return main([*args, "--data-dir", str(tmp / "data"), "--out-dir", str(tmp / "out")])


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    assert run("gen-data", *SMALL, tmp=tmp) == 0
    return tmp


class TestConfig:
    def test_defaults_and_digest(self):
        cfg = configmod.load(None, [], environ={})
        assert cfg.seed == 7 and cfg.training.steps == 2000 and cfg.training.lr == 1e-3
        assert cfg.digest() == configmod.load(None, [], environ={}).digest()
        assert configmod.load(None, ["seed=8"], environ={}).digest() != cfg.digest()

    def test_paths_do_not_change_digest(self):
        a = configmod.load(None, ["paths.out_dir=x"], environ={})
        assert a.digest() == configmod.load(None, [], environ={}).digest()

    def test_env_overrides(self):
        cfg = configmod.load(None, [], environ={"DSAA_OUT_DIR": "/tmp/o", "DSAA_EXTRACT_ENDPOINT": "http://h/x"})
        assert cfg.paths.out_dir == "/tmp/o" and cfg.extraction.endpoint == "http://h/x"

    def test_flags_beat_env(self):
        cfg = configmod.load(None, ["paths.out_dir=flag"], environ={"DSAA_OUT_DIR": "env"})
        assert cfg.paths.out_dir == "flag"

    def test_file_roundtrip(self, tmp_path):
        cfg = configmod.load(None, ["training.steps=5", "encoder.modulated_layers=[1,2]"], environ={})
        (tmp_path / "c.json").write_text(cfg.dumps())
        again = configmod.load(tmp_path / "c.json", [], environ={})
        assert again.digest() == cfg.digest() and again.encoder.modulated_layers == (1, 2)

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        assert main(["show-config", "--set", "training.stepz=3"]) == 2
        assert "stepz" in capsys.readouterr().err


class TestGenData:
    def test_manifest_records_digests(self, generated):
        man = json.loads((generated / "data" / "manifest.json").read_text())
        assert man["seed"] == 7
        for split in ("train", "eval"):
            assert man["datasets"][split] == checkpoint.file_digest(generated / "data" / f"{split}.jsonl")
        header = json.loads((generated / "data" / "eval.jsonl").read_text().splitlines()[0])
        assert header["config_digest"] == man["config_digest"]

    def test_repeat_identical(self, generated, tmp_path):
        assert run("gen-data", *SMALL, tmp=tmp_path) == 0
        a = json.loads((generated / "data" / "manifest.json").read_text())["datasets"]
        b = json.loads((tmp_path / "data" / "manifest.json").read_text())["datasets"]
        assert a == b

    def test_too_many_negatives(self, tmp_path, capsys):
        assert run("gen-data", "--set", "data.eval_negatives=11", tmp=tmp_path) == 2
        assert "10" in capsys.readouterr().err

    def test_generation_failure_exit_3(self, tmp_path):
        assert run("gen-data", "--set", "data.train_negatives=40", tmp=tmp_path) == 3


class TestTrain:
    def test_zero_steps_is_init(self, generated, tmp_path):
        out = tmp_path / "o"
        assert main(["train", "--data-dir", str(generated / "data"), "--out-dir", str(out), "--set", "training.steps=0"]) == 0
        arrays, meta = checkpoint.load(out / "train" / "dsaa.ckpt.json")
        cfg = configmod.load(None, ["training.steps=0"], environ={})
        ref = init_dsaa(cfg, 64).to_arrays()
        assert set(arrays) == set(ref)
        for k in ref:
            np.testing.assert_array_equal(arrays[k], ref[k])
        assert meta["config_digest"] == cfg.digest()

    def test_log_and_checkpoints(self, generated, tmp_path):
        out = tmp_path / "o"
        args = ["train", "--data-dir", str(generated / "data"), "--out-dir", str(out),
                "--set", "training.steps=4", "--set", "training.checkpoint_every=2"]
        assert main(args) == 0
        log = [json.loads(line) for line in (out / "train" / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in log] == [0, 1, 2, 3]
        assert (out / "train" / "dsaa_step00002.ckpt.json").exists()
        first = (out / "train" / "dsaa.ckpt.json").read_bytes()
        assert main(args) == 0
        assert (out / "train" / "dsaa.ckpt.json").read_bytes() == first

    def test_nan_exit_4(self, generated, tmp_path, monkeypatch):
        import dsaa.training as training

        real = training.batch_losses

        def poisoned(pipeline, world, items, lw, step, *a):
            loss, values = real(pipeline, world, items, lw, step, *a)
            if step == 2:
                values["total"] = float("nan")
            return loss, values

        monkeypatch.setattr(training, "batch_losses", poisoned)
        out = tmp_path / "o"
        code = main(["train", "--data-dir", str(generated / "data"), "--out-dir", str(out),
                     "--set", "training.steps=5", "--set", "training.checkpoint_every=1"])
        assert code == 4
        good, _ = checkpoint.load(out / "train" / "dsaa_last_good.ckpt.json")
        step2, _ = checkpoint.load(out / "train" / "dsaa_step00002.ckpt.json")
        for k in good:
            np.testing.assert_array_equal(good[k], step2[k])
        assert not (out / "train" / "dsaa.ckpt.json").exists()


class TestEval:
    def test_oracle_all_ones(self, generated):
        assert run("eval", "oracle", tmp=generated) == 0
        rep = json.loads((generated / "out" / "eval_oracle" / "report.json").read_text())
        assert all(v in (1.0, None) for v in rep["columns"].values()) and rep["average"] == 1.0

    def test_missing_dataset(self, tmp_path, capsys):
        assert run("eval", "baseline", tmp=tmp_path) == 2
        assert "gen-data" in capsys.readouterr().err

    def test_dimension_mismatch_names_digests(self, generated, tmp_path, capsys):
        bad = init_dsaa(configmod.load(None, [], environ={}), 32)
        path = tmp_path / "bad.ckpt.json"
        digest = checkpoint.save(path, bad.to_arrays(), {})
        assert run("eval", str(path), tmp=generated) == 2
        err = capsys.readouterr().err
        cfg_digest = configmod.load(None, [], environ={}).digest()
        assert digest in err and cfg_digest in err

    def test_baseline_table(self, generated):
        assert run("eval", "baseline", tmp=generated) == 0
        rows = list(csv.reader((generated / "out" / "eval_baseline" / "map_table.csv").open()))
        assert rows[0][-1] == "Average" and len(rows) == 2


class TestAnalyze:
    def test_single(self, generated):
        assert run("analyze", "baseline", tmp=generated) == 0
        rows = list(csv.reader((generated / "out" / "analysis" / "suppression.csv").open()))
        assert rows[0] == ["category_type", "baseline"]
        assert [r[0] for r in rows[1:]] == ["Neutral Category", "Explicit Category"]

    def test_two_columns(self, generated, tmp_path):
        ck = tmp_path / "dsaa.ckpt.json"
        dsaa = init_dsaa(configmod.load(None, [], environ={}), 64)
        for t in dsaa.named().values():
            t.data = t.data + 0.1
        checkpoint.save(ck, dsaa.to_arrays(), {"dsaa": dsaa.hyper()})
        assert run("analyze", "Baseline=baseline", f"DSAA={ck}", tmp=generated) == 0
        rows = list(csv.reader((generated / "out" / "analysis" / "suppression.csv").open()))
        assert rows[0] == ["category_type", "Baseline", "DSAA"]
        man = json.loads((generated / "out" / "analysis" / "manifest.json").read_text())
        assert man["checkpoints"]["DSAA"] == checkpoint.file_digest(ck)
        assert (generated / "out" / "analysis" / "separation_DSAA.svg").exists()

    def test_missing_checkpoint(self, generated):
        assert run("analyze", "/nonexistent/x.ckpt.json", tmp=generated) == 2


class _Mock(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        words = body["caption"].split()
        payload = json.dumps({"attributes": [w for w in words if w in ("red", "leather", "black")] + ["golden"]}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


class TestExtract:
    def test_lexicon(self, tmp_path):
        caps = tmp_path / "caps.txt"
        caps.write_text("a red leather chair\na chair\n")
        out = tmp_path / "ann.jsonl"
        assert run("extract", str(caps), "--out", str(out), tmp=tmp_path) == 0
        recs = [json.loads(line) for line in out.read_text().splitlines()]
        assert recs[0]["phrases"] == ["red", "leather"]
        assert [s["indices"] for s in recs[0]["spans"]] == [[2], [3]]
        assert recs[1]["spans"] == [] and recs[1]["fallback"] is False

    def test_empty(self, tmp_path):
        (tmp_path / "caps.txt").write_text("")
        out = tmp_path / "ann.jsonl"
        assert run("extract", str(tmp_path / "caps.txt"), "--out", str(out), tmp=tmp_path) == 0
        assert out.read_text() == ""

    def test_remote_mock(self, tmp_path):
        server = ThreadingHTTPServer(("127.0.0.1", 0), _Mock)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        try:
            caps = tmp_path / "caps.txt"
            caps.write_text("a black leather bag\n")
            out = tmp_path / "ann.jsonl"
            url = f"http://127.0.0.1:{server.server_address[1]}/x"
            code = run("extract", str(caps), "--out", str(out), "--set", "extraction.mode=remote",
                       "--set", f"extraction.endpoint={url}", tmp=tmp_path)
            assert code == 0
            rec = json.loads(out.read_text())
            assert rec["phrases"] == ["black", "leather"] and not rec["fallback"]
        finally:
            server.shutdown()
            server.server_close()

    def test_remote_down(self, tmp_path, caplog):
        caps = tmp_path / "caps.txt"
        caps.write_text("a red chair\na blue mug\n")
        out = tmp_path / "ann.jsonl"
        code = run("extract", str(caps), "--out", str(out), "--set", "extraction.mode=remote",
                   "--set", "extraction.endpoint=http://127.0.0.1:9/x", "--set", "extraction.retries=0", tmp=tmp_path)
        assert code == 0
        recs = [json.loads(line) for line in out.read_text().splitlines()]
        assert all(r["fallback"] for r in recs) and recs[0]["phrases"] == ["red"]
        assert "2 of 2" in caplog.text

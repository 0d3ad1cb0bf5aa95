import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest
import torch

import seqboat  # noqa: F401
from seqboat import analysis
from seqboat.checkpoint import save_model
from seqboat.cli import main
from seqboat.config import ConfigError, parse_config
from seqboat.model import ModelConfig, model_init

from oracles import span_from_edges

SMOKE = """
[task]
kind = assoc_recall
seq_len = 16
vocab = 8
num_pairs = 3
eval_size = 32

[model]
n_layers = 2
d_m = 8
h = 2
w = 4

[train]
steps = 20
steps_per_epoch = 10
batch_size = 4
eval_size = 32
lr = {lr}
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "smoke.ini"
    cfg.write_text(SMOKE.format(lr="3e-3"))
    assert main(["train", "--config", str(cfg), "--out", str(d)]) == 0
    return d


class TestConfig:
    def test_defaults_from_task(self):
        run = parse_config(SMOKE.format(lr=0))
        assert run.model.vocab == run.task.model_vocab == 10
        assert run.model.max_len == 16
        assert run.train.lr == 0.0

    def test_missing_field_named(self):
        text = SMOKE.format(lr=0).replace("d_m = 8\n", "")
        with pytest.raises(ConfigError, match="d_m"):
            parse_config(text)

    def test_unknown_field_with_line(self):
        text = SMOKE.format(lr=0).replace("h = 2", "heads = 2")
        with pytest.raises(ConfigError, match=r"<config>:\d+: \[model\] heads: unknown field"):
            parse_config(text)

    def test_bad_type(self):
        with pytest.raises(ConfigError, match="steps"):
            parse_config(SMOKE.format(lr=0).replace("steps = 20", "steps = many"))

    def test_invalid_value(self):
        with pytest.raises(ConfigError, match="mode"):
            parse_config(SMOKE.format(lr=0).replace("w = 4", "w = 4\nmode = banded"))

    def test_window_longer_than_sequence(self):
        with pytest.raises(ConfigError, match="exceeds"):
            parse_config(SMOKE.format(lr=0).replace("w = 4", "w = 32"))

    def test_syntax_error(self):
        with pytest.raises(ConfigError):
            parse_config("[task]\nkind assoc_recall\n")

    def test_bundled_configs_parse(self):
        for p in sorted(Path(__file__).parent.parent.glob("configs/*.ini")):
            parse_config(p.read_text(), p)


class TestTrainCommand:
    def test_missing_field_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text(SMOKE.format(lr=0).replace("n_layers = 2\n", ""))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "n_layers" in capsys.readouterr().err

    def test_unreadable_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.ini")]) == 2

    def test_lr_zero_flat_csv(self, tmp_path):
        cfg = tmp_path / "smoke.ini"
        cfg.write_text(SMOKE.format(lr=0))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader(io.StringIO((tmp_path / "report.csv").read_text())))
        assert len(rows) == 2 and rows[0]["metric"] == rows[1]["metric"]

    def test_outputs(self, trained):
        assert (trained / "checkpoint.bin").exists()
        assert (trained / "report.csv").read_bytes().endswith(b"\n")


class TestTrace:
    def test_schema_and_recount(self, trained):
        assert main(["trace", "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(trained), "--samples", "6"]) == 0
        trace = json.loads((trained / "trace.json").read_text())
        assert set(trace) >= {"config_hash", "layers"}
        for lay in trace["layers"]:
            assert set(lay) >= {"layer", "counts", "mean", "std", "confidence", "attention_edges"}
            assert len(lay["counts"]) == len(lay["confidence"]) == len(lay["attention_edges"]) == 6
            # recount from the per-sequence edge lists: one entry per activated query
            for count, edges in zip(lay["counts"], lay["attention_edges"]):
                assert count == len(edges)
                assert all(0 <= q < 16 and all(0 <= k < 16 for k in ks) for q, ks in edges)
            assert lay["mean"] == pytest.approx(np.mean(lay["counts"]), abs=1e-12)
            assert lay["std"] == pytest.approx(np.std(lay["counts"]), abs=1e-12)
            assert all(0.5 <= c <= 1.0 for row in lay["confidence"] for c in row)

    def test_single_sample_std_zero(self, trained):
        out = trained / "k1"
        assert main(["trace", "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(out), "--samples", "1"]) == 0
        trace = json.loads((out / "trace.json").read_text())
        assert all(lay["std"] == 0 for lay in trace["layers"])

    def test_deterministic(self, trained):
        a, b = trained / "d1", trained / "d2"
        for d in (a, b):
            main(["trace", "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(d), "--samples", "4", "--seed", "3"])
        assert (a / "trace.json").read_bytes() == (b / "trace.json").read_bytes()

    def test_config_mismatch_exit_2(self, trained, tmp_path, capsys):
        cfg = tmp_path / "other.ini"
        cfg.write_text(SMOKE.format(lr=0).replace("d_m = 8", "d_m = 16"))
        rc = main(["trace", "--checkpoint", str(trained / "checkpoint.bin"), "--config", str(cfg), "--out", str(tmp_path)])
        assert rc == 2
        assert "d_m" in capsys.readouterr().err

    def test_forced_skip_counts_zero(self):
        m = model_init(ModelConfig(vocab=10, d_m=8, h=2, w=4, max_len=16, gau="off"))
        trace = analysis.collect_trace(m, torch.randint(0, 10, (5, 16)))
        assert all(c == 0 for lay in trace["layers"] for c in lay["counts"])


class TestSpan:
    def test_matches_independent_oracle(self, trained):
        assert main(["span", "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(trained), "--samples", "8"]) == 0
        assert main(["trace", "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(trained), "--samples", "8"]) == 0
        trace = json.loads((trained / "trace.json").read_text())
        rows = list(csv.DictReader(io.StringIO((trained / "span.csv").read_text())))
        for row, lay in zip(rows, trace["layers"]):
            ref = span_from_edges(lay["attention_edges"])
            assert float(row["mean_span"]) == pytest.approx(ref, abs=1e-12)
            assert row["distance"] == "absolute"

    def test_single_token_span_zero(self):
        trace = {"layers": [{"layer": 0, "attention_edges": [[[5, [5]]], [[2, [2]]]]}]}
        assert analysis.span_from_trace(trace)[0]["mean_span"] == 0.0

    def test_dense_causal_half_window(self):
        # a == 1 everywhere, causal window w: for q >= w-1 the keys are q-w+1..q, mean distance (w-1)/2
        w, n = 16, 2048
        m = model_init(ModelConfig(vocab=4, n_layers=1, d_m=4, h=1, w=w, max_len=n, gau="dense"))
        trace = analysis.collect_trace(m, torch.zeros(1, n, dtype=torch.long))
        span = analysis.span_from_trace(trace)[0]["mean_span"]
        assert abs(span - w / 2) < 1.0
        assert span == pytest.approx(span_from_edges(trace["layers"][0]["attention_edges"]))

    def test_gap_exceeds_window(self):
        # uniform activation gap g with w = 2: every query sees itself and the previous active token
        w, g, n = 2, 8, 80
        m = model_init(ModelConfig(vocab=4, n_layers=1, d_m=4, h=1, w=w, max_len=n))
        force = torch.zeros(1, n)
        force[0, ::g] = 1
        trace = analysis.collect_trace(m, torch.zeros(1, n, dtype=torch.long), force=force)
        edges = trace["layers"][0]["attention_edges"][0]
        ref = span_from_edges([edges])
        r = n // g
        assert ref == pytest.approx((r - 1) * (g / 2) / r)
        assert analysis.span_from_trace(trace)[0]["mean_span"] == pytest.approx(ref)
        assert ref > w


class TestBench:
    def test_flop_rows(self):
        cfg = ModelConfig(vocab=6, n_layers=1, d_m=8, h=2, w=4, max_len=64)
        rows = analysis.bench(cfg, 64, timing=False)
        flops = {r["p"]: r["attn_flops"] for r in rows}
        assert flops[0.0] == 0
        assert abs(flops[1.0] / flops[0.5] - 2) < 0.2
        double = {r["p"]: r["attn_flops"] for r in analysis.bench(cfg, 128, timing=False)}
        assert abs(double[0.5] / flops[0.5] - 2) < 0.2

    def test_cli_columns(self, tmp_path):
        cfg = tmp_path / "b.ini"
        cfg.write_text(
            SMOKE.format(lr=0) + "\n[bench]\nseq_len = 16\nbatch_size = 2\nsteps = 2\nwarmup = 1\nrates = 0,1\n"
        )
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "bench.csv").read_text().splitlines()
        assert lines[0] == "p,attn_flops,step_ms,token_us"
        assert len(lines) == 3

    def test_even_mask(self):
        for p in (0.0, 0.25, 0.5, 1.0):
            assert analysis.even_mask(64, p).sum().item() == 64 * p


class TestDecode:
    def test_streaming_matches_parallel(self, trained, tmp_path):
        ckpt = str(trained / "checkpoint.bin")
        assert main(["decode", "--checkpoint", ckpt, "--out", str(tmp_path), "--samples", "3"]) == 0
        rows = list(csv.DictReader(io.StringIO((tmp_path / "decode.csv").read_text())))
        assert len(rows) == 3
        from seqboat.checkpoint import load_model
        from seqboat.tasks import TaskSpec, make_batch

        model, _, meta = load_model(ckpt)
        batch = make_batch(TaskSpec(**meta["task"]), "eval", 0, 3)
        with torch.no_grad():
            preds = model(batch.inputs)[0][:, -1].argmax(-1).tolist()
        assert [int(r["predicted"]) for r in rows] == preds

    def test_eval_json(self, trained, capsys):
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.bin"), "--samples", "16"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert 0 <= out["accuracy"] <= 1 and out["samples"] == 16

    def test_missing_checkpoint_exit_2(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.bin")]) == 2
        assert main(["eval"]) == 2

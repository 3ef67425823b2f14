"""CLI subcommands: exit codes, artifacts, idempotency, licence safety."""

from pathlib import Path

import pytest

from conftest import FIXTURES, NON_OPEN_SENTINEL, synthetic_tagged_sentences, \
    tagged_doc
from emfr import cli
from emfr.tagger import write_tagged_file

CONFIGS = Path(__file__).parent.parent / "configs"


def run(*argv: str) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture()
def ingested(tmp_path) -> Path:
    out = tmp_path / "corpus"
    sources = sorted((FIXTURES / "src").iterdir())
    code = run("ingest", "--meta", FIXTURES / "meta.tsv", "--out", out, *sources)
    assert code == 0
    return out


def test_no_arguments_usage_exit_2(capsys):
    assert run() == 2


def test_unknown_subcommand_exit_2():
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2


def test_help_available_for_every_subcommand():
    parser = cli.build_parser()
    for name in ("ingest", "partition", "stats", "normalize", "bpe-train",
                 "bpe-encode", "bpe-decode", "pretrain", "finetune", "tag",
                 "eval", "carbon"):
        with pytest.raises(SystemExit) as exc:
            parser.parse_args([name, "--help"])
        assert exc.value.code == 0


def test_runtime_error_exit_1(tmp_path):
    assert run("stats", "--in", tmp_path) == 1


def test_carbon_prints_known_row(capsys):
    code = run("carbon", "--profile", CONFIGS / "carbon" / "pretrain_cluster.cfg")
    assert code == 0
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if l.startswith("pretrain"))
    assert line.rstrip().endswith("46.11")


def test_carbon_two_profiles_total(capsys, tmp_path):
    code = run("carbon",
               "--profile", CONFIGS / "carbon" / "pretrain_cluster.cfg",
               "--profile", CONFIGS / "carbon" / "eval_node.cfg",
               "--out", tmp_path / "report")
    assert code == 0
    assert "46.14" in capsys.readouterr().out
    assert (tmp_path / "report" / "carbon.tsv").exists()
    assert (tmp_path / "report" / "carbon.png").exists()


def test_ingest_writes_sorted_corpus(ingested):
    text = (ingested / "corpus.jsonl").read_text(encoding="utf-8")
    ids = [line.split('"id": "')[1].split('"')[0]
           for line in text.splitlines()]
    assert ids == sorted(ids)
    assert len(ids) == 5


def test_ingest_missing_metadata_exit_1(tmp_path, capsys):
    src = tmp_path / "orphan.txt"
    src.write_text("sans métadonnées", encoding="utf-8")
    out = tmp_path / "corpus"
    meta = tmp_path / "meta.tsv"
    meta.write_text("file\tid\n", encoding="utf-8")
    assert run("ingest", "--meta", meta, "--out", out, src) == 1
    assert "missing metadata" in capsys.readouterr().err


def test_ingest_idempotent_byte_identical(tmp_path):
    sources = sorted((FIXTURES / "src").iterdir())
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        assert run("ingest", "--meta", FIXTURES / "meta.tsv", "--out", out,
                   *sources) == 0
    assert (out1 / "corpus.jsonl").read_bytes() == (out2 / "corpus.jsonl").read_bytes()


def test_stats_writes_artifacts(ingested, tmp_path, capsys):
    out = tmp_path / "report"
    assert run("stats", "--in", ingested, "--hist-width", "25",
               "--out", out) == 0
    assert "total tokens:" in capsys.readouterr().out
    stats_tsv = (out / "stats.tsv").read_text(encoding="utf-8")
    assert stats_tsv.splitlines()[0] == "origin\ttokens"
    assert (out / "histogram.tsv").exists()
    assert (out / "histogram.png").exists()


def test_normalize_refuses_no_modification_without_force(ingested, tmp_path,
                                                         capsys):
    out = tmp_path / "norm"
    assert run("normalize", "--in", ingested, "--out", out) == 0
    err = capsys.readouterr().err
    assert "sermon_1688" in err and "no_modification" in err
    import json
    records = {json.loads(l)["id"]: json.loads(l)
               for l in (out / "corpus.jsonl").read_text().splitlines()}
    assert records["sermon_1688"]["linguistic_status"] == "original"
    assert "ſ" in records["sermon_1688"]["body"]          # untouched
    assert records["letter_1624"]["linguistic_status"] == "normalised"
    assert "ſ" not in records["letter_1624"]["body"]
    assert "voſtre" not in records["letter_1624"]["body"]


def test_normalize_force_rewrites_everything(ingested, tmp_path):
    out = tmp_path / "norm"
    assert run("normalize", "--in", ingested, "--out", out, "--force") == 0
    import json
    records = [json.loads(l) for l in (out / "corpus.jsonl").read_text().splitlines()]
    assert all(r["linguistic_status"] == "normalised" for r in records)


def test_bpe_cli_round_trip(ingested, tmp_path, capsys):
    model_dir = tmp_path / "bpe"
    assert run("bpe-train", "--vocab-size", "400", "--in", ingested,
               "--out", model_dir) == 0
    capsys.readouterr()  # clear the training message
    assert run("bpe-encode", "--model", model_dir, "--text", "dõt vne") == 0
    ids = capsys.readouterr().out.strip()
    assert run("bpe-decode", "--model", model_dir, "--ids", ids) == 0
    assert capsys.readouterr().out.rstrip("\n") == "dõt vne"


def test_bpe_train_jobs_deterministic(ingested, tmp_path):
    m1, m8 = tmp_path / "m1", tmp_path / "m8"
    assert run("bpe-train", "--vocab-size", "400", "--in", ingested,
               "--out", m1, "--jobs", "1") == 0
    assert run("bpe-train", "--vocab-size", "400", "--in", ingested,
               "--out", m8, "--jobs", "8") == 0
    for name in ("vocab", "merges", "config"):
        assert (m1 / name).read_bytes() == (m8 / name).read_bytes()


def test_licence_safety_distributable_outputs_scanned(ingested, tmp_path):
    # Partition, then run every downstream stage on the distributable side
    # and byte-scan everything produced for the planted sentinel.
    work = tmp_path / "work"
    assert run("partition", "--in", ingested, "--out", work) == 0
    distributable = work / "distributable"
    assert run("normalize", "--in", distributable, "--out", work / "norm") == 0
    assert run("bpe-train", "--vocab-size", "350", "--in", distributable,
               "--out", work / "bpe") == 0
    assert run("stats", "--in", distributable, "--out", work / "stats") == 0

    sentinel = NON_OPEN_SENTINEL.encode("ascii")
    hits = []
    for path in sorted(work.rglob("*")):
        if path.is_file() and "withheld" not in path.parts:
            if sentinel in path.read_bytes():
                hits.append(path)
    assert hits == []
    # the withheld side does carry it (the document is not lost)
    assert sentinel in (work / "withheld" / "corpus.jsonl").read_bytes()


def test_full_toy_pipeline_end_to_end(ingested, tmp_path, capsys):
    work = tmp_path
    bpe_dir = work / "bpe"
    assert run("bpe-train", "--vocab-size", "350", "--in", ingested,
               "--out", bpe_dir) == 0

    config = work / "pretrain.cfg"
    config.write_text(
        "n_layers = 1\nhidden_dim = 32\nn_heads = 2\nffn_dim = 48\n"
        "max_positions = 32\ndropout = 0.0\n"
        "peak_lr = 0.001\nwarmup_steps = 2\ntotal_steps = 6\n"
        "batch_sequences = 4\nmax_seq_len = 32\n", encoding="utf-8")
    ckpt = work / "ckpt"
    assert run("pretrain", "--config", config, "--corpus", ingested,
               "--bpe", bpe_dir, "--out", ckpt) == 0
    assert (ckpt / "loss_log.tsv").exists()
    assert (ckpt / "loss_curve.png").exists()
    assert (ckpt / "final" / "params.bin").exists()

    train_path = work / "train.tsv"
    dev_path = work / "dev.tsv"
    test_path = work / "test.tsv"
    write_tagged_file([tagged_doc(synthetic_tagged_sentences(30, seed=1))],
                      train_path)
    write_tagged_file([tagged_doc(synthetic_tagged_sentences(8, seed=2))],
                      dev_path)
    write_tagged_file(
        [tagged_doc(synthetic_tagged_sentences(4, seed=3), year=1650,
                    genre="drama", state="original"),
         tagged_doc(synthetic_tagged_sentences(4, seed=4), year=1750,
                    genre="varia", state="normalised")],
        test_path)

    ft_config = work / "finetune.cfg"
    ft_config.write_text("lr = 0.0005\nepochs = 2\n", encoding="utf-8")
    tagger_dir = work / "tagger"
    assert run("finetune", "--config", ft_config, "--train", train_path,
               "--dev", dev_path, "--encoder", ckpt / "final",
               "--bpe", bpe_dir, "--out", tagger_dir) == 0
    assert (tagger_dir / "history.tsv").exists()

    tagged_out = work / "tagged.tsv"
    assert run("tag", "--tagger", tagger_dir, "--in", test_path,
               "--out", tagged_out) == 0
    assert tagged_out.exists()

    report_dir = work / "report"
    assert run("eval", "--tagger", tagger_dir, "--test", test_path,
               "--out", report_dir) == 0
    grid = capsys.readouterr().out
    assert "ORIGINAL" in grid and "NORMALISED" in grid
    assert (report_dir / "report.tsv").exists()
    assert (report_dir / "report.txt").exists()
    assert (report_dir / "report.png").exists()


def test_pretrain_resume_from_checkpoint_cli(ingested, tmp_path):
    bpe_dir = tmp_path / "bpe"
    assert run("bpe-train", "--vocab-size", "350", "--in", ingested,
               "--out", bpe_dir) == 0
    config = tmp_path / "cfg"
    config.write_text(
        "n_layers = 1\nhidden_dim = 32\nn_heads = 2\nffn_dim = 48\n"
        "max_positions = 32\ndropout = 0.0\npeak_lr = 0.001\n"
        "warmup_steps = 2\ntotal_steps = 4\nbatch_sequences = 4\n"
        "max_seq_len = 32\n", encoding="utf-8")
    first = tmp_path / "run1"
    assert run("pretrain", "--config", config, "--corpus", ingested,
               "--bpe", bpe_dir, "--out", first, "--checkpoint-every", "2") == 0
    second = tmp_path / "run2"
    assert run("pretrain", "--config", config, "--corpus", ingested,
               "--bpe", bpe_dir, "--out", second,
               "--resume", first / "step00000002") == 0
    log1 = (first / "loss_log.tsv").read_text().splitlines()
    log2 = (second / "loss_log.tsv").read_text().splitlines()
    assert log2[1:] == log1[3:]  # steps 2..3 reproduced bit-identically

"""Config files, pipeline orchestration, baselines, transfer, exports, CLI.

Percentage arithmetic is checked against an independent decimal-module
oracle; pipeline determinism is checked by byte comparison of metrics files
across rerun, resume, and parallel execution.
"""

import decimal
import os

import numpy as np
import pytest

from xprompt import cli
from xprompt import harness as hz
from xprompt import pruning as pr
from xprompt.checkpoint import load_prompt, save_prompt
from xprompt.errors import ConfigError, DataError
from xprompt.prompt import InitStrategy, init_prompt


# --- fixtures -----------------------------------------------------------------


def micro_overrides(out: str) -> dict[str, object]:
    return {
        "backbone.vocab_size": 16, "backbone.embed_dim": 16, "backbone.layers": 1,
        "backbone.heads": 2, "backbone.max_seq_len": 32, "backbone.seed": 3,
        "pretrain.steps": 80, "pretrain.lr": 0.01, "pretrain.extra_sequences": 40,
        "task.name": "micro", "task.kind": "majority_class",
        "task.seq_len_min": 5, "task.seq_len_max": 9,
        "task.train_size": 48, "task.dev_size": 32, "task.seed": 11,
        "prompt.m": 6, "prompt.k": 4, "optim.lr": 0.05,
        "tune.epochs": 3, "tune.batch_size": 16,
        "prune.token_ratios": (0.34,), "prune.piece_ratios": (0.25,),
        "prune.retrain_epochs": 2, "run.seeds": (1, 2), "run.out": out,
    }


def micro_cfg(out: str, **extra) -> hz.RunConfig:
    return hz.RunConfig.from_mapping({**micro_overrides(out), **extra})


@pytest.fixture(scope="module")
def pipe_run(tmp_path_factory):
    """One finished micro pipeline run shared by read-only tests."""
    out = str(tmp_path_factory.mktemp("run") / "base")
    cfg = micro_cfg(out)
    records = hz.run_pipeline(cfg)
    return cfg, out, records


def read(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


# --- config files -----------------------------------------------------------------


def test_template_round_trips(tmp_path):
    path = str(tmp_path / "run.cfg")
    hz.write_template(path)
    cfg = hz.RunConfig.from_file(path)
    assert cfg.values == hz.RunConfig.from_mapping().values
    assert cfg.config_hash() == hz.RunConfig.from_mapping().config_hash()


def test_template_protocol_defaults(tmp_path):
    path = str(tmp_path / "run.cfg")
    hz.write_template(path)
    cfg = hz.RunConfig.from_file(path)
    assert cfg["prompt.m"] == 20
    assert cfg["prompt.k"] == 16
    grid = tuple(round(0.1 * i, 1) for i in range(1, 10))
    assert cfg["prune.token_ratios"] == grid
    assert cfg["prune.piece_ratios"] == grid
    assert cfg["tune.epochs"] == 100
    assert cfg["tune.batch_size"] == 16
    assert cfg["optim.weight_decay"] == 1e-5


@pytest.mark.parametrize("line, fragment", [
    ("bogus.key = 3", "unknown key"),
    ("prompt.m 4", "expected 'key = value'"),
    ("prompt.m = four", "cannot parse"),
    ("prompt.m = 4\nprompt.m = 5", "duplicate key"),
])
def test_config_parse_errors(line, fragment):
    with pytest.raises(ConfigError, match=fragment):
        hz.RunConfig.from_text(line)


def test_config_parse_reports_line_numbers():
    with pytest.raises(ConfigError, match="line 3"):
        hz.RunConfig.from_text("# comment\nprompt.m = 4\nwhat = ever\n")


def test_config_accepts_comments_and_blanks():
    cfg = hz.RunConfig.from_text("\n# note\nprompt.m = 7\n\n")
    assert cfg["prompt.m"] == 7


def test_config_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        hz.RunConfig.from_file("/nonexistent/run.cfg")


def test_config_hash_ignores_out_dir_only():
    a = hz.RunConfig.from_mapping({"run.out": "x"})
    b = hz.RunConfig.from_mapping({"run.out": "y"})
    c = hz.RunConfig.from_mapping({"run.out": "x", "prompt.m": 21})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_config_validate_errors(tmp_path):
    with pytest.raises(ConfigError):
        hz.RunConfig.from_mapping({"prompt.m": 0}).validate()
    with pytest.raises(ConfigError):
        hz.RunConfig.from_mapping({"run.seeds": ()}).validate()
    with pytest.raises(ConfigError):
        hz.RunConfig.from_mapping({"prune.negative_ratio": 1.0}).validate()
    with pytest.raises(ConfigError):
        hz.RunConfig.from_mapping({"prompt.init": "zeros"}).validate()
    with pytest.raises(ConfigError):
        hz.RunConfig.from_mapping({"tune.epochs": -1}).validate()
    with pytest.raises(ConfigError):
        hz.RunConfig.from_mapping({"task.train_path": "/nope.jsonl",
                                   "task.dev_path": "/nope.jsonl"}).validate()
    train = tmp_path / "t.jsonl"
    train.write_text('{"tokens": [2, 3], "label": 0}\n')
    with pytest.raises(ConfigError, match="pair"):
        hz.RunConfig.from_mapping({"task.train_path": str(train)}).validate()
    with pytest.raises(ConfigError):
        hz.RunConfig.from_mapping({"prune.rule": "top_k"}).validate()


def test_with_overrides_rejects_unknown():
    with pytest.raises(ConfigError):
        hz.RunConfig.from_mapping().with_overrides(prompt__width=3)


# --- percentage arithmetic -----------------------------------------------------------


def decimal_percent(count: int, total: int) -> str:
    """Independent rendering: exact decimal division, half-even to 4 places."""
    with decimal.localcontext() as ctx:
        ctx.prec = 60
        value = decimal.Decimal(count * 100) / decimal.Decimal(total)
        return str(value.quantize(decimal.Decimal("0.0001"),
                                  rounding=decimal.ROUND_HALF_EVEN))


def test_exact_percent_matches_decimal_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        total = int(rng.integers(1, 100_000))
        count = int(rng.integers(0, total + 1))
        assert hz.exact_percent(count, total) == decimal_percent(count, total)


def test_exact_percent_half_even_ties():
    assert hz.exact_percent(1, 16000) == "0.0062"   # exact tie, even stays
    assert hz.exact_percent(3, 16000) == "0.0188"   # exact tie, odd rounds up


def test_exact_percent_rejects_bad_total():
    with pytest.raises(DataError):
        hz.exact_percent(1, 0)


def full_selection(m: int, k: int, cells: dict[int, int]) -> pr.MaskSelection:
    """Selection keeping the first cells[t] pieces of each listed token."""
    kept = {t: frozenset(range(n)) for t, n in cells.items()}
    return pr.MaskSelection(frozenset(cells), kept, 0.0, 0.0, m, k)


def test_param_count_reference_table():
    m, e, k = 20, 2048, 16
    cases = [
        ({t: 16 for t in range(20)}, 40960, "100.0000"),
        ({0: 16, 1: 16, 2: 16}, 6144, "15.0000"),
        ({0: 16, 1: 4}, 2560, "6.2500"),
        ({0: 4}, 512, "1.2500"),
    ]
    for cells, count, pct in cases:
        got = hz.param_count(m, e, full_selection(m, k, cells))
        assert got == {"count": count, "percentage": pct}


def test_param_count_rejects_inconsistent_selections():
    with pytest.raises(DataError):
        hz.param_count(4, 2048, full_selection(20, 16, {0: 16}))  # wrong m
    bad_piece = pr.MaskSelection(frozenset({0}), {0: frozenset({16})}, 0, 0, 20, 16)
    with pytest.raises(DataError):
        hz.param_count(20, 2048, bad_piece)  # piece index out of range
    stray = pr.MaskSelection(frozenset({0}), {0: frozenset({0}), 1: frozenset({0})},
                             0, 0, 20, 16)
    with pytest.raises(DataError):
        hz.param_count(20, 2048, stray)  # pieces kept for a removed token
    with pytest.raises(DataError):
        hz.param_count(20, 100, full_selection(20, 16, {0: 16}))  # k does not divide e


# --- metrics records ---------------------------------------------------------------


def test_metrics_records_round_trip(tmp_path):
    records = [hz.MetricsRecord("stage1", 1, 0.1 + 0.2, 6, 96, "100.0000"),
               hz.MetricsRecord("cell[0.3,0.25]", 2, 1.0 / 3.0, 4, 48, "50.0000")]
    path = str(tmp_path / "records.tsv")
    hz._write_records(path, records)
    back = hz._read_records(path)
    assert [r.tsv_line() for r in back] == [r.tsv_line() for r in records]
    assert back[0].dev_acc == 0.1 + 0.2  # float repr round trip is exact


# --- saliency export ----------------------------------------------------------------


def make_report(token_scores, piece_scores):
    ts = np.asarray(token_scores, dtype=float)
    ps = np.asarray(piece_scores, dtype=float)
    return pr.ImportanceReport(ts, ps, np.ones(ts.shape, bool),
                               np.ones(ps.shape, bool), 1, "per_batch_abs")


def parse_saliency(text: str):
    tokens, pieces = {}, {}
    for line in text.strip().split("\n"):
        parts = line.split(" ")
        if parts[0] == "token":
            tokens[int(parts[1])] = (float(parts[3]), float(parts[5]), int(parts[7]))
        elif parts[0] == "piece":
            pieces[(int(parts[1]), int(parts[2]))] = (
                float(parts[4]), float(parts[6]), int(parts[8]))
    return tokens, pieces


def test_export_saliency_row_max_is_100(tmp_path):
    rep = make_report([0.2, 0.4], [[0.1, 0.2], [0.3, 0.0]])
    sel = pr.MaskSelection(frozenset({0, 1}),
                           {0: frozenset({0, 1}), 1: frozenset({0, 1})},
                           0.0, 0.0, 2, 2)
    path = str(tmp_path / "sal.txt")
    hz.export_saliency(rep, sel, path)
    text = read(path)
    assert text.startswith("format saliency v1\n")
    tokens, pieces = parse_saliency(text)
    assert tokens[0] == (0.2, 50.0, 0)
    assert tokens[1] == (0.4, 100.0, 0)
    for i in range(2):
        row = [pieces[(i, q)][1] for q in range(2)]
        assert max(row) == 100.0
    assert pieces[(0, 0)] == (0.1, 50.0, 0)
    assert pieces[(1, 1)] == (0.0, 0.0, 0)


def test_export_saliency_flat_rows_normalize_to_100(tmp_path):
    rep = make_report([0.5, 0.5], [[0.3, 0.3], [0.0, 0.0]])
    sel = pr.MaskSelection(frozenset({0, 1}),
                           {0: frozenset({0, 1}), 1: frozenset({0, 1})},
                           0.0, 0.0, 2, 2)
    path = str(tmp_path / "sal.txt")
    hz.export_saliency(rep, sel, path)
    tokens, pieces = parse_saliency(read(path))
    assert tokens[0][1] == 100.0 and tokens[1][1] == 100.0
    assert all(pieces[(i, q)][1] == 100.0 for i in range(2) for q in range(2))


def test_export_saliency_pruned_flags_keep_raw_scores(tmp_path):
    rep = make_report([0.2, 0.4], [[0.1, 0.2], [0.3, 0.4]])
    sel = pr.MaskSelection(frozenset({1}), {1: frozenset({1})}, 0.5, 0.5, 2, 2)
    path = str(tmp_path / "sal.txt")
    hz.export_saliency(rep, sel, path)
    tokens, pieces = parse_saliency(read(path))
    assert tokens[0] == (0.2, 50.0, 1)           # pruned token keeps its score
    assert pieces[(0, 0)][2] == 1 and pieces[(0, 0)][0] == 0.1
    assert pieces[(1, 0)] == (0.3, 75.0, 1)      # pruned piece of a kept token
    assert pieces[(1, 1)] == (0.4, 100.0, 0)


def test_export_saliency_geometry_mismatch(tmp_path):
    rep = make_report([0.2], [[0.1, 0.2]])
    sel = pr.MaskSelection(frozenset({0}), {0: frozenset({0})}, 0, 0, 3, 2)
    with pytest.raises(DataError):
        hz.export_saliency(rep, sel, str(tmp_path / "sal.txt"))


def test_merge_saliency_report_mixes_stages():
    tok = make_report([0.4, 0.1], [[0.5, 0.6], [0.7, 0.8]])
    piece = pr.ImportanceReport(np.array([0.9, 0.0]), np.array([[1.5, 1.6], [0.0, 0.0]]),
                                np.array([True, False]),
                                np.array([[True, True], [False, False]]),
                                3, "per_batch_abs")
    sel = pr.MaskSelection(frozenset({0}), {0: frozenset({0})}, 0.5, 0.5, 2, 2)
    cell = pr.CellResult(0.5, 0.5, sel, 0.8, 8, 1, None,
                         token_report=tok, piece_report=piece)
    merged = hz.merge_saliency_report(cell)
    assert np.array_equal(merged.token_scores, [0.4, 0.1])      # token-stage scores
    assert np.array_equal(merged.piece_scores[0], [1.5, 1.6])   # survivor: piece stage
    assert np.array_equal(merged.piece_scores[1], [0.7, 0.8])   # removed: token stage
    assert merged.batches_seen == 3


# --- pipeline ---------------------------------------------------------------------


def test_pipeline_record_layout(pipe_run):
    cfg, out, records = pipe_run
    tags = [(r.stage, r.seed) for r in records]
    assert tags == [("stage1", 1), ("cell[0.34,0.25]", 1), ("final", 1),
                    ("stage1", 2), ("cell[0.34,0.25]", 2), ("final", 2)]
    for name in ("config.txt", "metrics.tsv", "report.txt"):
        assert os.path.exists(os.path.join(out, name))
    assert read(os.path.join(out, "config.txt")) == cfg.to_text()
    for seed in (1, 2):
        assert os.path.exists(os.path.join(out, f"seed{seed}", "prune", "saliency.txt"))


def test_pipeline_percentages_recompute(pipe_run):
    _, _, records = pipe_run
    m, e = 6, 16
    for r in records:
        assert float(r.percent) == pytest.approx(100.0 * r.kept_params / (m * e),
                                                 abs=1e-4)
        assert r.percent == hz.exact_percent(r.kept_params, m * e)


def test_pipeline_rerun_is_bitwise_identical(pipe_run, tmp_path):
    _, out, _ = pipe_run
    other = str(tmp_path / "again")
    hz.run_pipeline(micro_cfg(other))
    assert read(os.path.join(other, "metrics.tsv")) == read(os.path.join(out, "metrics.tsv"))


def test_pipeline_resume_matches_uninterrupted(pipe_run, tmp_path):
    _, out, _ = pipe_run
    part = str(tmp_path / "part")
    assert hz.run_pipeline(micro_cfg(part), stop_after="backbone") == []
    hz.run_pipeline(micro_cfg(part), resume=True, stop_after="stage1")
    assert not os.path.exists(os.path.join(part, "metrics.tsv"))
    hz.run_pipeline(micro_cfg(part), resume=True)
    assert read(os.path.join(part, "metrics.tsv")) == read(os.path.join(out, "metrics.tsv"))


def test_pipeline_resume_refuses_config_change(pipe_run):
    cfg, out, _ = pipe_run
    changed = micro_cfg(out, **{"tune.epochs": 4})
    with pytest.raises(ConfigError, match="resume refused"):
        hz.run_pipeline(changed, resume=True)


def test_pipeline_parallel_jobs_match_serial(pipe_run, tmp_path):
    _, out, _ = pipe_run
    par = str(tmp_path / "par")
    hz.run_pipeline(micro_cfg(par), jobs=2)
    assert read(os.path.join(par, "metrics.tsv")) == read(os.path.join(out, "metrics.tsv"))


def test_pipeline_degenerate_grid_repeats_stage1(tmp_path):
    # keep-all cell with no retraining evaluates the rewound = stage-1 state
    out = str(tmp_path / "deg")
    cfg = micro_cfg(out, **{"prune.token_ratios": (0.0,), "prune.piece_ratios": (0.0,),
                            "prune.retrain_epochs": 0, "run.seeds": (1,)})
    records = hz.run_pipeline(cfg)
    by_stage = {r.stage: r for r in records}
    assert by_stage["final"].dev_acc == by_stage["stage1"].dev_acc
    assert by_stage["final"].kept_params == by_stage["stage1"].kept_params


def test_pipeline_rejects_bad_stop_after(tmp_path):
    with pytest.raises(ConfigError):
        hz.run_pipeline(micro_cfg(str(tmp_path / "x")), stop_after="nowhere")


def test_fewshot_pipeline_completes_and_reproduces(tmp_path):
    outs = []
    for name in ("fs1", "fs2"):
        out = str(tmp_path / name)
        cfg = micro_cfg(out, **{"task.shots": 16, "run.seeds": (1,)})
        hz.run_pipeline(cfg)
        outs.append(read(os.path.join(out, "metrics.tsv")))
    assert outs[0] == outs[1]


# --- baselines ---------------------------------------------------------------------


def test_baselines_records(pipe_run):
    cfg, out, records = pipe_run
    brecs = hz.run_baselines(cfg)
    by = {(r.stage, r.seed): r for r in brecs}
    stage1 = {r.seed: r for r in records if r.stage == "stage1"}
    final = {r.seed: r for r in records if r.stage == "final"}
    for seed in (1, 2):
        assert by[("vanilla", seed)].dev_acc == stage1[seed].dev_acc
        assert by[("length", seed)].kept_tokens == final[seed].kept_tokens
        assert by[("negative", seed)].kept_tokens == 6 - int(np.floor(0.3 * 6))
        assert by[("negative_random", seed)].kept_tokens == by[("negative", seed)].kept_tokens
    assert os.path.exists(os.path.join(out, "baselines.tsv"))
    med_lines = read(os.path.join(out, "baseline_medians.tsv")).strip().split("\n")[1:]
    medians = dict(line.split("\t") for line in med_lines)
    want = float(np.median([by[("vanilla", s)].dev_acc for s in (1, 2)]))
    assert float(medians["vanilla"]) == want


def test_baselines_require_prune_checkpoint(tmp_path):
    out = str(tmp_path / "nopr")
    cfg = micro_cfg(out, **{"run.seeds": (1,)})
    hz.run_pipeline(cfg, stop_after="stage1")
    with pytest.raises(DataError, match="prune checkpoint missing"):
        hz.run_baselines(cfg, which=("random",))
    # vanilla and negative masking only need stage-1
    recs = hz.run_baselines(cfg, which=("vanilla", "negative"))
    assert {r.stage for r in recs} == {"vanilla", "negative", "negative_random"}


def test_baselines_reject_unknown_arm(pipe_run):
    cfg, _, _ = pipe_run
    with pytest.raises(ConfigError):
        hz.run_baselines(cfg, which=("bogus",))


# --- transfer ----------------------------------------------------------------------


def test_transfer_self_resumes_at_source_accuracy(pipe_run):
    cfg, out, records = pipe_run
    source = os.path.join(out, "seed1", "prune")
    trecs = hz.run_transfer(cfg.with_overrides(run__seeds=(1,)), source)
    by = {r.stage: r for r in trecs}
    final = next(r for r in records if r.stage == "final" and r.seed == 1)
    assert by["transfer_o"].dev_acc >= final.dev_acc  # epoch-0 eval is the floor
    assert os.path.exists(os.path.join(out, "transfer.tsv"))


def test_transfer_carries_masks_verbatim(pipe_run, tmp_path):
    cfg, out, _ = pipe_run
    src_bank, _ = load_prompt(os.path.join(out, "seed1", "prune"))
    frozen = cfg.with_overrides(run__seeds=(1,), tune__epochs=0)
    trecs = hz.run_transfer(frozen, os.path.join(out, "seed1", "prune"),
                            variants=("transfer_o",))
    rec = trecs[0]
    assert rec.kept_tokens == int((src_bank.token_mask > 0).sum())
    assert rec.kept_params == int(src_bank.effective_mask().sum())


def test_transfer_shape_mismatch(pipe_run):
    cfg, out, _ = pipe_run
    wrong = cfg.with_overrides(prompt__m=5)
    with pytest.raises(ConfigError, match="does not match"):
        hz.run_transfer(wrong, os.path.join(out, "seed1", "prune"))
    with pytest.raises(ConfigError):
        hz.run_transfer(cfg, os.path.join(out, "seed1", "prune"),
                        variants=("sideways",))


# --- report regeneration --------------------------------------------------------------


def test_collect_report_rebuilds_metrics(pipe_run):
    cfg, out, _ = pipe_run
    metrics = os.path.join(out, "metrics.tsv")
    original = read(metrics)
    os.remove(metrics)
    hz.collect_report(cfg)
    assert read(metrics) == original


# --- CLI --------------------------------------------------------------------------


def write_cfg_file(tmp_path, out: str, **extra) -> str:
    path = str(tmp_path / "run.cfg")
    hz.write_text_atomic(path, micro_cfg(out, **extra).to_text())
    return path


def test_cli_pipeline_and_subcommand_chain_match(tmp_path):
    out_a = str(tmp_path / "a")
    cfg_a = write_cfg_file(tmp_path, out_a)
    assert cli.main(["pipeline", "--config", cfg_a]) == 0
    assert os.path.exists(os.path.join(out_a, "metrics.tsv"))

    out_b = str(tmp_path / "b")
    cfg_b = str(tmp_path / "b.cfg")
    hz.write_text_atomic(cfg_b, micro_cfg(out_b).to_text())
    assert cli.main(["pretrain", "--config", cfg_b]) == 0
    assert cli.main(["tune", "--config", cfg_b, "--resume"]) == 0
    assert cli.main(["prune", "--config", cfg_b]) == 0
    assert cli.main(["report", "--config", cfg_b]) == 0
    assert read(os.path.join(out_b, "metrics.tsv")) == read(os.path.join(out_a, "metrics.tsv"))


def test_cli_seed_and_out_overrides(tmp_path):
    out = str(tmp_path / "o")
    cfg = write_cfg_file(tmp_path, str(tmp_path / "ignored"))
    assert cli.main(["pipeline", "--config", cfg, "--seed", "1", "--out", out]) == 0
    lines = read(os.path.join(out, "metrics.tsv")).strip().split("\n")[1:]
    assert all(line.split("\t")[1] == "1" for line in lines)


def test_cli_exit_code_2_on_config_errors(tmp_path):
    assert cli.main(["pipeline", "--config", "/nonexistent.cfg"]) == 2
    bad = str(tmp_path / "bad.cfg")
    hz.write_text_atomic(bad, "nonsense.key = 1\n")
    assert cli.main(["pipeline", "--config", bad]) == 2


def test_cli_exit_code_3_on_missing_prerequisites(tmp_path):
    out = str(tmp_path / "empty")
    cfg = write_cfg_file(tmp_path, out)
    assert cli.main(["prune", "--config", cfg]) == 3


def test_cli_exit_code_4_on_stage_failure(tmp_path, monkeypatch):
    out = str(tmp_path / "boom")
    cfg = write_cfg_file(tmp_path, out)

    def explode(*args, **kwargs):
        raise RuntimeError("synthetic fault")

    monkeypatch.setattr(hz, "tune", explode)
    assert cli.main(["pipeline", "--config", cfg]) == 4


def test_cli_respects_log_env(tmp_path, monkeypatch):
    monkeypatch.setenv("XPROMPT_LOG", "DEBUG")
    out = str(tmp_path / "logged")
    cfg = write_cfg_file(tmp_path, out, **{"run.seeds": (1,)})
    assert cli.main(["pretrain", "--config", cfg]) == 0

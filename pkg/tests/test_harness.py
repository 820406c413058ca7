import xml.etree.ElementTree as ET

import numpy as np
import pytest

from nfcl.continual import DistillConfig, Strategy
from nfcl.errors import ConfigError, ContractError
from nfcl.fieldmodels import Arch
from nfcl.harness import (
    Experiment,
    ExperimentConfig,
    render_scatter,
    run_domain_expansion,
    run_experiment,
    run_signal_expansion,
)
from nfcl.metrics import MetricsRow, write_metrics_csv
from nfcl.training import TrainConfig


def tiny_config(experiment, **kw):
    defaults = dict(
        experiment=experiment,
        dims=(8, 8, 8),
        frames=3,
        cases=1,
        models=[Arch.SIREN],
        strategies=[Strategy.BASELINE, Strategy.DISTILLATION],
        train=TrainConfig(iterations=8, batch_coords=64),
        distill=DistillConfig(n_distil=64),
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def synthetic_rows():
    rows = []
    for model in ("pe-relu", "siren", "finer", "diner"):
        for strategy in ("baseline", "distillation"):
            for frame in (1, 2, 3, 4):
                rows.append(
                    MetricsRow(
                        "case000", model, strategy, 4, f"frame{frame}",
                        psnr=20.0 + frame + (1.0 if strategy == "distillation" else 0.0),
                        ssim=0.8,
                    )
                )
    return rows


class TestDomainExpansion:
    def test_triangular_row_count(self):
        rows = run_domain_expansion(tiny_config(Experiment.DOMAIN_EXPANSION))
        # 3 frames -> 1+2+3 = 6 evaluations per case/model/strategy
        per_combo = {}
        for r in rows:
            per_combo.setdefault((r.case_id, r.model, r.strategy), 0)
            per_combo[(r.case_id, r.model, r.strategy)] += 1
        assert all(v == 6 for v in per_combo.values())
        assert len(rows) == 6 * 2

    def test_single_frame_degenerates_to_plain_fit(self):
        cfg = tiny_config(Experiment.DOMAIN_EXPANSION, frames=1)
        rows = run_domain_expansion(cfg)
        by_strategy = {r.strategy: r for r in rows}
        assert by_strategy["baseline"].psnr == by_strategy["distillation"].psnr

    def test_rows_carry_both_metrics(self):
        rows = run_domain_expansion(tiny_config(Experiment.DOMAIN_EXPANSION))
        assert all(r.psnr is not None and r.ssim is not None for r in rows)
        assert all(r.dice is None for r in rows)


class TestSignalExpansion:
    def test_row_structure(self):
        rows = run_signal_expansion(tiny_config(Experiment.SIGNAL_EXPANSION))
        image_rows = [r for r in rows if r.eval_target == "image"]
        mask_rows = [r for r in rows if r.eval_target == "mask"]
        # per strategy: image after task 1 and 2, mask after task 2 only
        assert len(image_rows) == 2 * 2
        assert len(mask_rows) == 2 * 1
        assert all(r.dice is None for r in image_rows)
        for r in mask_rows:
            assert r.psnr is None and len(r.dice) == 3

    def test_dice_after_task_one_absent(self):
        rows = run_signal_expansion(tiny_config(Experiment.SIGNAL_EXPANSION))
        task1_rows = [r for r in rows if r.trained_through_task == 1]
        assert all(r.dice is None for r in task1_rows)


class TestDeterminism:
    def test_byte_identical_outputs(self, tmp_path):
        outputs = []
        for run in ("a", "b"):
            cfg = tiny_config(Experiment.DOMAIN_EXPANSION, out_dir=tmp_path / run)
            run_experiment(cfg)
            outputs.append(
                {
                    "csv": (tmp_path / run / "metrics.csv").read_bytes(),
                    "svg": (tmp_path / run / "scatter_psnr.svg").read_bytes(),
                }
            )
        assert outputs[0]["csv"] == outputs[1]["csv"]
        assert outputs[0]["svg"] == outputs[1]["svg"]


class TestRenderScatter:
    def test_eight_markers_for_full_matrix(self, tmp_path):
        path = tmp_path / "scatter.svg"
        render_scatter(synthetic_rows(), "psnr", path)
        root = ET.fromstring(path.read_text())
        assert root.tag.endswith("svg")
        markers = [
            el
            for el in root.iter()
            if el.tag.endswith("circle")
            or (el.tag.endswith("rect") and el.get("fill") not in ("white", "none")
                and float(el.get("width")) < 20)
        ]
        # 8 data markers + legend swatches (4 model squares + 2 strategy shapes)
        assert len(markers) == 8 + 4 + 2

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        render_scatter(synthetic_rows(), "ssim", a)
        render_scatter(synthetic_rows(), "ssim", b)
        assert a.read_bytes() == b.read_bytes()

    def test_missing_rows_listed(self, tmp_path):
        rows = [r for r in synthetic_rows() if not
                (r.model == "diner" and r.eval_target == "frame4")]
        with pytest.raises(ContractError, match="diner"):
            render_scatter(rows, "psnr", tmp_path / "x.svg")

    def test_no_frame_rows_rejected(self, tmp_path):
        rows = [MetricsRow("c", "siren", "baseline", 2, "image", psnr=20.0, ssim=0.9)]
        with pytest.raises(ContractError):
            render_scatter(rows, "psnr", tmp_path / "x.svg")

    def test_bad_metric_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            render_scatter(synthetic_rows(), "dice", tmp_path / "x.svg")

    def test_csv_round_trip_feeds_report(self, tmp_path):
        csv_path = tmp_path / "metrics.csv"
        write_metrics_csv(synthetic_rows(), csv_path)
        from nfcl.metrics import read_metrics_csv

        render_scatter(read_metrics_csv(csv_path), "psnr", tmp_path / "s.svg")
        assert (tmp_path / "s.svg").exists()


class TestConfigValidation:
    def test_empty_models_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(Experiment.DOMAIN_EXPANSION, models=[])

    def test_empty_strategies_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(Experiment.DOMAIN_EXPANSION, strategies=[])

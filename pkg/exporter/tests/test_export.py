import json

import numpy as np
import pytest
from PIL import Image

from ocs_exporter.cli import main
from ocs_exporter.export import ExportSpec, export_features
from pocs.features import load_dataset


def _write_images(folder, count, seed, size=(96, 80)):
    folder.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(count):
        pixels = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
        Image.fromarray(pixels, mode="RGB").save(folder / f"img_{i:04d}.png")
    return folder


@pytest.fixture(scope="session")
def large_image_dir(tmp_path_factory):
    return _write_images(tmp_path_factory.mktemp("imgs_large"), 104, seed=1)


@pytest.fixture(scope="session")
def small_image_dir(tmp_path_factory):
    return _write_images(tmp_path_factory.mktemp("imgs_small"), 10, seed=2)


@pytest.fixture(scope="session")
def final_gap_dataset(tmp_path_factory, large_image_dir):
    out = tmp_path_factory.mktemp("ds_final_gap")
    spec = ExportSpec(
        backbone="resnet50",
        stage="final_gap",
        image_dirs=(str(large_image_dir),),
        output_dir=str(out),
        batch_size=16,
        weights="random",
        seed=7,
    )
    return export_features(spec)


class TestFinalGapContract:
    def test_validates_under_feature_store(self, final_gap_dataset):
        matrix, head = load_dataset(final_gap_dataset)
        assert matrix.n_samples == 104
        assert matrix.dim == 2048  # resnet50 classifier input width
        assert head is not None
        assert head.weights.shape == (1000, 2048)
        assert matrix.logits.shape == (104, 1000)

    def test_logits_consistent_with_head_multiply(self, final_gap_dataset):
        matrix, head = load_dataset(final_gap_dataset)
        assert matrix.n_samples >= 100
        recomputed = matrix.data @ head.weights.T + head.bias
        assert np.max(np.abs(recomputed - matrix.logits)) <= 1e-4

    def test_row_count_matches_manifest(self, final_gap_dataset):
        manifest = json.loads((final_gap_dataset / "manifest.json").read_text())
        matrix, _ = load_dataset(final_gap_dataset)
        assert manifest["n_rows"] == matrix.n_samples == len(manifest["images"])
        assert manifest["skipped"] == {}
        # row order follows sorted file names
        indices = [manifest["images"][k] for k in sorted(manifest["images"])]
        assert indices == list(range(matrix.n_samples))


class TestDeterminism:
    def test_reexport_is_byte_identical(self, small_image_dir, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            spec = ExportSpec(
                backbone="resnet50",
                stage="final_gap",
                image_dirs=(str(small_image_dir),),
                output_dir=str(tmp_path / name),
                batch_size=4,
                weights="random",
                seed=7,
            )
            outs.append(export_features(spec))
        for filename in ("features.npy", "logits.npy", "head_w.npy", "head_b.npy",
                         "manifest.json"):
            assert (outs[0] / filename).read_bytes() == (outs[1] / filename).read_bytes()


class TestConvStages:
    def test_stage_output_pools_to_channel_width(self, small_image_dir, tmp_path):
        spec = ExportSpec(
            backbone="resnet50",
            stage="stage2",
            image_dirs=(str(small_image_dir),),
            output_dir=str(tmp_path / "stage2"),
            batch_size=4,
            weights="random",
            seed=7,
        )
        out = export_features(spec)
        matrix, head = load_dataset(out)
        assert matrix.dim == 1024  # layer3 channel width
        assert matrix.n_samples == 10
        assert head is None
        assert not (out / "logits.npy").exists()


class TestConvNeXt:
    def test_final_gap_matches_classifier_input(self, small_image_dir, tmp_path):
        spec = ExportSpec(
            backbone="convnext",
            stage="final_gap",
            image_dirs=(str(small_image_dir),),
            output_dir=str(tmp_path / "cnx"),
            batch_size=4,
            weights="random",
            seed=3,
        )
        out = export_features(spec)
        matrix, head = load_dataset(out)
        assert matrix.dim == 768  # convnext_tiny classifier input width
        assert head.weights.shape == (1000, 768)
        recomputed = matrix.data @ head.weights.T + head.bias
        assert np.max(np.abs(recomputed - matrix.logits)) <= 1e-4


class TestErrors:
    def test_unknown_stage_rejected(self, small_image_dir, tmp_path):
        with pytest.raises(ValueError, match="unknown stage"):
            ExportSpec(
                backbone="resnet50",
                stage="stage9",
                image_dirs=(str(small_image_dir),),
                output_dir=str(tmp_path / "x"),
            )

    def test_unknown_backbone_rejected(self, small_image_dir, tmp_path):
        with pytest.raises(ValueError, match="unknown backbone"):
            ExportSpec(
                backbone="vgg11",
                stage="final_gap",
                image_dirs=(str(small_image_dir),),
                output_dir=str(tmp_path / "x"),
            )

    def test_empty_folder_rejected(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        spec = ExportSpec(
            backbone="resnet50",
            stage="final_gap",
            image_dirs=(str(empty),),
            output_dir=str(tmp_path / "x"),
            weights="random",
        )
        with pytest.raises(ValueError, match="no images"):
            export_features(spec)

    def test_decode_failure_noted_in_manifest(self, tmp_path):
        folder = _write_images(tmp_path / "mixed", 3, seed=4)
        (folder / "broken.png").write_bytes(b"this is not a png")
        spec = ExportSpec(
            backbone="resnet50",
            stage="final_gap",
            image_dirs=(str(folder),),
            output_dir=str(tmp_path / "out"),
            batch_size=4,
            weights="random",
            seed=7,
        )
        out = export_features(spec)
        manifest = json.loads((out / "manifest.json").read_text())
        matrix, _ = load_dataset(out)
        assert matrix.n_samples == 3
        assert manifest["n_rows"] == 3
        assert list(manifest["skipped"]) == ["broken.png"]


class TestCli:
    def test_end_to_end(self, small_image_dir, tmp_path):
        out = tmp_path / "cli_ds"
        code = main(
            [
                "--backbone", "resnet50", "--stage", "final_gap",
                "--images", str(small_image_dir), "--out", str(out),
                "--batch-size", "4", "--weights", "random", "--seed", "7",
            ]
        )
        assert code == 0
        matrix, head = load_dataset(out)
        assert matrix.n_samples == 10 and head is not None

    def test_bad_stage_is_usage_error(self, small_image_dir, tmp_path):
        code = main(
            [
                "--backbone", "resnet50", "--stage", "nope",
                "--images", str(small_image_dir), "--out", str(tmp_path / "x"),
            ]
        )
        assert code == 2

    def test_missing_folder_is_data_error(self, tmp_path):
        code = main(
            [
                "--backbone", "resnet50", "--stage", "final_gap",
                "--images", str(tmp_path / "missing"), "--out", str(tmp_path / "x"),
                "--weights", "random",
            ]
        )
        assert code == 1

"""File formats, rendering, and the command-line surface."""
import os

import numpy as np
import pytest

from sigmaflow import cli
from sigmaflow import fileio as fio
from sigmaflow.errors import FormatError
from sigmaflow.grid import MetricField, TorusGrid, identity_metric

from helpers import random_interior_points

RNG = np.random.default_rng(31337)


class TestPGM:
    def test_binary_roundtrip(self, tmp_path):
        labels = RNG.integers(0, 7, size=(9, 13))
        path = tmp_path / "m.pgm"
        fio.write_label_map(labels, path, maxval=6)
        np.testing.assert_array_equal(fio.read_label_map(path, c=7), labels)

    def test_plain_and_binary_parse_identically(self, tmp_path):
        labels = RNG.integers(0, 5, size=(6, 8))
        p2 = tmp_path / "a.pgm"
        p5 = tmp_path / "b.pgm"
        fio.write_label_map(labels, p2, maxval=4, binary=False)
        fio.write_label_map(labels, p5, maxval=4, binary=True)
        np.testing.assert_array_equal(fio.read_label_map(p2),
                                      fio.read_label_map(p5))

    def test_sixteen_bit_roundtrip(self, tmp_path):
        labels = RNG.integers(0, 300, size=(4, 5))
        path = tmp_path / "wide.pgm"
        fio.write_label_map(labels, path, maxval=299)
        np.testing.assert_array_equal(fio.read_label_map(path), labels)

    def test_maxval_too_small_for_labels(self, tmp_path):
        path = tmp_path / "m.pgm"
        fio.write_label_map(np.zeros((4, 4), dtype=int), path, maxval=2)
        with pytest.raises(FormatError):
            fio.read_label_map(path, c=5)

    def test_pixel_exceeding_maxval_reports_offset(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n3\n0 1\n2 7\n")
        with pytest.raises(FormatError) as exc:
            fio.read_label_map(path)
        assert exc.value.offset is not None

    def test_comments_in_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P2 # magic\n# a comment line\n2 2\n5\n1 2 3 4\n")
        np.testing.assert_array_equal(fio.read_label_map(path),
                                      [[1, 2], [3, 4]])

    def test_truncated_raster(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
        with pytest.raises(FormatError):
            fio.read_label_map(path)


class TestBinaryFields:
    def test_assignment_roundtrip_bitwise(self, tmp_path):
        g = TorusGrid(5, 7)
        S = random_interior_points(RNG, g.n_nodes, 4)
        path = tmp_path / "s.amf"
        fio.write_assignment(S, g, path)
        g2, S2 = fio.read_assignment(path)
        assert (g2.H, g2.W) == (5, 7)
        np.testing.assert_array_equal(S, S2)

    def test_assignment_corrupted_length(self, tmp_path):
        g = TorusGrid(4, 4)
        S = random_interior_points(RNG, g.n_nodes, 3)
        path = tmp_path / "s.amf"
        fio.write_assignment(S, g, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError):
            fio.read_assignment(path)

    def test_assignment_validation_and_escape_hatch(self, tmp_path):
        g = TorusGrid(4, 4)
        S = random_interior_points(RNG, g.n_nodes, 3)
        S[3] *= 1.5  # break the row sum
        path = tmp_path / "bad.amf"
        fio.write_assignment(S, g, path)
        with pytest.raises(FormatError):
            fio.read_assignment(path)
        g2, S2 = fio.read_assignment(path, validate=False)
        np.testing.assert_array_equal(S, S2)

    def test_metric_roundtrip(self, tmp_path):
        g = TorusGrid(4, 5)
        field = identity_metric(g, 2.5).as_interpretation("hinv")
        path = tmp_path / "h.mtf"
        fio.write_metric(field, path)
        back = fio.read_metric(path)
        assert back.interpretation == "hinv"
        np.testing.assert_array_equal(back.mats, field.mats)

    def test_metric_non_spd_names_node(self, tmp_path):
        g = TorusGrid(4, 4)
        mats = np.tile(np.eye(2), (g.n_nodes, 1, 1))
        field = MetricField(g, mats, "hinv")
        path = tmp_path / "h.mtf"
        fio.write_metric(field, path)
        blob = bytearray(path.read_bytes())
        header_len = blob.index(b"\n") + 1
        # overwrite node 6 with an indefinite matrix
        bad = np.array([[1.0, 2.0], [2.0, 1.0]]).reshape(-1)
        blob[header_len + 6 * 32:header_len + 7 * 32] = \
            np.asarray(bad, dtype="<f8").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(Exception) as exc:
            fio.read_metric(path)
        assert "node 6" in str(exc.value)
        field2 = fio.read_metric(path, validate=False)
        assert field2.mats.shape == (16, 2, 2)


class TestRender:
    def test_constant_label_single_color(self, tmp_path):
        path = tmp_path / "c.ppm"
        fio.render_labels(np.full((5, 6), 3), path)
        img = fio.read_ppm(path)
        assert img.shape == (5, 6, 3)
        assert np.all(img.reshape(-1, 3) == fio.PALETTE20[3])

    def test_error_mask_black_pixels(self, tmp_path):
        labels = RNG.integers(0, 4, size=(6, 6))
        wrong = np.zeros((6, 6), dtype=bool)
        wrong[2, 3] = True
        path = tmp_path / "m.ppm"
        fio.render_error_mask(labels, wrong, path)
        img = fio.read_ppm(path)
        assert tuple(img[2, 3]) == (0, 0, 0)
        ok = ~wrong
        assert np.all(img[ok] == fio.PALETTE20[labels % 20][ok])

    def test_deterministic_bytes(self, tmp_path):
        vals = RNG.standard_normal((7, 7))
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        fio.render_gray(vals, p1, equalize=True)
        fio.render_gray(vals, p2, equalize=True)
        assert p1.read_bytes() == p2.read_bytes()

    def test_gray_equalize_covers_range(self, tmp_path):
        vals = np.exp(RNG.standard_normal((16, 16)))
        path = tmp_path / "g.ppm"
        fio.render_gray(vals, path, equalize=True)
        img = fio.read_ppm(path)
        assert img.min() == 0 and img.max() == 255


class TestManifest:
    def test_roundtrip(self, tmp_path):
        labels = [RNG.integers(0, 3, size=(6, 6)) for _ in range(3)]
        entries = []
        for i, lab in enumerate(labels):
            name = f"s{i}.pgm"
            fio.write_label_map(lab, tmp_path / name, maxval=2)
            entries.append((name, 100 + i, "train" if i < 2 else "test"))
        fio.write_manifest(entries, tmp_path)
        back = fio.read_manifest(tmp_path)
        assert len(back) == 3
        for (lab, seed, split), (orig, ent) in zip(back, zip(labels, entries)):
            np.testing.assert_array_equal(lab, orig)
            assert (seed, split) == (ent[1], ent[2])


class TestCli:
    def run_cli(self, *args):
        return cli.main(list(args))

    def test_unknown_flag_is_usage_error(self, capsys):
        assert self.run_cli("run", "--no-such-flag") == 1
        assert "usage error" in capsys.readouterr().err

    def test_missing_out_is_usage_error(self):
        assert self.run_cli("spectrum") == 1

    def test_missing_file_is_validation_error(self, tmp_path):
        code = self.run_cli("run", "--init", str(tmp_path / "nope.amf"),
                            "--out", str(tmp_path / "o"))
        assert code == 2

    def test_run_constant_init_constant_lyapunov(self, tmp_path):
        g = TorusGrid(6, 6)
        S0 = np.tile([0.5, 0.3, 0.2], (g.n_nodes, 1))
        init = tmp_path / "init.amf"
        fio.write_assignment(S0, g, init)
        out = tmp_path / "out"
        code = self.run_cli("run", "--init", str(init), "--out", str(out),
                            "--m2", "0", "--T", "1.0", "--step", "0.2")
        assert code == 0
        rows = (out / "diagnostics.csv").read_text().strip().split("\n")[1:]
        lyap = np.array([float(r.split(",")[1]) for r in rows])
        assert np.max(np.abs(lyap - lyap[0])) < 1e-9
        assert (out / "final.amf").exists()
        assert (out / "config.ini").exists()

    def test_gen_data_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            code = self.run_cli("gen-data", "--seed", "7", "--out", str(out),
                                "--n-train", "3", "--n-test", "1",
                                "--H", "12", "--W", "12", "--c", "4")
            assert code == 0
        assert (a / "index.tsv").read_bytes() == (b / "index.tsv").read_bytes()
        for name in sorted(os.listdir(a)):
            if name.endswith(".pgm"):
                assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_spectrum_output(self, tmp_path):
        out = tmp_path / "spec"
        code = self.run_cli("spectrum", "--H", "6", "--W", "6", "--c", "3",
                            "--m2", "1.0", "--epsilon", "0.1",
                            "--out", str(out))
        assert code == 0
        rows = (out / "spectrum.csv").read_text().strip().split("\n")
        assert rows[0] == "n,eigenvalue,in_low_frequency_set"
        assert len(rows) == 37
        first = rows[1].split(",")
        assert abs(float(first[1])) < 1e-8 and first[2] == "1"

    def test_torus_demo_smoke(self, tmp_path):
        out = tmp_path / "torus"
        code = self.run_cli("torus-demo", "--H", "8", "--W", "8",
                            "--m2", "0", "--T", "1.0", "--step", "0.2",
                            "--out", str(out))
        assert code == 0
        assert (out / "trajectory.csv").exists()
        header = (out / "trajectory.csv").read_text().split("\n")[0]
        assert header == "time,node,p1,p2,p3"

    def test_config_echo_reproduces_run(self, tmp_path):
        out1 = tmp_path / "o1"
        code = self.run_cli("torus-demo", "--H", "8", "--W", "8", "--m2", "0",
                            "--T", "0.6", "--step", "0.2", "--out", str(out1))
        assert code == 0
        out2 = tmp_path / "o2"
        code = self.run_cli("torus-demo", "--config", str(out1 / "config.ini"),
                            "--out", str(out2))
        assert code == 0
        assert (out1 / "diagnostics.csv").read_bytes() == \
            (out2 / "diagnostics.csv").read_bytes()
        assert (out1 / "trajectory.csv").read_bytes() == \
            (out2 / "trajectory.csv").read_bytes()

    def test_torus_demo_collapse_distance(self, tmp_path, capsys):
        out = tmp_path / "collapse"
        code = self.run_cli("torus-demo", "--H", "12", "--W", "12",
                            "--m2", "0", "--T", "80", "--integrator",
                            "adaptive", "--out", str(out))
        assert code == 0
        text = capsys.readouterr().out
        dist = float(text.split("final max pairwise distance")[1].split(",")[0])
        assert dist < 1e-3

    def test_run_with_metric_file_and_structure_tensor(self, tmp_path):
        from sigmaflow import learning as ln
        g = TorusGrid(8, 8)
        S0 = ln.corrupt(np.zeros(g.n_nodes, dtype=np.int64), 3,
                        ln.CorruptionConfig(seed=4))
        init = tmp_path / "init.amf"
        fio.write_assignment(S0, g, init)
        mats = np.tile(np.diag([0.8, 1.2]), (g.n_nodes, 1, 1))
        mtf = tmp_path / "h.mtf"
        fio.write_metric(MetricField(g, mats, "h"), mtf)
        code = self.run_cli("run", "--init", str(init), "--metric-file",
                            str(mtf), "--T", "0.4", "--step", "0.2",
                            "--out", str(tmp_path / "o1"))
        assert code == 0
        code = self.run_cli("run", "--init", str(init),
                            "--structure-tensor", "1.0,0.5,exp",
                            "--T", "0.4", "--step", "0.2",
                            "--out", str(tmp_path / "o2"))
        assert code == 0

    def test_run_with_checkpoint_source(self, tmp_path):
        from sigmaflow import learning as ln
        from sigmaflow import operator as op
        g = TorusGrid(8, 8)
        c = 3
        params = op.OperatorParams.initialize(c, kernel_size=3, filters=4,
                                              hidden=(4,), seed=2)
        ckpt = tmp_path / "op.ckpt"
        op.save_params(params, ckpt)
        S0 = ln.corrupt(np.zeros(g.n_nodes, dtype=np.int64), c,
                        ln.CorruptionConfig(seed=4))
        init = tmp_path / "init.amf"
        fio.write_assignment(S0, g, init)
        code = self.run_cli("run", "--init", str(init), "--ckpt", str(ckpt),
                            "--T", "0.4", "--step", "0.2", "--m2", "1.0",
                            "--out", str(tmp_path / "o"))
        assert code == 0

    def test_conflicting_metric_sources_usage_error(self, tmp_path):
        g = TorusGrid(6, 6)
        S0 = np.full((g.n_nodes, 2), 0.5)
        init = tmp_path / "init.amf"
        fio.write_assignment(S0, g, init)
        code = self.run_cli("run", "--init", str(init),
                            "--structure-tensor", "1,1",
                            "--ckpt", "whatever.ckpt",
                            "--out", str(tmp_path / "o"))
        assert code == 1

    def test_no_validate_escape_hatch(self, tmp_path):
        g = TorusGrid(6, 6)
        S = np.full((g.n_nodes, 3), 1 / 3)
        S[0] *= 1.5  # invalid row sum
        init = tmp_path / "bad.amf"
        fio.write_assignment(S, g, init)
        code = self.run_cli("run", "--init", str(init), "--T", "0.2",
                            "--step", "0.2", "--out", str(tmp_path / "o"))
        assert code == 2
        code = self.run_cli("run", "--init", str(init), "--no-validate",
                            "--T", "0.2", "--step", "0.2",
                            "--out", str(tmp_path / "o2"))
        assert code == 0

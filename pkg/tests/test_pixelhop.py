"""Transform tree: fitting, energy bookkeeping, application, serialization."""

import numpy as np
import pytest

from sslface import pixelhop, saab
from sslface.container import FORMAT_VERSION, read_container, write_container
from sslface.errors import DataError, FitError, ModelIOError
from sslface.pixelhop import DISCARDED, INTERMEDIATE, LEAF


def random_images(n, channels=1, seed=0, smooth=True):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(0, 255, size=(n, 32, 32, channels))
    if smooth:  # mild spatial correlation so the energy spectrum decays
        kernel = np.ones((3, 3)) / 9.0
        for i in range(n):
            for c in range(channels):
                img = imgs[i, :, :, c]
                padded = np.pad(img, 1, mode="edge")
                sm = sum(
                    padded[dr : dr + 32, dc : dc + 32] * kernel[dr, dc]
                    for dr in range(3)
                    for dc in range(3)
                )
                imgs[i, :, :, c] = sm
    return imgs


@pytest.fixture(scope="module")
def fitted_y():
    imgs = random_images(40, 1, seed=5)
    config = pixelhop.PixelHopConfig(input_channels=1, e_cutoff=0.002, e_forward=0.002)
    return pixelhop.fit_pixelhop(imgs, config), imgs


@pytest.fixture(scope="module")
def fitted_crcb():
    imgs = random_images(30, 2, seed=6)
    config = pixelhop.PixelHopConfig(input_channels=2, e_cutoff=0.004, e_forward=0.004)
    return pixelhop.fit_pixelhop(imgs, config), imgs


class TestFit:
    def test_spatial_chain(self, fitted_y):
        model, imgs = fitted_y
        out = pixelhop.apply_pixelhop(model, imgs[0])
        k1, k2, k3 = model.level_counts
        assert out.level1.shape == (28, 28, k1)
        assert out.level2.shape == (10, 10, k2)
        assert out.level3.shape == (k3,)

    def test_joint_chroma_bank_is_50_dim(self, fitted_crcb):
        model, _ = fitted_crcb
        assert list(model.banks)[0] == "1.u0"
        bank = model.banks["1.u0"]
        assert bank.patch_dim == 50
        assert len(model.nodes_at(1)) == 50  # 1 DC + 49 AC slots

    def test_unit_energy_shares_sum_to_one(self, fitted_y):
        model, _ = fitted_y
        # level-1 unit
        l1 = model.nodes_at(1)
        assert abs(sum(n.e_init for n in l1) - 1.0) < 1e-9
        # every fitted child bank
        for parent in model.nodes_at(1, (INTERMEDIATE,)) + model.nodes_at(2, (INTERMEDIATE,)):
            kids = [n for n in model.nodes.values() if n.parent == parent.id]
            assert kids, parent.id
            assert abs(sum(n.e_init for n in kids) - 1.0) < 1e-9

    def test_e_norm_is_path_product_and_never_exceeds_parent(self, fitted_y):
        model, _ = fitted_y
        for node in model.nodes.values():
            if node.parent is None:
                assert abs(node.e_norm - node.e_init) < 1e-15  # root has energy 1
            else:
                parent = model.nodes[node.parent]
                assert abs(node.e_norm - parent.e_norm * node.e_init) < 1e-12
                assert node.e_norm <= parent.e_norm + 1e-15

    def test_status_partition_and_thresholds(self, fitted_y):
        model, _ = fitted_y
        ec = model.config.e_cutoff
        ef = model.config.e_forward
        for node in model.nodes.values():
            assert node.status in (INTERMEDIATE, LEAF, DISCARDED)
            if node.status == DISCARDED and node.e_init > 0:
                assert node.e_norm < ec
            elif node.status == INTERMEDIATE:
                assert node.e_norm >= ef and node.level < 3
            elif node.status == LEAF:
                assert node.e_norm >= ec

    def test_banks_exist_exactly_beneath_intermediates(self, fitted_y):
        model, _ = fitted_y
        expected = {"1.u0"}
        expected |= {n.id for n in model.nodes_at(1, (INTERMEDIATE,))}
        expected |= {n.id for n in model.nodes_at(2, (INTERMEDIATE,))}
        assert set(model.banks) == expected

    def test_node_ids_sort_like_processing_order(self, fitted_y):
        model, _ = fitted_y
        out_nodes = model.output_nodes(2)
        assert [n.id for n in out_nodes] == sorted(n.id for n in out_nodes)

    def test_zero_thresholds_discard_nothing(self):
        imgs = random_images(30, 1, seed=8)
        config = pixelhop.PixelHopConfig(input_channels=1, e_cutoff=0.0, e_forward=0.0)
        model = pixelhop.fit_pixelhop(imgs, config)
        assert len(model.nodes_at(1)) == 25
        assert all(n.status != DISCARDED for n in model.nodes.values())

    def test_everything_discarded_raises_naming_level(self):
        imgs = random_images(10, 1, seed=9)
        config = pixelhop.PixelHopConfig(input_channels=1, e_cutoff=0.99, e_forward=0.99)
        with pytest.raises(FitError, match="level 1"):
            pixelhop.fit_pixelhop(imgs, config)

    def test_needs_two_images(self):
        config = pixelhop.PixelHopConfig(input_channels=1, e_cutoff=0.001, e_forward=0.001)
        with pytest.raises(FitError):
            pixelhop.fit_pixelhop(random_images(1, 1), config)

    def test_config_validation(self):
        with pytest.raises(DataError):
            pixelhop.PixelHopConfig(input_channels=1, e_cutoff=0.5, e_forward=0.1)

    def test_channel_processing_independence(self):
        # with per-channel units (K0=1 twice), each channel's tree is the
        # same whether fitted alone or alongside other channels
        imgs = random_images(12, 3, seed=10)
        config3 = pixelhop.PixelHopConfig(input_channels=3, e_cutoff=0.01, e_forward=0.01)
        model3 = pixelhop.fit_pixelhop(imgs, config3)
        config1 = pixelhop.PixelHopConfig(input_channels=1, e_cutoff=0.01, e_forward=0.01)
        model1 = pixelhop.fit_pixelhop(imgs[:, :, :, 1:2], config1)
        ref = {n.id.replace(".u0.", ".uX."): n.e_norm for n in model1.nodes.values()}
        got = {
            n.id.replace(".u1.", ".uX."): n.e_norm
            for n in model3.nodes.values()
            if ".u1." in n.id
        }
        assert got.keys() == ref.keys()
        for key in ref:
            assert got[key] == pytest.approx(ref[key], abs=1e-12)


class TestApply:
    def test_constant_image_gives_bias_on_ac_nodes(self, fitted_y):
        model, _ = fitted_y
        out = pixelhop.apply_pixelhop(model, np.full((32, 32, 1), 9.0))
        bank = model.banks["1.u0"]
        for node, column in zip(model.output_nodes(1), range(99)):
            if node.within_bank_index > 0:
                assert np.allclose(out.level1[:, :, column], bank.bias, atol=1e-10)

    def test_deterministic(self, fitted_y):
        model, imgs = fitted_y
        a = pixelhop.apply_pixelhop(model, imgs[3])
        b = pixelhop.apply_pixelhop(model, imgs[3])
        assert np.array_equal(a.level1, b.level1)
        assert np.array_equal(a.level3, b.level3)

    def test_dimension_mismatch(self, fitted_y):
        model, _ = fitted_y
        with pytest.raises(DataError):
            pixelhop.apply_pixelhop(model, np.zeros((16, 16, 1)))

    def test_matches_naive_reference(self, fitted_y):
        """Straight-line reference: per node, per position, explicit dot products."""
        model, imgs = fitted_y
        image = imgs[1][:, :, 0]
        out = pixelhop.apply_pixelhop(model, imgs[1])

        def unit_maps(source: np.ndarray, bank, side: int) -> dict[int, np.ndarray]:
            grid = side - 4
            maps = {}
            for col in range(bank.n_kept):
                m = np.empty((grid, grid))
                for r in range(grid):
                    for c in range(grid):
                        patch = source[r : r + 5, c : c + 5].ravel()
                        m[r, c] = float(patch @ bank.kernels[:, col]) + bank.bias
                maps[col] = m
            return maps

        def columns(model, unit_id, level):
            nodes = [
                n
                for n in model.nodes.values()
                if n.level == level
                and (n.parent == unit_id if level > 1 else n.id.startswith("1." + unit_id.split(".")[1]))
            ]
            col = 0
            out_cols = {}
            for n in sorted(nodes, key=lambda n: n.within_bank_index):
                if n.within_bank_index == 0 or n.status != DISCARDED:
                    if n.status != DISCARDED:
                        out_cols[n.id] = col
                    col += 1
            return out_cols

        # level 1
        ref_maps = {}
        pooled = {}
        bank = model.banks["1.u0"]
        maps = unit_maps(image, bank, 32)
        for node_id, col in columns(model, "1.u0", 1).items():
            ref_maps[node_id] = maps[col]
            node = model.nodes[node_id]
            if node.status == INTERMEDIATE:
                m = maps[col]
                pooled[node_id] = np.array(
                    [[m[2 * r : 2 * r + 2, 2 * c : 2 * c + 2].max() for c in range(14)] for r in range(14)]
                )
        for i, node in enumerate(model.output_nodes(1)):
            assert np.max(np.abs(out.level1[:, :, i] - ref_maps[node.id])) < 1e-8

        # level 2
        ref2 = {}
        pooled2 = {}
        for parent in model.nodes_at(1, (INTERMEDIATE,)):
            bank = model.banks[parent.id]
            maps = unit_maps(pooled[parent.id], bank, 14)
            for node_id, col in columns(model, parent.id, 2).items():
                ref2[node_id] = maps[col]
                if model.nodes[node_id].status == INTERMEDIATE:
                    m = maps[col]
                    pooled2[node_id] = np.array(
                        [[m[2 * r : 2 * r + 2, 2 * c : 2 * c + 2].max() for c in range(5)] for r in range(5)]
                    )
        for i, node in enumerate(model.output_nodes(2)):
            assert np.max(np.abs(out.level2[:, :, i] - ref2[node.id])) < 1e-8

        # level 3
        ref3 = {}
        for parent in model.nodes_at(2, (INTERMEDIATE,)):
            bank = model.banks[parent.id]
            maps = unit_maps(pooled2[parent.id], bank, 5)
            for node_id, col in columns(model, parent.id, 3).items():
                ref3[node_id] = maps[col][0, 0]
        for i, node in enumerate(model.output_nodes(3)):
            assert abs(out.level3[i] - ref3[node.id]) < 1e-8


class TestCountParameters:
    def test_published_y_row(self):
        counts = pixelhop.count_parameters((18, 119, 233), k0=1)
        assert counts == {"level1": 451, "level2": 2543, "level3": 2969}

    def test_published_crcb_row_table4_accounting(self):
        counts = pixelhop.count_parameters((19, 73, 124), k0=2, accounting="table4")
        assert counts == {"level1": 476, "level2": 1369, "level3": 1348}

    def test_crcb_text_accounting_prices_joint_kernels(self):
        counts = pixelhop.count_parameters((19, 73, 124), k0=2, accounting="text")
        assert counts["level1"] == 50 * 19 + 1 == 951
        assert counts["level2"] == 1369 and counts["level3"] == 1348

    def test_degenerate_zero_counts(self):
        assert pixelhop.count_parameters((0, 0, 0)) == {"level1": 1, "level2": 0, "level3": 0}

    def test_matches_fitted_model_counts(self, fitted_y):
        model, _ = fitted_y
        k1, k2, k3 = model.level_counts
        counts = pixelhop.count_parameters((k1, k2, k3), k0=1)
        assert counts["level1"] == 25 * k1 + 1


class TestSerialization:
    def test_round_trip_outputs_bit_exact(self, fitted_y, tmp_path):
        model, imgs = fitted_y
        path = tmp_path / "model.sslf"
        pixelhop.save_model(model, path)
        loaded = pixelhop.load_model(path)
        for img in imgs[:3]:
            a = pixelhop.apply_pixelhop(model, img)
            b = pixelhop.apply_pixelhop(loaded, img)
            assert np.array_equal(a.level1, b.level1)
            assert np.array_equal(a.level2, b.level2)
            assert np.array_equal(a.level3, b.level3)

    def test_nodes_and_energies_survive(self, fitted_y, tmp_path):
        model, _ = fitted_y
        path = tmp_path / "model.sslf"
        pixelhop.save_model(model, path)
        loaded = pixelhop.load_model(path)
        assert loaded.level_counts == model.level_counts
        for nid, node in model.nodes.items():
            other = loaded.nodes[nid]
            assert other.e_init == node.e_init  # bit-exact via JSON float repr
            assert other.e_norm == node.e_norm
            assert other.status == node.status

    def test_corrupted_byte_rejected(self, fitted_y, tmp_path):
        model, _ = fitted_y
        path = tmp_path / "model.sslf"
        pixelhop.save_model(model, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ModelIOError, match="checksum|corrupt"):
            pixelhop.load_model(path)

    def test_truncation_rejected(self, fitted_y, tmp_path):
        model, _ = fitted_y
        path = tmp_path / "model.sslf"
        pixelhop.save_model(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 3])
        with pytest.raises(ModelIOError):
            pixelhop.load_model(path)

    def test_future_version_rejected(self, tmp_path):
        path = tmp_path / "future.sslf"
        write_container(path, "pixelhop", {"x": 1}, {"a": np.zeros(3)})
        blob = bytearray(path.read_bytes())
        blob[4] = FORMAT_VERSION + 1  # little-endian version low byte
        path.write_bytes(bytes(blob))
        with pytest.raises(ModelIOError, match="version"):
            read_container(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.sslf"
        path.write_bytes(b"JUNKxxxxxxxxxxxxxxxx")
        with pytest.raises(ModelIOError, match="magic"):
            read_container(path)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "other.sslf"
        write_container(path, "somethingelse", {}, {})
        with pytest.raises(DataError):
            pixelhop.load_model(path)

import json

import numpy as np
import pytest

from tbnet.bilinear import BottleneckTB, TBConfig
from tbnet.complexity import audit_report, count_params, render_table1, table1_formula, table1_rows
from tbnet.layers import Conv2d, Conv3d, Linear, Sequential
from tbnet.network import NetworkConfig, assemble_network
from tbnet.tensor import ContractError


class TestBlockFormulas:
    @pytest.mark.parametrize("method, params, rfs", [("conv2d_3x3", 36864, 1), ("conv3d_3x3x3", 110592, 3),
                                                     ("tb_block", 81920, 2), ("bottleneck_tb", 29696, 6)])
    def test_rows_at_c64_p20(self, method, params, rfs):
        row = table1_formula(method, 64, 20, 1)
        assert (row.params, row.rfs) == (params, rfs)

    def test_labels(self):
        labels = [r.label for r in table1_rows(64, 20)]
        assert labels == ["9C^2", "27C^2", "20C^2", "7.25C^2"]

    def test_computation_scales_with_q(self):
        for m in ("conv2d_3x3", "bottleneck_tb"):
            assert table1_formula(m, 64, 20, 2 * 3136).flops == 2 * table1_formula(m, 64, 20, 3136).flops

    def test_unknown_method(self):
        with pytest.raises(ContractError):
            table1_formula("lstm", 64, 20, 1)

    def test_invalid_sizes(self):
        with pytest.raises(ContractError):
            table1_formula("conv2d_3x3", 0, 20, 1)

    def test_render(self):
        text = render_table1(table1_rows(64, 20))
        lines = text.splitlines()
        assert "20C^2" in lines[3] and lines[3].split()[2] == "81920"
        assert "7.25C^2" in lines[4] and lines[4].split()[2] == "29696"


class TestCounting:
    def test_linear_with_bias(self):
        assert count_params(Sequential(Linear(4, 3, seed=0))).total_params == 15

    def test_conv2d_matches_formula(self):
        report = count_params(Sequential(Conv2d(64, 64, 3, seed=0)), (1, 8, 64, 56, 56))
        row = report.rows[0]
        assert row.params == table1_formula("conv2d_3x3", 64, 20, 1).params
        assert row.discrepancy == 0

    def test_conv3d_matches_formula(self):
        report = count_params(Sequential(Conv3d(64, 64, (3, 3, 3), seed=0)))
        assert report.rows[0].params == table1_formula("conv3d_3x3x3", 64, 20, 1).params

    def test_bottleneck_as_built_vs_formula(self):
        report = count_params(BottleneckTB(TBConfig(64, p=20), seed=0))
        block = report.blocks[0]
        assert block.params == 11264 and block.formula_params == 29696
        assert block.discrepancy == 11264 - 29696 != 0
        assert block.rfs == 6

    def test_totals_are_row_sums(self):
        model = assemble_network(NetworkConfig(arch="wtbn", width_factor=1 / 16, num_classes=4,
                                               clip_shape=(4, 16, 16), p=3))
        report = count_params(model, (1, 4, 3, 16, 16))
        assert report.total_params == sum(r.params for r in report.rows)
        assert report.total_params == sum(p.size for p in model.parameters())
        assert report.total_flops == sum(r.flops for r in report.rows)

    def test_flops_linear_in_area(self):
        layer = Sequential(Conv2d(4, 8, 3, seed=0))
        small = count_params(layer, (1, 2, 4, 8, 8)).total_flops
        big = count_params(layer, (1, 2, 4, 8, 16)).total_flops
        assert big == 2 * small

    def test_conv_flops_are_two_per_mac(self):
        report = count_params(Sequential(Conv2d(2, 3, 3, seed=0)), (1, 1, 2, 4, 4))
        assert report.rows[0].flops == 2 * (2 * 9) * 3 * 16

    def test_full_width_c2d(self):
        total = count_params(assemble_network(NetworkConfig())).total_params
        assert abs(total - 11.3e6) / 11.3e6 < 0.05


class TestAudit:
    def test_report_consistent(self, tmp_path):
        model = assemble_network(NetworkConfig(arch="dtbn", width_factor=1 / 16, num_classes=4,
                                               clip_shape=(4, 16, 16), p=3))
        text, data = audit_report(model, (1, 4, 3, 16, 16), tmp_path / "r.json")
        on_disk = json.loads((tmp_path / "r.json").read_text())
        assert on_disk == json.loads(json.dumps(data))
        assert data["total_params"] == count_params(model).total_params
        assert {"layer", "kind", "params", "flops", "rfs", "formula_params", "discrepancy"} <= set(data["rows"][0])
        assert "2 x multiply-accumulates" in text
        assert all(r["discrepancy"] == 0 for r in data["rows"] if r["kind"] == "conv2d")
        assert all(b["rfs"] == 6 for b in data["blocks"])

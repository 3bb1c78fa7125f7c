import json

import pytest

from sinodet.config import ConfigError, RunConfig


class TestProfiles:
    def test_known_profiles_load(self):
        for name in ("full", "desk", "tiny"):
            cfg = RunConfig.from_profile(name)
            assert cfg["geometry"]["n_views"] > 0

    def test_unknown_profile_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_profile("huge")

    def test_full_profile_geometry(self):
        cfg = RunConfig.from_profile("full")
        geom = cfg.geometry()
        assert geom.n_views == 144
        assert geom.n_channels == 736


class TestOverrides:
    def test_file_with_profile_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(
            {"profile": "tiny", "recon": {"n_iters": 4}}))
        cfg = RunConfig.load(path)
        assert cfg["recon"]["n_iters"] == 4
        # untouched keys keep the profile value
        base = RunConfig.from_profile("tiny")
        assert cfg["recon"]["hidden"] == base["recon"]["hidden"]

    def test_unknown_key_rejected_with_path(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"profile": "tiny", "recon": {"depth": 3}}))
        with pytest.raises(ConfigError, match="recon.depth"):
            RunConfig.load(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"profile": "tiny", "extra": {}}))
        with pytest.raises(ConfigError):
            RunConfig.load(path)


class TestRoundTrip:
    def test_dump_load_identity(self, tmp_path):
        cfg = RunConfig.from_profile("tiny")
        out = tmp_path / "resolved.json"
        cfg.dump(out)
        again = RunConfig.load(out)
        assert again.doc == cfg.doc

    def test_derived_objects(self):
        cfg = RunConfig.from_profile("tiny")
        grid = cfg.grid()
        assert (grid.nx, grid.ny) == tuple(cfg["phantom"]["extents"][:2])
        geom = cfg.geometry()
        # auto channel count covers the grid field of view
        assert geom.n_channels > 0
        assert cfg.patch_shape() == tuple(cfg["detector"]["patch_shape"])

import numpy as np
import pytest

from core.crdpg import collect_episode
from core.evaluation import evaluate, parse_mode, per_image_mse, render_rasters, rollout_positions
from core.exceptions import ConfigError, UsageError
from core.networks import init_networks
from models.scan import ProcessedImage


@pytest.fixture
def bundle(tiny_train, tiny_env):
    return init_networks(tiny_train, tiny_env, 2)


class TestModes:

    def test_known_modes(self):
        assert parse_mode("adaptive").kind == "adaptive"
        assert parse_mode("spiral").kind == "spiral"
        mode = parse_mode("waypoints:paths/line.txt")
        assert (mode.kind, mode.waypoints) == ("waypoints", "paths/line.txt")

    @pytest.mark.parametrize("mode", ["raster", "waypoints", "spiral:fast"])
    def test_bad_modes(self, mode):
        with pytest.raises(ConfigError):
            parse_mode(mode)


class TestEvaluate:

    def test_batched_rollout_matches_episode(self, bundle, tiny_env, tiny_train, tiny_images):
        positions = rollout_positions(bundle.actor, tiny_env, tiny_images)
        assert positions.shape == (len(tiny_images), tiny_env.probes_per_episode, 2)
        for i, image in enumerate(tiny_images):
            history = collect_episode(bundle, tiny_env, image, None, 0, 1, tiny_train, explore=False)
            np.testing.assert_allclose(positions[i], history.probe_positions.reshape(-1, 2), atol=1e-4)

    def test_report(self, bundle, tiny_env, tiny_images):
        report = evaluate(bundle.generator, bundle.actor, tiny_env, tiny_images)
        assert report.count == len(tiny_images)
        assert report.mean == pytest.approx(report.per_image.mean())
        assert report.std == pytest.approx(np.sqrt(((report.per_image - report.mean) ** 2).mean()))
        assert report.to_csv().startswith("mean,std,count\n")

    def test_deterministic_and_read_only(self, bundle, tiny_env, tiny_images):
        before = {name: t.data.copy() for name, t in bundle.generator.params.items()}
        stats = {name: s.mean.copy() for name, s in bundle.generator.bn_stats.items()}
        first = evaluate(bundle.generator, bundle.actor, tiny_env, tiny_images)
        second = evaluate(bundle.generator, bundle.actor, tiny_env, tiny_images)
        np.testing.assert_array_equal(first.per_image, second.per_image)
        for name, value in before.items():
            np.testing.assert_array_equal(bundle.generator.params[name].data, value)
        for name, value in stats.items():
            np.testing.assert_array_equal(bundle.generator.bn_stats[name].mean, value)

    def test_spiral_needs_no_actor(self, bundle, tiny_env, tiny_images):
        report = evaluate(bundle.generator, None, tiny_env, tiny_images, mode="spiral", limit=2)
        assert report.count == 2

    def test_waypoint_mode(self, bundle, tiny_env, tiny_images, tmp_path):
        path = tmp_path / "zigzag.txt"
        path.write_text("1 1\n14 1\n14 4\n1 4\n1 8\n14 8\n14 12\n1 12\n", encoding="utf-8")
        report = evaluate(bundle.generator, None, tiny_env, tiny_images, mode=f"waypoints:{path}")
        assert np.all(np.isfinite(report.per_image))

    def test_adaptive_needs_actor(self, bundle, tiny_env, tiny_images):
        with pytest.raises(UsageError):
            evaluate(bundle.generator, None, tiny_env, tiny_images)

    def test_empty_split(self, bundle, tiny_env):
        with pytest.raises(UsageError):
            evaluate(bundle.generator, bundle.actor, tiny_env, [])

    def test_per_image_mse(self):
        image = ProcessedImage(raw_norm=np.zeros((2, 2), np.float32), target_blur=np.ones((2, 2), np.float32))
        completions = np.stack([np.ones((2, 2)), np.full((2, 2), 3.0)])
        np.testing.assert_allclose(per_image_mse(completions, [image, image]), [0.0, 4.0])


class TestRender:

    def test_rasters(self, bundle, tiny_env, tiny_images):
        scan, completion, target = render_rasters(bundle.generator, bundle.actor, tiny_env, tiny_images, 1)
        assert scan.shape == completion.shape == target.shape == (16, 16)
        np.testing.assert_array_equal(target, tiny_images[1].target_blur)

    def test_bad_index(self, bundle, tiny_env, tiny_images):
        with pytest.raises(UsageError):
            render_rasters(bundle.generator, bundle.actor, tiny_env, tiny_images, 4)

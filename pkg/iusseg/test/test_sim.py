import numpy as np
import pytest
from hypothesis import given, strategies as st

from iusseg.tissue.tss import AcousticProperties, bind_tissue_map, WHITE_MATTER, GRAY_MATTER, BACKGROUND
from iusseg.tissue.tss_phantom import two_layer_phantom, brain_phantom, sphere_phantom
from iusseg.volume.vol import Volume3D
from iusseg.simulate.sim_rng import counter_uniform, counter_normal, hash_counters, STREAM_NOISE
from iusseg.simulate.sim_physics import ProbeGeometry, ImagingParams, RigidPose, InvalidProbe, \
    InvalidImagingParams, InvalidPose, SimulationError, reflection_coefficient, attenuation_factor, scanlines, \
    trace_lines, trace_scanline
from iusseg.simulate.sim_psf import psf_kernels, convolve_psf, postprocess
from iusseg.simulate.sim import Frame, Sweep, params_id, render_frame, simulate_sweep, linear_trajectory, \
    frame_points, save_sweep, load_sweep

SMALL_PROBE = ProbeGeometry('linear', 16, 10.0, 48, 7.0, 9.0)
QUIET = {0: AcousticProperties(0.0004), 1: AcousticProperties(1.5), 2: AcousticProperties(7.8)}


class TestRng:
    def test_pure_function_of_counters(self):
        a = counter_uniform(7, STREAM_NOISE, np.arange(5, dtype=np.uint64))
        b = counter_uniform(7, STREAM_NOISE, np.arange(5, dtype=np.uint64)[::-1])[::-1]
        assert np.array_equal(a, b)
        assert np.all((a >= 0) & (a < 1))
        assert not np.array_equal(a, counter_uniform(8, STREAM_NOISE, np.arange(5, dtype=np.uint64)))

    def test_broadcasting(self):
        h = hash_counters(1, 2, np.arange(3, dtype=np.uint64)[:, None], np.arange(4, dtype=np.uint64)[None, :])
        assert h.shape == (3, 4)
        assert h[1, 2] == hash_counters(1, 2, 1, 2)

    def test_normal_moments(self):
        n = counter_normal(3, 1, np.arange(20000, dtype=np.uint64))
        assert abs(n.mean()) < 0.05
        assert abs(n.std() - 1.0) < 0.05


class TestParameters:
    def test_probe_properties(self):
        geom = ProbeGeometry('linear', 11, 10.0, 21, 5.0, 5.0)
        assert geom.sample_step_mm == 0.5
        assert geom.wavelength_mm == pytest.approx(0.308)
        assert geom.line_spacing_mm == 0.5
        assert ProbeGeometry.from_dict(geom.to_dict()) == geom

    @pytest.mark.parametrize('kwargs', [dict(kind='phased'), dict(samples_per_line=1), dict(element_count=0),
                                        dict(depth_mm=-1.0), dict(kind='curvilinear', aperture_angle_deg=180.0)])
    def test_invalid_probe(self, kwargs):
        with pytest.raises(InvalidProbe):
            ProbeGeometry(**kwargs)

    @pytest.mark.parametrize('kwargs', [dict(dynamic_range_db=10.0), dict(psf_axial_sigma_mm=0.0),
                                        dict(noise_floor=-0.1), dict(speckle_keying='frame'), dict(seed=-1)])
    def test_invalid_imaging(self, kwargs):
        with pytest.raises(InvalidImagingParams):
            ImagingParams(**kwargs)

    def test_pose(self):
        with pytest.raises(InvalidPose):
            RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        pose = RigidPose(np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(pose.apply([1.0, 0.0, 0.0]), [1.0, 3.0, 3.0])
        assert RigidPose.from_dict(pose.to_dict()).equals(pose)

    def test_params_id(self):
        a = params_id(ImagingParams(seed=1), SMALL_PROBE)
        assert len(a) == 12 and int(a, 16) >= 0
        assert a == params_id(ImagingParams(seed=1), SMALL_PROBE)
        assert a != params_id(ImagingParams(seed=2), SMALL_PROBE)


class TestLaws:
    def test_reflection(self):
        assert reflection_coefficient(1.5, 7.8) == pytest.approx(0.4589, abs=1e-4)
        assert reflection_coefficient(1.5, 1.5) == 0.0
        assert reflection_coefficient(0.0, 1.5) == 1.0
        with pytest.raises(SimulationError):
            reflection_coefficient(0.0, 0.0)
        with pytest.raises(SimulationError):
            reflection_coefficient(-1.0, 1.0)

    @given(st.floats(0.001, 100.0), st.floats(0.001, 100.0))
    def test_reflection_is_symmetric(self, z1, z2):
        r = reflection_coefficient(z1, z2)
        assert 0.0 <= r <= 1.0
        assert r == pytest.approx(reflection_coefficient(z2, z1))

    def test_attenuation(self):
        assert attenuation_factor(1.0, 5.0, 10.0) == pytest.approx(0.5623, abs=1e-4)
        assert attenuation_factor(0.0, 5.0, 10.0) == 1.0
        assert attenuation_factor(0.5, 5.0, 20.0) == pytest.approx(attenuation_factor(1.0, 5.0, 10.0))


class TestTracer:
    geom = ProbeGeometry('linear', 1, 19.0, 39, 5.0, 1.0)

    def test_two_layer_echo(self):
        tm = bind_tissue_map(two_layer_phantom((4, 4, 40), 0.5, 20, upper=1, lower=2), QUIET, 0)
        line = trace_scanline(tm, np.array([1.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), self.geom,
                              ImagingParams(), 0)
        assert line.shape == (39,)
        assert np.argmax(line) == 20
        assert line[20] == pytest.approx(0.4589, abs=1e-4)
        assert np.count_nonzero(line) == 1

    def test_attenuated_echo(self):
        table = {0: AcousticProperties(0.0004), 1: AcousticProperties(1.5, attenuation=1.0),
                 2: AcousticProperties(7.8)}
        tm = bind_tissue_map(two_layer_phantom((4, 4, 40), 0.5, 20, upper=1, lower=2), table, 0)
        line = trace_scanline(tm, np.array([1.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), self.geom,
                              ImagingParams(), 0)
        # 19 steps through attenuating tissue, one in the lossless lower layer
        expected = reflection_coefficient(1.5, 7.8) * attenuation_factor(1.0, 5.0, 9.5) ** 2
        assert line[20] == pytest.approx(expected)

    def test_background_closes_the_ray(self):
        data = np.full((4, 4, 40), 2, dtype=np.uint8)
        data[:, :, :10] = 1
        data[:, :, 10:20] = BACKGROUND
        tm = bind_tissue_map(Volume3D(data, (0.5,) * 3), QUIET, BACKGROUND)
        line = trace_scanline(tm, np.array([1.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), self.geom,
                              ImagingParams(), 0)
        assert line[10] == pytest.approx(1.0)
        assert np.count_nonzero(line[11:]) == 0
        assert np.count_nonzero(line) == 1

    def test_leading_background_is_silent(self):
        data = np.full((4, 4, 40), 2, dtype=np.uint8)
        data[:, :, :6] = BACKGROUND
        data[:, :, 6:20] = 1
        tm = bind_tissue_map(Volume3D(data, (0.5,) * 3), QUIET, BACKGROUND)
        line = trace_scanline(tm, np.array([1.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), self.geom,
                              ImagingParams(), 0)
        assert np.count_nonzero(line) == 1
        assert line[20] == pytest.approx(0.4589, abs=1e-4)

    def test_direction_checks(self):
        tm = bind_tissue_map(two_layer_phantom((4, 4, 40), 0.5, 20), QUIET, 0)
        with pytest.raises(SimulationError):
            trace_lines(tm, np.zeros((1, 3)), np.zeros((1, 3)), self.geom, ImagingParams(), [0])
        with pytest.raises(SimulationError):
            trace_lines(tm, np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]), self.geom, ImagingParams(), [0])

    def test_speckle_keying(self, bind):
        tm = bind(two_layer_phantom((8, 8, 40), 0.5, 20, upper=GRAY_MATTER, lower=GRAY_MATTER))
        o, d = np.array([2.0, 2.0, 0.0]), np.array([0.0, 0.0, 1.0])
        by_voxel = ImagingParams(seed=5)
        assert np.array_equal(trace_scanline(tm, o, d, self.geom, by_voxel, 0),
                              trace_scanline(tm, o, d, self.geom, by_voxel, 3))
        by_line = ImagingParams(seed=5, speckle_keying='line')
        assert not np.array_equal(trace_scanline(tm, o, d, self.geom, by_line, 0),
                                  trace_scanline(tm, o, d, self.geom, by_line, 3))
        assert np.count_nonzero(trace_scanline(tm, o, d, self.geom, by_voxel, 0)) > 5

    def test_scanlines(self):
        origins, directions = scanlines(ProbeGeometry('linear', 3, 10.0, 8, 5.0, 4.0), RigidPose())
        np.testing.assert_allclose(origins[:, 0], [-2.0, 0.0, 2.0])
        np.testing.assert_allclose(directions, [[0, 0, 1]] * 3)
        curved = ProbeGeometry('curvilinear', 3, 10.0, 8, 5.0, 4.0, 90.0, 5.0)
        origins, directions = scanlines(curved, RigidPose())
        np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)
        np.testing.assert_allclose(origins[1], [0.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(directions[0], [-np.sqrt(0.5), 0.0, np.sqrt(0.5)])


class TestPsf:
    def test_kernels(self):
        axial, lateral = psf_kernels(ImagingParams(), SMALL_PROBE)
        assert axial[axial.size // 2] == 1.0
        assert lateral.sum() == pytest.approx(1.0)
        assert axial.size % 2 == 1 and lateral.size % 2 == 1

    def test_kernel_wider_than_image(self):
        geom = ProbeGeometry('linear', 4, 3.0, 4, 5.0, 3.0)
        with pytest.raises(SimulationError):
            convolve_psf(np.zeros((4, 4)), ImagingParams(psf_axial_sigma_mm=2.0), geom)

    def test_postprocess_range(self):
        env = convolve_psf(np.random.default_rng(0).random((48, 16)), ImagingParams(), SMALL_PROBE)
        out = postprocess(env, ImagingParams(tgc_gain_db_per_cm=2.0, noise_floor=0.01), SMALL_PROBE)
        assert out.shape == (48, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.array_equal(postprocess(np.zeros((48, 16)), ImagingParams(), SMALL_PROBE), np.zeros((48, 16)))

    def test_noise_is_keyed_by_frame(self):
        env = convolve_psf(np.random.default_rng(1).random((48, 16)), ImagingParams(), SMALL_PROBE)
        noisy = ImagingParams(noise_floor=0.05, seed=2)
        assert not np.array_equal(postprocess(env, noisy, SMALL_PROBE, 0), postprocess(env, noisy, SMALL_PROBE, 1))
        assert np.array_equal(postprocess(env, noisy, SMALL_PROBE, 4), postprocess(env, noisy, SMALL_PROBE, 4))
        assert np.array_equal(postprocess(env, ImagingParams(), SMALL_PROBE, 0),
                              postprocess(env, ImagingParams(), SMALL_PROBE, 1))

    def test_impulse_recovers_the_kernel(self):
        params = ImagingParams()
        axial, lateral = psf_kernels(params, SMALL_PROBE)
        ha, hl = axial.size // 2, lateral.size // 2
        rf = np.zeros((48, 16))
        rf[24, 8] = 1.0
        expected = np.zeros((48, 16))
        expected[24 - ha:24 + ha + 1, 8 - hl:8 + hl + 1] = np.outer(axial, lateral)
        np.testing.assert_allclose(convolve_psf(rf, params, SMALL_PROBE, envelope=False), expected, atol=1e-6)
        assert np.array_equal(convolve_psf(np.zeros((48, 16)), params, SMALL_PROBE), np.zeros((48, 16)))

    @given(st.floats(0.01, 100.0))
    def test_convolution_is_linear(self, a):
        rf = np.random.default_rng(4).random((48, 16))
        params = ImagingParams()
        np.testing.assert_allclose(convolve_psf(a * rf, params, SMALL_PROBE, envelope=False),
                                   a * convolve_psf(rf, params, SMALL_PROBE, envelope=False), rtol=1e-9, atol=1e-12)

    def test_normalization_level_maps_to_one(self):
        env = np.full((48, 16), 0.5)
        env[:10] = 0.1
        out = postprocess(env, ImagingParams(), SMALL_PROBE)
        assert np.all(out[10:] == pytest.approx(1.0, abs=1e-6))
        assert out[0, 0] == pytest.approx((20.0 * np.log10(0.2 + 1e-6) + 60.0) / 60.0)

    def test_postprocess_is_monotone(self):
        rng = np.random.default_rng(6)
        env = rng.random((48, 16))
        out = postprocess(env, ImagingParams(tgc_gain_db_per_cm=1.5), SMALL_PROBE)
        depth_cm = np.arange(48, dtype=np.float64) * SMALL_PROBE.sample_step_mm / 10.0
        gain = 10.0 ** (1.5 * depth_cm / 20.0)
        order = np.argsort((env * gain[:, None]).ravel())
        assert np.all(np.diff(out.ravel()[order]) >= 0.0)
        # raising values below the median leaves the normalization level alone
        median = np.median(env)
        raised = np.where(env < median, np.minimum(median, env + rng.random(env.shape)), env)
        assert np.percentile(raised, 99.5) == np.percentile(env, 99.5)
        assert np.all(postprocess(raised, ImagingParams(), SMALL_PROBE)
                      >= postprocess(env, ImagingParams(), SMALL_PROBE))


class TestSweep:
    def test_frame_validation(self):
        with pytest.raises(SimulationError):
            Frame(np.zeros((2, 2)), RigidPose(), SMALL_PROBE, 0, 1, 0, 1)
        with pytest.raises(SimulationError):
            Frame(np.full((48, 16), 2.0), RigidPose(), SMALL_PROBE, 0, 1, 0, 1)

    def test_render_frame(self, bind):
        tm = bind(brain_phantom((20,) * 3, 0.5, 1))
        pose = linear_trajectory(tm, 3, SMALL_PROBE)[1]
        frame = render_frame(tm, pose, SMALL_PROBE, ImagingParams(seed=1))
        assert frame.pixels.shape == (48, 16) and frame.pixels.dtype == np.float32
        assert 0.0 <= frame.pixels.min() and frame.pixels.max() <= 1.0
        assert frame.pixels.max() > 0.5
        points = frame_points(frame)
        assert points.shape == (48, 16, 3)
        np.testing.assert_allclose(points[0, 0], pose.apply([frame.x0, 0.0, frame.z0]))

    def test_curvilinear_frame(self, bind):
        geom = ProbeGeometry('curvilinear', 16, 9.0, 48, 5.0, 8.0, 40.0, 5.0)
        tm = bind(sphere_phantom((20,) * 3, 0.5, 3.0))
        frame = render_frame(tm, linear_trajectory(tm, 2, geom)[1], geom, ImagingParams())
        assert frame.pixels.shape == (48, 16)
        # corners lie outside the fan
        assert frame.pixels[0, 0] == 0.0 and frame.pixels[0, -1] == 0.0

    def test_trajectory(self, bind):
        tm = bind(two_layer_phantom((8, 8, 8), 0.5, 4))
        poses = linear_trajectory(tm, 5, SMALL_PROBE, margin_mm=1.0)
        ys = [p.translation[1] for p in poses]
        assert ys[0] == pytest.approx(-1.25) and ys[-1] == pytest.approx(4.75)
        assert all(p.translation[2] == pytest.approx(-0.25) for p in poses)
        with pytest.raises(SimulationError):
            linear_trajectory(tm, 1, SMALL_PROBE)
        with pytest.raises(SimulationError):
            linear_trajectory(tm, 3, SMALL_PROBE, foreground_labels=[4])

    def test_empty_and_single_pose(self, bind):
        tm = bind(two_layer_phantom((8, 8, 8), 0.5, 4))
        with pytest.raises(SimulationError):
            simulate_sweep(tm, [], SMALL_PROBE, ImagingParams())
        with pytest.raises(SimulationError):
            simulate_sweep(tm, [RigidPose()], SMALL_PROBE, ImagingParams())

    def test_threads_do_not_change_the_result(self, bind):
        tm = bind(brain_phantom((20,) * 3, 0.5, 2), id='b2')
        trajectory = linear_trajectory(tm, 4, SMALL_PROBE)
        params = ImagingParams(seed=9, noise_floor=0.01)
        one = simulate_sweep(tm, trajectory, SMALL_PROBE, params, threads=1)
        many = simulate_sweep(tm, trajectory, SMALL_PROBE, params, threads=3)
        assert one.equals(many)
        assert len(one) == 4 and one.tissue_map_id == 'b2'
        assert one.params_id == params_id(params, SMALL_PROBE)


    def test_sphere_cross_sections_grow_then_shrink(self, bind):
        tm = bind(sphere_phantom((24,) * 3, 0.5, 4.0, inside=WHITE_MATTER, outside=BACKGROUND))
        sweep = simulate_sweep(tm, linear_trajectory(tm, 9, SMALL_PROBE), SMALL_PROBE, ImagingParams(seed=2))
        widths = [int(np.count_nonzero(f.pixels.max(axis=0) > 0.5)) for f in sweep.frames]
        peak = int(np.argmax(widths))
        assert 3 <= np.flatnonzero(np.array(widths) == widths[peak]).mean() <= 5
        assert widths[0] < widths[peak] and widths[-1] < widths[peak]
        assert widths[peak] >= 8

    def test_identical_poses_give_identical_frames(self, bind):
        tm = bind(sphere_phantom((20,) * 3, 0.5, 3.0))
        pose = linear_trajectory(tm, 3, SMALL_PROBE)[1]
        sweep = simulate_sweep(tm, [pose] * 3, SMALL_PROBE, ImagingParams(seed=8))
        assert sweep.frames[0].equals(sweep.frames[1]) and sweep.frames[1].equals(sweep.frames[2])

    def test_repeated_pose_gets_fresh_noise(self, bind):
        tm = bind(brain_phantom((20,) * 3, 0.5, 1))
        pose = linear_trajectory(tm, 3, SMALL_PROBE)[1]
        sweep = simulate_sweep(tm, [pose, pose], SMALL_PROBE, ImagingParams(seed=3, noise_floor=0.02))
        assert not np.array_equal(sweep.frames[0].pixels, sweep.frames[1].pixels)
        quiet = simulate_sweep(tm, [pose, pose], SMALL_PROBE, ImagingParams(seed=3))
        assert np.array_equal(quiet.frames[0].pixels, quiet.frames[1].pixels)

    def test_save_and_load(self, bind, tmp_path):
        tm = bind(brain_phantom((20,) * 3, 0.5, 2))
        sweep = simulate_sweep(tm, linear_trajectory(tm, 3, SMALL_PROBE, tilt_deg=10.0), SMALL_PROBE,
                               ImagingParams(seed=4))
        save_sweep(sweep, str(tmp_path / 'sweep'))
        assert (tmp_path / 'sweep' / 'frame_0002.mhd').is_file()
        loaded = load_sweep(str(tmp_path / 'sweep'))
        assert loaded.equals(sweep)
        assert loaded.params == sweep.params and loaded.params_id == sweep.params_id
        assert isinstance(loaded, Sweep)

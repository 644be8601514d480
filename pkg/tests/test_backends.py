import http.server
import math
import threading

import numpy as np
import pytest

from roomforge import camera, images
from roomforge.align import loss_depth, GuidanceDepth
from roomforge.backends import (BackendDescriptor, GeneratorRequest, MockDepthEstimator,
                                MockGenerator, MockMasker, RemoteDepthEstimator,
                                RemoteGenerator, instance_box_prompt, mock_backends,
                                _parse_multipart, remote_call)
from roomforge.errors import ProtocolError, TransportError
from roomforge.panorama import build_fan, homography
from roomforge.render import render_controls
from roomforge.scene import Viewpoint

from conftest import standard_room


def panorama_request(room, res=128, seed=7):
    fan = build_fan((0.2, 1.4, 0.1), res)
    frames = [render_controls(room, v) for v in fan.views]
    return GeneratorRequest(
        mode="panorama",
        semantics=[f.semantics for f in frames],
        near_depth=[f.near_depth for f in frames],
        prompt=room.style_prompt,
        seed=seed,
        correspondences=[{"source": k, "target": (k + 1) % 8} for k in range(8)],
    ), fan


class TestMockGenerator:
    def test_deterministic(self, five_box_room):
        req, _ = panorama_request(five_box_room)
        gen = MockGenerator(five_box_room.palette)
        a = gen.panorama(req)
        b = gen.panorama(req)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_cross_view_consistency(self, five_box_room):
        req, fan = panorama_request(five_box_room, res=128)
        gen = MockGenerator(five_box_room.palette)
        views = gen.panorama(req)
        res = 128
        frames = [render_controls(five_box_room, v) for v in fan.views]
        uu, vv = np.meshgrid(np.arange(res) + 0.5, np.arange(res) + 0.5)
        worst = 0.0
        for k in range(8):
            j = (k + 1) % 8
            h = homography(fan, k, j)
            pts = np.stack([uu, vv, np.ones_like(uu)], -1) @ h.T
            w = pts[..., 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                tu = (pts[..., 0] / w) - 0.5
                tv = (pts[..., 1] / w) - 0.5
            valid = (w > 0) & (tu >= 1) & (tu <= res - 2) & (tv >= 1) & (tv <= res - 2)
            # bilinear sample view j at the warped coordinates
            src = views[j].astype(np.float64)
            u0 = np.clip(np.floor(np.where(valid, tu, 0)).astype(int), 0, res - 2)
            v0 = np.clip(np.floor(np.where(valid, tv, 0)).astype(int), 0, res - 2)
            fu = (np.where(valid, tu, 0) - u0)[..., None]
            fv = (np.where(valid, tv, 0) - v0)[..., None]
            warped = ((src[v0, u0] * (1 - fu) + src[v0, u0 + 1] * fu) * (1 - fv)
                      + (src[v0 + 1, u0] * (1 - fu) + src[v0 + 1, u0 + 1] * fu) * fv)
            diff = np.abs(warped - views[k].astype(np.float64)).max(axis=-1)
            # the consistency claim is about the shared texture: pixels near
            # class boundaries (where label quantization and bilinear
            # resampling legitimately differ) are excluded via the exact
            # semantic control maps, dilated to the resampling footprint
            from scipy import ndimage

            def near_boundary(sem):
                mx = ndimage.maximum_filter(sem, size=9)
                mn = ndimage.minimum_filter(sem, size=9)
                return mx != mn

            bj = near_boundary(frames[j].semantics)
            bj_warped = bj[np.clip(np.rint(tv).astype(int), 0, res - 1),
                           np.clip(np.rint(tu).astype(int), 0, res - 1)]
            ok = valid & ~near_boundary(frames[k].semantics) & ~bj_warped
            if ok.any():
                worst = max(worst, float(diff[ok].max()))
        assert worst <= 2.0

    def test_inpaint_empty_mask_identity(self, five_box_room):
        v = Viewpoint((0.2, 1.4, 0.1), yaw=0.0, width=64, height=64)
        cf = render_controls(five_box_room, v)
        frame = np.full((64, 64, 3), 90, np.uint8)
        req = GeneratorRequest("inpaint", [cf.semantics], [cf.near_depth],
                               "x", 3, frame=frame, mask=np.zeros((64, 64), bool))
        out = MockGenerator(five_box_room.palette).inpaint(req)
        assert np.array_equal(out, frame)

    def test_inpaint_fills_only_mask(self, five_box_room):
        v = Viewpoint((0.2, 1.4, 0.1), yaw=0.0, width=64, height=64)
        cf = render_controls(five_box_room, v)
        frame = np.full((64, 64, 3), 90, np.uint8)
        mask = np.zeros((64, 64), bool)
        mask[20:40, 20:40] = True
        req = GeneratorRequest("inpaint", [cf.semantics], [cf.near_depth],
                               "x", 3, frame=frame, mask=mask)
        out = MockGenerator(five_box_room.palette).inpaint(req)
        assert np.array_equal(out[~mask], frame[~mask])
        assert (out[mask] != frame[mask]).any()

    def test_request_validation(self):
        with pytest.raises(Exception):
            GeneratorRequest("panorama", [np.zeros((8, 8))] * 3,
                             [np.zeros((8, 8))] * 3, "p", 0)


class TestMockDepth:
    def test_exact_oracle_when_undistorted(self, five_box_room):
        v = Viewpoint((0.2, 1.4, 0.1), yaw=0.5, width=64, height=64)
        est = MockDepthEstimator(five_box_room)
        depth = est.estimate(np.zeros((64, 64, 3), np.uint8), v)
        cf = render_controls(five_box_room, v)
        gt = np.where(cf.instances > 0, cf.near_depth, cf.far_depth)
        assert np.allclose(depth.values, gt, atol=1e-12)
        g = GuidanceDepth(cf.near_depth, cf.far_depth, np.zeros((64, 64), bool))
        value, _ = loss_depth(depth, g)
        assert value == 0.0

    def test_distortion_breaks_bounds(self, five_box_room):
        v = Viewpoint((0.2, 1.4, 0.1), yaw=0.5, width=64, height=64)
        est = MockDepthEstimator(five_box_room, scale=1.3, shift=0.4)
        depth = est.estimate(np.zeros((64, 64, 3), np.uint8), v)
        cf = render_controls(five_box_room, v)
        g = GuidanceDepth(cf.near_depth, cf.far_depth, np.zeros((64, 64), bool))
        value, _ = loss_depth(depth, g)
        assert value > 0.1

    def test_seeded_noise_reproducible(self, five_box_room):
        v = Viewpoint((0.2, 1.4, 0.1), yaw=0.5, width=64, height=64)
        est = MockDepthEstimator(five_box_room, noise_sigma=0.05)
        a = est.estimate(np.zeros((64, 64, 3), np.uint8), v, seed=11)
        b = est.estimate(np.zeros((64, 64, 3), np.uint8), v, seed=11)
        c = est.estimate(np.zeros((64, 64, 3), np.uint8), v, seed=12)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)


class TestMockMasker:
    def test_tight_prompt_recovers_instance(self, five_box_room):
        v = Viewpoint((0.2, 1.4, 0.1), yaw=3.6, width=96, height=96)
        cf = render_controls(five_box_room, v)
        masker = MockMasker()
        present = [i for i in np.unique(cf.instances) if i > 0]
        assert present
        for i in present:
            prompt = instance_box_prompt(cf.instances, int(i))
            mask = masker.mask(None, prompt, cf.instances)
            assert np.array_equal(mask, cf.instances == i)

    def test_prompt_without_instance_empty(self, five_box_room):
        v = Viewpoint((0.2, 1.4, 0.1), yaw=0.0, width=64, height=64)
        cf = render_controls(five_box_room, v)
        bg = np.argwhere(cf.instances == 0)
        y, x = bg[0]
        mask = MockMasker().mask(None, (int(x), int(y), int(x) + 1, int(y) + 1),
                                 cf.instances)
        assert not mask.any()

    def test_no_cross_instance_leakage(self, five_box_room):
        v = Viewpoint((0.2, 1.4, 0.1), yaw=3.6, width=96, height=96)
        cf = render_controls(five_box_room, v)
        present = [i for i in np.unique(cf.instances) if i > 0]
        target = present[0]
        mask = MockMasker().mask(None, instance_box_prompt(cf.instances, int(target)),
                                 cf.instances)
        for other in present[1:]:
            assert not (mask & (cf.instances == other)).any()


# ---------------------------------------------------------------------------
# Remote protocol against a loopback server

class _EchoHandler(http.server.BaseHTTPRequestHandler):
    mode = "echo"  # "echo" | "wrong_resolution"

    def log_message(self, *args):
        pass

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = self.rfile.read(length)
        parts = _parse_multipart(self.headers["Content-Type"], body)
        out = []
        boundary = "roomforge-test-boundary"
        for name, data in parts.items():
            if name == "meta" or not name.startswith("semantic"):
                continue
            k = name.split("_")[1]
            labels = images.decode_labels(data)
            if self.mode == "wrong_resolution":
                rgb = np.zeros((16, 16, 3), np.uint8)
            else:
                rgb = np.stack([labels % 256] * 3, -1).astype(np.uint8)
            out.append((f"rgb_{k}", images.encode_rgb(rgb)))
        chunks = []
        for name, data in out:
            chunks.append(
                f'--{boundary}\r\nContent-Disposition: form-data; name="{name}"; '
                f'filename="{name}.png"\r\nContent-Type: image/png\r\n\r\n'.encode()
                + data + b"\r\n")
        payload = b"".join(chunks) + f"--{boundary}--\r\n".encode()
        self.send_response(200)
        self.send_header("Content-Type", f"multipart/form-data; boundary={boundary}")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


@pytest.fixture
def echo_server():
    _EchoHandler.mode = "echo"
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _EchoHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/"
    server.shutdown()


class TestRemoteProtocol:
    def test_echo_round_trip(self, five_box_room, echo_server):
        req, _ = panorama_request(five_box_room, res=64)
        gen = RemoteGenerator(BackendDescriptor("remote", echo_server, timeout=10))
        views = gen.panorama(req)
        assert len(views) == 8
        assert views[0].shape == (64, 64, 3)

    def test_wrong_resolution_is_protocol_error(self, five_box_room, echo_server):
        _EchoHandler.mode = "wrong_resolution"
        req, _ = panorama_request(five_box_room, res=64)
        gen = RemoteGenerator(BackendDescriptor("remote", echo_server, timeout=10))
        with pytest.raises(ProtocolError, match="shape"):
            gen.panorama(req)

    def test_unreachable_endpoint(self):
        desc = BackendDescriptor("remote", "http://127.0.0.1:1/", timeout=0.5)
        with pytest.raises(TransportError):
            remote_call(desc, {"mode": "x"}, {})

    def test_missing_part_is_protocol_error(self, five_box_room, echo_server):
        # depth adapter expects a "depth" part the echo server never sends
        est = RemoteDepthEstimator(BackendDescriptor("remote", echo_server, timeout=10))
        v = Viewpoint((0, 1.5, 0), yaw=0.0, width=32, height=32)
        with pytest.raises(ProtocolError):
            est.estimate(np.zeros((32, 32, 3), np.uint8), v)

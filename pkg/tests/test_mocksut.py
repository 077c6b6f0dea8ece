import json

import pytest
import requests

from wattbench.mocksut import BASE_MEMORY_BYTES, PROFILES, MockSut, burn, serve


class TestProfiles:
    def test_four_profiles_defined(self):
        assert set(PROFILES) == {"v1", "v2", "v3", "v4"}

    def test_cpu_work_ordering_matches_intended_versions(self):
        w = {k: p.cpu_work_units for k, p in PROFILES.items()}
        # the heavy path dominates; the optimized heavy path sits in between
        assert w["v3"] > w["v4"] > w["v1"] == w["v2"]

    def test_v2_only_differs_in_payload(self):
        v1, v2 = PROFILES["v1"], PROFILES["v2"]
        assert v2.payload_bytes > v1.payload_bytes
        assert (v1.cpu_work_units, v1.base_latency_ms) == (v2.cpu_work_units, v2.base_latency_ms)


class TestBurnKernel:
    def test_deterministic(self):
        assert burn(1000) == burn(1000)

    def test_zero_units_is_seed(self):
        assert burn(0) == 0x9E3779B97F4A7C15


@pytest.fixture(scope="module")
def sut():
    service = serve("v1")
    yield service
    service.stop()


class TestHttpBehaviour:
    def test_health(self, sut):
        resp = requests.get(sut.base_url + "/health", timeout=5)
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok"}

    def test_login_success_returns_token_of_profile_size(self, sut):
        resp = requests.post(
            sut.base_url + "/login",
            data=json.dumps({"user": "alice", "pass": "pw1"}),
            timeout=5,
        )
        assert resp.status_code == 200
        token = resp.json()["token"]
        assert len(token) == PROFILES["v1"].payload_bytes

    def test_login_tokens_deterministic_per_credential(self, sut):
        body = json.dumps({"user": "bob", "pass": "pw2"})
        first = requests.post(sut.base_url + "/login", data=body, timeout=5).json()
        second = requests.post(sut.base_url + "/login", data=body, timeout=5).json()
        assert first == second
        other = json.dumps({"user": "carol", "pass": "pw3"})
        assert requests.post(sut.base_url + "/login", data=other, timeout=5).json() != first

    def test_malformed_credentials_rejected(self, sut):
        resp = requests.post(sut.base_url + "/login", data=b"not json", timeout=5)
        assert resp.status_code == 400
        resp = requests.post(sut.base_url + "/login", data=json.dumps({"user": "x"}), timeout=5)
        assert resp.status_code == 400

    def test_unknown_paths_404(self, sut):
        assert requests.get(sut.base_url + "/nope", timeout=5).status_code == 404
        assert requests.post(sut.base_url + "/nope", timeout=5).status_code == 404


class TestStats:
    def test_memory_includes_payload_working_set(self):
        sut = MockSut("v2")
        memory, cpu = sut.stats()
        assert memory == BASE_MEMORY_BYTES + PROFILES["v2"].payload_bytes * 1024
        assert cpu == 0

    def test_cpu_accumulates_with_requests(self, sut):
        _, before = sut.stats()
        body = json.dumps({"user": "dave", "pass": "pw"})
        for _ in range(5):
            requests.post(sut.base_url + "/login", data=body, timeout=5)
        _, after = sut.stats()
        assert after > before

import hashlib

from eot_stability.hash import batch_get_sha256, calculate_sha256, config_digest, support_digest


def test_file_digests(tmp_path):
    a = tmp_path / "a.csv"
    a.write_bytes(b"index,metric,value,converged\n")
    missing = tmp_path / "missing.csv"
    digests = batch_get_sha256([a, missing])
    assert digests[str(a)] == hashlib.sha256(a.read_bytes()).hexdigest()
    assert digests[str(a)] == calculate_sha256(a, chunk_size=3)
    assert digests[str(missing)] == ""


def test_config_digest_ignores_key_order():
    assert config_digest({"a": 1, "b": [1.0, 2.0]}) == config_digest({"b": [1.0, 2.0], "a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})


def test_support_digest_depends_on_order():
    keys = [(0.0,), (1.0,)]
    assert support_digest(keys) == support_digest(list(keys))
    assert support_digest(keys) != support_digest(keys[::-1])
    assert len(support_digest(keys)) == 16

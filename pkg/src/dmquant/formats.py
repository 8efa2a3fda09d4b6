"""On-disk artifacts: checkpoints, calibration sets, quantized models, sample files.

Every file starts with one JSON header line carrying ``format`` and
``format_version``; binary payloads follow in the tensor format of
:func:`dmquant.core.write_tensor`. Writers go through a temporary file in the
target directory and an atomic rename.
"""
import contextlib
import io
import json
import os
import tempfile

import numpy as np

from dmquant.calibration import CalibrationSet
from dmquant.core import InputError, read_tensor, write_tensor
from dmquant.diffusion import NoiseSchedule
from dmquant.scorenet import QuantizedNetwork, ScoreNetwork

FORMAT_VERSION = 1


class IncompatibleArtifactError(ValueError):
    """A file has the wrong format, version or architecture."""


def dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@contextlib.contextmanager
def atomic_write(path):
    """Yield a binary handle whose content replaces ``path`` only on success."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_text(path, text):
    with atomic_write(path) as fh:
        fh.write(text.encode("utf-8"))


def _header(fh, expected):
    line = fh.readline()
    try:
        header = json.loads(line)
    except ValueError as exc:
        raise IncompatibleArtifactError(f"not a {expected} file (bad header)") from exc
    if not isinstance(header, dict) or header.get("format") != expected:
        raise IncompatibleArtifactError(f"not a {expected} file")
    if header.get("format_version") != FORMAT_VERSION:
        raise IncompatibleArtifactError(
            f"unsupported {expected} version {header.get('format_version')}"
        )
    return header


def _open(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return open(path, "rb")


def checkpoint_header(net, sched, meta=None):
    h = {
        "format": "ckpt",
        "format_version": FORMAT_VERSION,
        "architecture": net.architecture(),
        "schedule": sched.to_json(),
    }
    h.update(meta or {})
    return h


def _write_layers(fh, net):
    for W, b in net.layers:
        write_tensor(fh, W)
        write_tensor(fh, b)


def _read_layers(fh, arch):
    n_layers = len(arch["hidden_dims"]) + 1
    layers = []
    for _ in range(n_layers):
        W = read_tensor(fh)
        b = read_tensor(fh)
        layers.append((W, b))
    return layers


def _build_net(header, layers):
    arch = header["architecture"]
    try:
        return ScoreNetwork(arch["input_dim"], layers, arch["time_embed_dim"], header["schedule"]["T"])
    except ValueError as exc:
        raise IncompatibleArtifactError(str(exc)) from exc


def save_checkpoint(path, net, sched, meta=None):
    with atomic_write(path) as fh:
        fh.write(dumps(checkpoint_header(net, sched, meta)).encode() + b"\n")
        _write_layers(fh, net)


def load_checkpoint(path):
    """Returns ``(net, schedule, header)``."""
    with _open(path) as fh:
        header = _header(fh, "ckpt")
        layers = _read_layers(fh, header["architecture"])
    return _build_net(header, layers), NoiseSchedule.from_json(header["schedule"]), header


def save_calibration(path, calib):
    header = {"format": "calib", "format_version": FORMAT_VERSION, "manifest": calib.manifest,
              "N": calib.N}
    with atomic_write(path) as fh:
        fh.write(dumps(header).encode() + b"\n")
        fh.write(calib.timesteps.astype("<u4").tobytes())
        write_tensor(fh, calib.samples)


def load_calibration(path):
    with _open(path) as fh:
        header = _header(fh, "calib")
        n = int(header["N"])
        raw = fh.read(4 * n)
        if len(raw) != 4 * n:
            raise InputError("truncated calibration timesteps")
        timesteps = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        samples = read_tensor(fh)
    return CalibrationSet(samples, timesteps, header["manifest"])


def save_qmodel(path, qnet, sched, ckpt_header):
    header = dict(ckpt_header)
    header["format"] = "qmodel"
    header["quant"] = qnet.params_json()
    base = ScoreNetwork(qnet.input_dim, [(W, b) for W, b in qnet.base_layers], qnet.time_embed_dim, qnet.T)
    with atomic_write(path) as fh:
        fh.write(dumps(header).encode() + b"\n")
        _write_layers(fh, base)


def load_qmodel(path):
    """Returns ``(quantized_net, schedule, header)``."""
    with _open(path) as fh:
        header = _header(fh, "qmodel")
        layers = _read_layers(fh, header["architecture"])
    base = _build_net(header, layers)
    try:
        qnet = QuantizedNetwork.from_params_json(base, header["quant"])
    except (KeyError, ValueError) as exc:
        raise IncompatibleArtifactError(f"bad quantization block: {exc}") from exc
    return qnet, NoiseSchedule.from_json(header["schedule"]), header


def load_model(path):
    """Load either a checkpoint or a quantized model by sniffing the header."""
    with _open(path) as fh:
        try:
            fmt = json.loads(fh.readline()).get("format")
        except (ValueError, AttributeError) as exc:
            raise IncompatibleArtifactError(f"{path} is not a model file") from exc
    if fmt == "ckpt":
        return load_checkpoint(path)
    if fmt == "qmodel":
        return load_qmodel(path)
    raise IncompatibleArtifactError(f"{path} is not a model file (format {fmt!r})")


def save_samples(path, x, manifest):
    header = {"format": "samples", "format_version": FORMAT_VERSION, "manifest": manifest}
    with atomic_write(path) as fh:
        fh.write(dumps(header).encode() + b"\n")
        write_tensor(fh, x)


def load_samples(path):
    with _open(path) as fh:
        header = _header(fh, "samples")
        x = read_tensor(fh)
    return x, header["manifest"]


def tensor_bytes(x):
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()

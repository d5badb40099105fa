"""Remote diffusion-prior adapter and reference server.

Wire format, both directions: a 4-byte little-endian unsigned length, a JSON
header of that length, then raw float32 payloads for every tensor the header
declares (in order, C-contiguous).

Handshake (server -> client on connect): header only,
    {"type": "handshake", "schedule_length": L,
     "alphas_cumprod": [...], "latent": {"channels": C}}

Request:
    {"op": "predict_noise", "t": int, "cond": [present keys...],
     "tensors": [{"name": ..., "shape": [...]}, ...]}
Response:
    {"status": "ok", "shape": [...]} + tensor, or
    {"status": "error", "message": ...}
"""

from __future__ import annotations

import json
import socket
import struct
import threading

import numpy as np

from .errors import GuidanceUnavailableError
from .priors import ConditionBundle, NoiseSchedule

_LEN = struct.Struct("<I")

_COND_TENSOR_FIELDS = ("reference_image", "depth", "bbox_mask",
                       "masked_image_latents")


def _send_message(sock, header: dict, tensors=()):
    blob = json.dumps(header).encode("utf-8")
    sock.sendall(_LEN.pack(len(blob)))
    sock.sendall(blob)
    for tensor in tensors:
        sock.sendall(np.ascontiguousarray(tensor, dtype=np.float32).tobytes())


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def _recv_message(sock):
    header = json.loads(_recv_exact(sock, _LEN.unpack(_recv_exact(sock, 4))[0]))
    tensors = {}
    for spec in header.get("tensors", []):
        count = int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"] else 1
        raw = _recv_exact(sock, 4 * count)
        tensors[spec["name"]] = np.frombuffer(raw, dtype=np.float32).reshape(
            spec["shape"]).astype(np.float64)
    return header, tensors


class RemotePrior:
    """DiffusionPrior backed by a remote service.

    One connection, serialized requests; `max_in_flight` bounds concurrent
    callers waiting on the wire (backpressure for parallel optimization
    workers). Identity latent codec: the remote service declares its latent
    geometry in the handshake and receives image-space tensors.
    """

    def __init__(self, host: str, port: int, *, timeout: float = 10.0,
                 retries: int = 2, max_in_flight: int = 4):
        self._timeout = timeout
        self._retries = retries
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._io_lock = threading.Lock()
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
            handshake, _ = _recv_message(self._sock)
        except OSError as exc:
            raise GuidanceUnavailableError(
                f"cannot reach prior service at {host}:{port}: {exc}") from exc
        if handshake.get("type") != "handshake":
            raise GuidanceUnavailableError("prior service sent no handshake")
        self.schedule = NoiseSchedule(
            np.asarray(handshake["alphas_cumprod"], dtype=np.float64))
        self.latent_channels = int(handshake["latent"]["channels"])

    def encode(self, image):
        return np.asarray(image, dtype=np.float64)

    def decode_gradient(self, grad_latent):
        return grad_latent

    def predict_noise(self, latents, t: int, cond: ConditionBundle):
        tensors = [("x", np.asarray(latents))]
        cond_keys = []
        for name in _COND_TENSOR_FIELDS:
            value = getattr(cond, name)
            if value is not None:
                tensors.append((name, np.asarray(value)))
                cond_keys.append(name)
        if cond.text_embedding is not None:
            cond_keys.append("text_embedding")
        header = {
            "op": "predict_noise", "t": int(t), "cond": cond_keys,
            "shapes": {"x": list(np.shape(latents))},
            "text": cond.text_embedding if isinstance(cond.text_embedding, str) else None,
            "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        }
        last_error = None
        with self._slots:
            for _ in range(self._retries + 1):
                try:
                    with self._io_lock:
                        _send_message(self._sock, header, [a for _, a in tensors])
                        reply, payload = _recv_message(self._sock)
                    if reply.get("status") != "ok":
                        raise GuidanceUnavailableError(
                            f"prior error: {reply.get('message', 'unknown')}")
                    return payload["eps"]
                except (OSError, ConnectionError, json.JSONDecodeError) as exc:
                    last_error = exc
        raise GuidanceUnavailableError(
            f"prior query failed after {self._retries + 1} attempts: {last_error}")

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


class PriorServer:
    """Serve any in-process DiffusionPrior over the wire protocol."""

    def __init__(self, prior, host: str = "127.0.0.1", port: int = 0):
        self._prior = prior
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(8)
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)

    def start(self) -> "PriorServer":
        self._thread.start()
        return self

    def _serve(self):
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            threading.Thread(target=self._handle, args=(conn,),
                             daemon=True).start()

    def _handle(self, conn):
        with conn:
            _send_message(conn, {
                "type": "handshake",
                "schedule_length": len(self._prior.schedule),
                "alphas_cumprod": self._prior.schedule.alphas_cumprod.tolist(),
                "latent": {"channels": self._prior.latent_channels},
            })
            while not self._stop.is_set():
                try:
                    header, tensors = _recv_message(conn)
                except (ConnectionError, OSError):
                    return
                try:
                    cond = ConditionBundle(
                        text_embedding=header.get("text"),
                        **{k: tensors[k] for k in _COND_TENSOR_FIELDS
                           if k in tensors})
                    eps = self._prior.predict_noise(
                        tensors["x"], int(header["t"]), cond)
                    _send_message(conn, {
                        "status": "ok", "shape": list(eps.shape),
                        "tensors": [{"name": "eps", "shape": list(eps.shape)}],
                    }, [eps])
                except Exception as exc:  # report, keep the connection alive
                    _send_message(conn, {"status": "error", "message": str(exc)})

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=2.0)
        self._listener.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

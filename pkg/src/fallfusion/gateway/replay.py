"""Sensor-node simulator: stream a recording's windows to the gateway."""

from __future__ import annotations

import logging
import socket
import time

import numpy as np

from ..signal.recording import Recording, read_recording
from .protocol import encode_frame
from .scoring import STRIDE_S, node_frames

log = logging.getLogger(__name__)


def connect_with_retry(host: str, port: int, retries: int = 5, backoff_s: float = 0.2,
                       timeout_s: float = 10.0) -> socket.socket:
    last = None
    for attempt in range(retries):
        try:
            return socket.create_connection((host, port), timeout=timeout_s)
        except OSError as e:
            last = e
            log.warning("connect to %s:%d failed (%s), attempt %d/%d", host, port, e, attempt + 1, retries)
            time.sleep(backoff_s * (2 ** attempt))
    raise ConnectionError(f"could not reach gateway at {host}:{port}: {last}")


def corrupt_bytes(data: bytes, rng) -> bytes:
    """Flip one random bit outside the leading magic (so the damage is in header fields, payload or CRC)."""
    buf = bytearray(data)
    i = int(rng.integers(2, len(buf)))
    buf[i] ^= 1 << int(rng.integers(8))
    return bytes(buf)


def node_replay(recording, target_addr: tuple, node_type: int, realtime: bool = False, node_id: int = 0,
                corrupt_frac: float = 0.0, drop_frac: float = 0.0, seed: int = 0, time_scale: float = 1.0,
                retries: int = 5) -> dict:
    """Send every window frame of ``recording`` (a Recording or a container directory).

    Realtime mode paces sends at the window stride (scaled by ``time_scale``). ``corrupt_frac`` and
    ``drop_frac`` inject per-frame bit damage or loss for robustness runs. Returns a send log.
    """
    rec = recording if isinstance(recording, Recording) else read_recording(recording)
    frames = node_frames(rec, node_type, node_id)
    rng = np.random.default_rng([seed, node_type, node_id])
    sock = connect_with_retry(*target_addr, retries=retries)
    sent, corrupted, dropped, send_times = 0, [], [], []
    start = time.perf_counter()
    try:
        for k, f in enumerate(frames):
            if realtime:
                delay = start + k * STRIDE_S * time_scale - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            data = encode_frame(f)
            u = rng.random()
            if u < drop_frac:
                dropped.append(f.seq)
                continue
            if u < drop_frac + corrupt_frac:
                data = corrupt_bytes(data, rng)
                corrupted.append(f.seq)
            try:
                sock.sendall(data)
            except OSError as e:
                raise ConnectionError(f"connection lost after {sent} frames: {e}") from e
            send_times.append(time.perf_counter())
            sent += 1
    finally:
        try:
            sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        sock.close()
    return {"frames": len(frames), "sent": sent, "corrupted": corrupted, "dropped": dropped,
            "send_times": send_times}

"""Asyncio gateway: concurrent node connections, window pairing, single inference lane, JSON-lines log."""

from __future__ import annotations

import asyncio
import json
import logging
import signal
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from ..nn.model import FallFusionNet
from ..signal.pipeline import PreprocessConfig
from .protocol import RADAR, VIBRATION, StreamDecoder, WireFrame
from .scoring import WindowScorer

log = logging.getLogger(__name__)


@dataclass
class GatewayConfig:
    host: str = "127.0.0.1"
    port: int = 7700
    pair_tolerance_s: float = 0.2
    fallback_timeout_s: float = 5.0
    read_deadline_s: float = 10.0
    threshold: float = 0.5


class _SeqTracker:
    """Counts sequence numbers never seen per node, up to the highest one received."""

    def __init__(self):
        self.seen: dict = {}

    def add(self, key, seq: int):
        self.seen.setdefault(key, set()).add(seq)

    def missing(self) -> int:
        return sum(max(s) + 1 - len(s) for s in self.seen.values() if s)

    def expected(self) -> int:
        return sum(max(s) + 1 for s in self.seen.values() if s)


class Gateway:
    def __init__(self, model: FallFusionNet, log_path, cfg: GatewayConfig | None = None,
                 pre_cfg: PreprocessConfig | None = None):
        self.cfg = cfg or GatewayConfig()
        self.scorer = WindowScorer(model, pre_cfg, self.cfg.threshold)
        self.log_path = Path(log_path)
        self.pending = {VIBRATION: [], RADAR: []}     # (frame, arrival time)
        self.seq = _SeqTracker()
        self.stats = {"frames_ok": 0, "frames_corrupt": 0, "frames_malformed": 0, "windows_scored": 0,
                      "windows_fused": 0, "windows_fallback": 0, "connections": 0, "errors": 0}
        self._server = None
        self._queue: asyncio.Queue | None = None
        self._tasks: list = []
        self._executor = ThreadPoolExecutor(max_workers=1)   # the single inference lane
        self._log_fh = None
        self._handlers: set = set()

    # ---------------------------------------------------------------- lifecycle

    async def start(self) -> int:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self._log_fh = open(self.log_path, "a", buffering=1)
        self._queue = asyncio.Queue()
        self._server = await asyncio.start_server(self._handle, self.cfg.host, self.cfg.port)
        self._tasks = [asyncio.create_task(self._consume()), asyncio.create_task(self._expire_loop())]
        port = self._server.sockets[0].getsockname()[1]
        log.info("gateway listening on %s:%d", self.cfg.host, port)
        return port

    async def stop(self):
        """Stop accepting, finish open connections, score leftovers in fallback mode, drain the queue."""
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self._handlers:
            await asyncio.gather(*self._handlers, return_exceptions=True)
        self._expire(force=True)
        await self._queue.join()
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._executor.shutdown(wait=True)
        self._log_fh.close()

    def summary(self) -> dict:
        return {**self.stats, "frames_missing": self.seq.missing(), "frames_expected": self.seq.expected()}

    # ---------------------------------------------------------------- network side

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        task = asyncio.current_task()
        self._handlers.add(task)
        self.stats["connections"] += 1
        dec = StreamDecoder()
        try:
            while True:
                try:
                    data = await asyncio.wait_for(reader.read(65536), self.cfg.read_deadline_s)
                except asyncio.TimeoutError:
                    log.warning("read deadline expired; closing connection")
                    break
                frames = dec.feed(data, eof=not data)
                for f in frames:
                    self._accept(f)
                if not data:
                    break
        except Exception as e:        # never let one connection take the service down
            self.stats["errors"] += 1
            log.exception("connection handler failed: %s", e)
        finally:
            self.stats["frames_corrupt"] += dec.corrupt
            self.stats["frames_malformed"] += dec.malformed
            writer.close()
            self._handlers.discard(task)

    def _accept(self, f: WireFrame):
        self.stats["frames_ok"] += 1
        self.seq.add((f.node_type, f.node_id), f.seq)
        other = RADAR if f.node_type == VIBRATION else VIBRATION
        tol_us = self.cfg.pair_tolerance_s * 1e6
        cands = [(abs(g.t0_us - f.t0_us), k) for k, (g, _) in enumerate(self.pending[other])
                 if abs(g.t0_us - f.t0_us) <= tol_us]
        now = time.perf_counter()
        if cands:
            _, k = min(cands)
            g, _ = self.pending[other].pop(k)
            vib, rad = (f, g) if f.node_type == VIBRATION else (g, f)
            self._queue.put_nowait((vib, rad, now))
        else:
            self.pending[f.node_type].append((f, now))

    def _expire(self, force: bool = False):
        now = time.perf_counter()
        for kind in (VIBRATION, RADAR):
            keep = []
            for f, t in self.pending[kind]:
                if force or now - t >= self.cfg.fallback_timeout_s:
                    log.info("unpaired frame t0=%d node=%d after %.1f s; fallback", f.t0_us, kind, now - t)
                    self._queue.put_nowait((f, None, now) if kind == VIBRATION else (None, f, now))
                else:
                    keep.append((f, t))
            self.pending[kind] = keep

    async def _expire_loop(self):
        while True:
            await asyncio.sleep(min(0.1, self.cfg.fallback_timeout_s / 4))
            self._expire()

    # ---------------------------------------------------------------- inference lane

    def _score(self, vib: WireFrame | None, rad: WireFrame | None, started: float):
        t0 = vib.t0_us if vib is not None else rad.t0_us
        return self.scorer.score(None if vib is None else vib.payload, None if rad is None else rad.payload,
                                 t0, started)

    async def _consume(self):
        loop = asyncio.get_running_loop()
        while True:
            vib, rad, started = await self._queue.get()
            try:
                det = await loop.run_in_executor(self._executor, self._score, vib, rad, started)
                self._log_fh.write(json.dumps(det.to_dict()) + "\n")
                self.stats["windows_scored"] += 1
                self.stats["windows_fused" if vib is not None and rad is not None else "windows_fallback"] += 1
            except Exception as e:
                self.stats["errors"] += 1
                log.exception("scoring failed: %s", e)
            finally:
                self._queue.task_done()


class GatewayThread:
    """Runs a gateway on a private event loop in a background thread (tests, replay tooling)."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self.loop = asyncio.new_event_loop()
        self.port = None
        self._ready = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        asyncio.set_event_loop(self.loop)
        self.port = self.loop.run_until_complete(self.gateway.start())
        self._ready.set()
        self.loop.run_forever()

    def __enter__(self):
        self._thread.start()
        self._ready.wait(10)
        return self

    def stop(self):
        fut = asyncio.run_coroutine_threadsafe(self.gateway.stop(), self.loop)
        fut.result(60)
        self.loop.call_soon_threadsafe(self.loop.stop)
        self._thread.join(10)

    def __exit__(self, *exc):
        self.stop()


def read_detection_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def serve(model: FallFusionNet, log_path, cfg: GatewayConfig | None = None, pre_cfg: PreprocessConfig | None = None,
          stats_path=None):
    """Blocking entry point; runs until interrupted, then drains and writes a stats file."""
    gw = Gateway(model, log_path, cfg, pre_cfg)

    async def main():
        await gw.start()
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        await stop.wait()
        await gw.stop()

    asyncio.run(main())
    if stats_path is not None:
        Path(stats_path).write_text(json.dumps(gw.summary(), indent=2) + "\n")
    return gw.summary()

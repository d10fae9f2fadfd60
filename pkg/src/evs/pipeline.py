"""Keyframe scheduling, propagation and refinement over a frame stream.

Every ``S``-th frame is segmented; frames in between are obtained by warping
the previous output along estimated flow and, optionally, blending refiner
output into regions where the flow is inconsistent.
"""

from __future__ import annotations

import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .disflow import DISOpticalFlow
from .exceptions import EVSError, PipelineError, ValidationError
from .iam import InconsistencyAttention
from .imagery import (
    InconsistencyMask,
    ProbabilityMap,
    resample_nearest,
    resize_frame,
    resize_nearest,
)
from .propagation import TileGrid, mapping_at, remap_features, remap_probabilities
from .segmentation import DOWNSCALE_FACTORS, SegmenterOutput


@dataclass(frozen=True)
class OperatingPoint:
    name: str
    D: float
    S: int
    W: bool
    R: bool

    def __post_init__(self):
        if isinstance(self.S, bool) or not isinstance(self.S, (int, np.integer)) or self.S < 1:
            raise ValidationError(f"{self.name}: S must be an integer >= 1, got {self.S!r}")
        if self.D not in DOWNSCALE_FACTORS:
            raise ValidationError(f"{self.name}: D must be one of {DOWNSCALE_FACTORS}, got {self.D!r}")
        if self.R and not self.W:
            raise ValidationError(f"{self.name}: refinement requires warping")

    def to_dict(self):
        return {"name": self.name, "D": self.D, "S": int(self.S), "W": self.W, "R": self.R}

    def is_keyframe(self, position, anchor=0):
        return position == 0 or (position - anchor) % self.S == 0


_TABLE = [
    ("EVS-14", 0.5, 17, True, False),
    ("EVS-13", 0.5, 10, False, False),
    ("EVS-12", 0.5, 10, True, False),
    ("EVS-11", 1.0, 10, False, False),
    ("EVS-10", 1.0, 10, True, False),
    ("EVS-09", 0.5, 5, False, False),
    ("EVS-08", 1.0, 5, False, False),
    ("EVS-07", 1.0, 5, True, False),
    ("EVS-06", 1.0, 5, True, True),
    ("EVS-05", 1.0, 3, True, False),
    ("EVS-04", 1.0, 3, True, True),
    ("EVS-03", 1.0, 2, True, False),
    ("EVS-02", 1.0, 2, True, True),
    ("EVS-01", 1.0, 1, True, True),
]


def builtin_operating_points():
    return [OperatingPoint(*row) for row in _TABLE]


def operating_point(name):
    """Look up a builtin point by name (case-insensitive, ``EVS-6`` also accepted)."""
    if isinstance(name, OperatingPoint):
        return name
    points = {p.name: p for p in builtin_operating_points()}
    key = str(name).strip().upper()
    if key.startswith("EVS-") and key[4:].isdigit():
        key = f"EVS-{int(key[4:]):02d}"
    if key not in points:
        raise ValidationError(
            f"unknown operating point {name!r}; valid names: {', '.join(sorted(points))}")
    return points[key]


@dataclass
class PipelineState:
    """What the warp worker carries from one frame to the next."""

    last_probs: ProbabilityMap
    last_features: object
    last_frame: object
    frames_since_keyframe: int = 0

    @property
    def last_labels(self):
        return self.last_probs.argmax()


@dataclass
class FrameResult:
    index: int
    position: int
    keyframe: bool
    hops: int
    labels: object                   # LabelMap at output resolution
    probabilities: ProbabilityMap    # prediction resolution
    features: object = None
    mask: InconsistencyMask | None = None
    raw_mask: InconsistencyMask | None = None
    timings: dict = field(default_factory=dict)


def _ms(t0):
    return (time.perf_counter_ns() - t0) / 1e6


class EVSPipeline(BaseEstimator):
    """Run an operating point over a frame stream.

    Parameters
    ----------
    segmenter : SegmenterBackend
    refiner : RefinerBackend or None
        Required when the operating point enables refinement.
    op : OperatingPoint or str
    flow : DISOpticalFlow or None
        Defaults to the fast preset.
    iam : InconsistencyAttention or None
    flow_size : (width, height)
        Frames are area-resized to this size before flow estimation; the flow
        is rescaled to each consumer's resolution.
    anchor : int
        Keyframe phase: position ``p`` is a keyframe when ``p == 0`` or
        ``(p - anchor) % S == 0``.
    tiles : TileGrid, (rows, cols) or None
    n_workers : int
        1 runs everything inline. Otherwise one segmentation worker plus
        ``n_workers - 1`` flow/warp workers. Outputs do not depend on it.
    compute_mask : bool
        Also compute the inconsistency mask on warped frames when refinement
        is off (for statistics).
    """

    def __init__(self, segmenter, refiner=None, op="EVS-06", flow=None, iam=None,
                 flow_size=(512, 256), anchor=0, n_workers=1, tiles=None,
                 output_size=None, compute_mask=False, lookahead=None):
        self.segmenter = segmenter
        self.refiner = refiner
        self.op = op
        self.flow = flow
        self.iam = iam
        self.flow_size = flow_size
        self.anchor = anchor
        self.n_workers = n_workers
        self.tiles = tiles
        self.output_size = output_size
        self.compute_mask = compute_mask
        self.lookahead = lookahead

    # -- configuration ---------------------------------------------------

    def _setup(self):
        op = operating_point(self.op)
        if op.R and self.refiner is None:
            raise ValidationError(f"{op.name} enables refinement but no refiner was given")
        if int(self.n_workers) < 1:
            raise ValidationError(f"n_workers must be >= 1, got {self.n_workers}")
        self._op = op
        self._flow = self.flow if self.flow is not None else DISOpticalFlow()
        self._iam = self.iam if self.iam is not None else InconsistencyAttention()
        self._jobs = int(self.n_workers)
        self._tiles = self.tiles
        if self.tiles is not None and not isinstance(self.tiles, TileGrid):
            self._tiles = TileGrid(*self.tiles)
        return op

    def _flow_frame(self, frame):
        w, h = self.flow_size
        return resize_frame(frame, w, h)

    def _output_labels(self, probs, frame):
        w, h = self.output_size or (frame.width, frame.height)
        return resize_nearest(probs.argmax(), w, h)

    # -- stages ----------------------------------------------------------

    def _segment(self, frame):
        t0 = time.perf_counter_ns()
        try:
            out = self.segmenter.segment(frame, self._op.D)
        except EVSError as exc:
            raise PipelineError(str(exc), frame.frame_index) from exc
        if not isinstance(out, SegmenterOutput):
            raise PipelineError("segmenter did not return a SegmenterOutput", frame.frame_index)
        return out, {"segment": _ms(t0)}

    def _flows(self, prev, cur):
        timings = {}
        t0 = time.perf_counter_ns()
        a, b = self._flow_frame(prev), self._flow_frame(cur)
        fwd = self._flow.estimate(a, b)
        timings["flow_fwd"] = _ms(t0)
        bwd = None
        if self._op.R or self.compute_mask:
            t0 = time.perf_counter_ns()
            bwd = self._flow.estimate(b, a)
            timings["flow_bwd"] = _ms(t0)
        return fwd, bwd, timings

    def _warp(self, state, frame, flows):
        fwd, bwd, timings = flows
        timings = dict(timings)
        probs = state.last_probs
        feats = state.last_features
        t0 = time.perf_counter_ns()
        warped = remap_probabilities(probs, mapping_at(fwd, probs.width, probs.height),
                                     self._tiles, self._jobs)
        wfeats = remap_features(feats, mapping_at(fwd, feats.width, feats.height),
                                self._tiles, self._jobs)
        timings["warp"] = _ms(t0)

        raw = smooth = None
        final = warped
        if bwd is not None:
            t0 = time.perf_counter_ns()
            raw, smooth = self._iam.mask(warped.argmax(), fwd, bwd, self._tiles, self._jobs)
            timings["iam"] = _ms(t0)
        if self._op.R:
            t0 = time.perf_counter_ns()
            try:
                refined = self.refiner.refine(frame, warped, wfeats)
            except EVSError as exc:
                raise PipelineError(str(exc), frame.frame_index) from exc
            timings["refine"] = _ms(t0)
            t0 = time.perf_counter_ns()
            refined = _match_size(refined, warped.width, warped.height)
            m = smooth
            if (m.width, m.height) != (warped.width, warped.height):
                m = InconsistencyMask(resample_nearest(m.weights, warped.width, warped.height))
            final = self._iam.blend(refined, warped, m)
            timings["blend"] = _ms(t0)
        return final, wfeats, raw, smooth, timings

    # -- driving ---------------------------------------------------------

    def process(self, frames):
        """Yield a FrameResult per input frame, in input order."""
        op = self._setup()
        if self._jobs == 1:
            yield from self._process_inline(frames, op)
        else:
            yield from self._process_concurrent(frames, op)

    def _keyframe_result(self, pos, frame, seg):
        out, timings = seg
        return FrameResult(frame.frame_index, pos, True, 0, self._output_labels(out.probabilities, frame),
                           out.probabilities, out.features, timings=timings)

    def _propagated_result(self, pos, frame, state, flows):
        hops = state.frames_since_keyframe + 1
        if not self._op.W:
            return FrameResult(frame.frame_index, pos, False, hops,
                               self._output_labels(state.last_probs, frame), state.last_probs,
                               state.last_features, timings={})
        probs, feats, raw, smooth, timings = self._warp(state, frame, flows)
        return FrameResult(frame.frame_index, pos, False, hops, self._output_labels(probs, frame),
                           probs, feats, smooth, raw, timings)

    @staticmethod
    def _advance(state, result, frame):
        hops = 0 if result.keyframe else state.frames_since_keyframe + 1
        return PipelineState(result.probabilities, result.features, frame, hops)

    def _process_inline(self, frames, op):
        state = None
        prev = None
        for pos, frame in enumerate(frames):
            try:
                if op.is_keyframe(pos, self.anchor):
                    result = self._keyframe_result(pos, frame, self._segment(frame))
                else:
                    flows = self._flows(prev, frame) if op.W else None
                    result = self._propagated_result(pos, frame, state, flows)
            except PipelineError:
                raise
            except EVSError as exc:
                raise PipelineError(str(exc), frame.frame_index) from exc
            state = self._advance(state, result, frame)
            prev = frame
            yield result

    def _process_concurrent(self, frames, op):
        # Segmentation and flow estimation start as soon as frames arrive. A
        # warp step is queued on the flow pool only once the output it extends
        # exists, so it never blocks flow work that could overlap segmentation.
        window = self.lookahead or 2 * op.S + 2
        seg_pool = ThreadPoolExecutor(1, thread_name_prefix="evs-seg")
        flow_pool = ThreadPoolExecutor(max(1, self._jobs - 1), thread_name_prefix="evs-flow")
        pending = deque()

        def keyframe_step(pos, frame):
            result = self._keyframe_result(pos, frame, self._segment(frame))
            return result, self._advance(None, result, frame)

        def warp_step(pos, frame, before, flow_future):
            _, state = before.result()
            flows = flow_future.result() if flow_future is not None else None
            try:
                result = self._propagated_result(pos, frame, state, flows)
            except PipelineError:
                raise
            except EVSError as exc:
                raise PipelineError(str(exc), frame.frame_index) from exc
            return result, self._advance(state, result, frame)

        def chained(before, pos, frame, flow_future):
            slot = Future()

            def launch(done):
                if done.exception() is not None:
                    slot.set_exception(done.exception())
                    return
                fut = flow_pool.submit(warp_step, pos, frame, done, flow_future)
                fut.add_done_callback(lambda f: _settle(slot, f))

            before.add_done_callback(launch)
            return slot

        last = prev = None
        try:
            for pos, frame in enumerate(frames):
                if op.is_keyframe(pos, self.anchor):
                    last = seg_pool.submit(keyframe_step, pos, frame)
                else:
                    ff = flow_pool.submit(self._flows, prev, frame) if op.W else None
                    last = chained(last, pos, frame, ff)
                pending.append(last)
                prev = frame
                while len(pending) > window:
                    yield pending.popleft().result()[0]
            while pending:
                yield pending.popleft().result()[0]
        finally:
            # drain in-flight frames before tearing the workers down
            for fut in pending:
                fut.exception()
            seg_pool.shutdown(wait=True)
            flow_pool.shutdown(wait=True)

    def predict(self, frames):
        """Output label maps for every frame."""
        return [r.labels for r in self.process(frames)]


def _settle(slot, fut):
    exc = fut.exception()
    if exc is not None:
        slot.set_exception(exc)
    else:
        slot.set_result(fut.result())


def _match_size(probs, width, height):
    if (probs.width, probs.height) == (width, height):
        return probs
    return ProbabilityMap(resample_nearest(probs.values, width, height), validate=False)


# --------------------------------------------------------------------------
# schedule simulation

@dataclass(frozen=True)
class PlanTask:
    kind: str        # "segment", "flow_fwd" or "flow_bwd"
    frame: int
    worker: str      # "seg" or "flow"
    start: float
    end: float
    window: int      # keyframe position whose segmentation window the task falls in
    overlapped: bool


@dataclass
class ExecutionPlan:
    op: OperatingPoint
    tasks: list
    emit_times: list
    makespan: float
    sequential: float
    overlapped_per_window: dict

    @property
    def overlap_benefit(self):
        return self.sequential - self.makespan

    @property
    def overlapped(self):
        return sum(self.overlapped_per_window.values())

    def order(self):
        """Dispatch order: ``(kind, frame)`` by start time, ties by frame."""
        return [(t.kind, t.frame) for t in sorted(self.tasks, key=lambda t: (t.start, t.frame))]

    def to_dict(self):
        return {
            "op": self.op.to_dict(),
            "makespan_ms": self.makespan,
            "sequential_ms": self.sequential,
            "overlap_benefit_ms": self.overlap_benefit,
            "overlapped_per_window": {str(k): v for k, v in self.overlapped_per_window.items()},
            "tasks": [{"kind": t.kind, "frame": t.frame, "worker": t.worker, "start_ms": t.start,
                       "end_ms": t.end, "overlapped": t.overlapped} for t in self.tasks],
            "emit_ms": self.emit_times,
        }


def schedule_concurrency(op, segmenter_cost, flow_cost, n_frames=None, mode="recorded",
                         frame_interval=0.0, anchor=0):
    """Simulate the two-worker schedule for ``n_frames`` frames (default ``2 * S``).

    Only the flow work the outputs need is scheduled: a forward flow per warped
    frame, plus a backward flow when refinement is on. In ``recorded`` mode all
    frames exist up front, so flow for frames after a keyframe runs while that
    keyframe is being segmented; in ``live`` mode frame ``t`` arrives at
    ``t * frame_interval``. Warp and blend costs are not modelled. Outputs are
    emitted in frame order.
    """
    op = operating_point(op)
    if segmenter_cost < 0 or flow_cost < 0:
        raise ValidationError("costs must be nonnegative")
    if mode not in ("recorded", "live"):
        raise ValidationError(f"mode must be 'recorded' or 'live', got {mode!r}")
    n = int(n_frames) if n_frames is not None else 2 * op.S
    arrival = [0.0 if mode == "recorded" else t * float(frame_interval) for t in range(n)]

    seg_free = flow_free = 0.0
    tasks, ready = [], []
    seg_spans = {}
    window = 0
    for t in range(n):
        if op.is_keyframe(t, anchor):
            window = t
            start = max(seg_free, arrival[t])
            seg_free = start + segmenter_cost
            seg_spans[t] = (start, seg_free)
            tasks.append(PlanTask("segment", t, "seg", start, seg_free, t, False))
            ready.append(seg_free)
            continue
        done = arrival[t]
        if op.W:
            kinds = ["flow_fwd", "flow_bwd"] if op.R else ["flow_fwd"]
            for kind in kinds:
                start = max(flow_free, arrival[t])
                flow_free = start + flow_cost
                tasks.append(PlanTask(kind, t, "flow", start, flow_free, window, False))
                done = flow_free
        ready.append(done)

    overlapped = {k: 0 for k in seg_spans}
    final = []
    for task in tasks:
        if task.worker == "flow" and task.end > task.start:
            s0, s1 = seg_spans[task.window]
            hit = task.start < s1 and task.end > s0
            if hit:
                overlapped[task.window] += 1
            task = PlanTask(task.kind, task.frame, task.worker, task.start, task.end, task.window, hit)
        final.append(task)

    emit, prev = [], 0.0
    for t in range(n):
        # a warped frame also needs the previous output
        prev = max(ready[t], prev)
        emit.append(prev)
    sequential = sum(t.end - t.start for t in final)
    makespan = max([t.end for t in final] + emit + [0.0])
    return ExecutionPlan(op, final, emit, makespan, sequential, overlapped)

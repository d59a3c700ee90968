"""Binary checkpoints for learner state with bit-exact round-trips.

Layout: magic, version, a little-endian u32 JSON length, the JSON metadata
(method, hyperparameters, seed, learned sets, stream counters, section
directory), then the raw sections back to back.  Arrays are stored as
little-endian float64 bytes, masks in their length-prefixed packed form.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from . import engine as eng
from . import rehearsal
from .masking import BitMask
from .net import ParamStore
from .rng import StreamSet

MAGIC = b"SUBNETCK"
VERSION = 1


def _values_bytes(values: np.ndarray) -> bytes:
    return values.astype("<f8").tobytes()


def _values_from(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


def _masks_bytes(masks: dict[int, BitMask]) -> bytes:
    out = [struct.pack("<Q", len(masks))]
    for t in sorted(masks):
        m = masks[t].to_bytes()
        out.append(struct.pack("<qQ", t, len(m)))
        out.append(m)
    return b"".join(out)


def _masks_from(data: bytes) -> dict[int, BitMask]:
    (count,) = struct.unpack_from("<Q", data, 0)
    pos = 8
    masks = {}
    for _ in range(count):
        t, n = struct.unpack_from("<qQ", data, pos)
        pos += 16
        masks[t] = BitMask.from_bytes(data[pos : pos + n])
        pos += n
    return masks


def _stores_bytes(stores: dict[int, ParamStore]) -> bytes:
    out = [struct.pack("<Q", len(stores))]
    for t in sorted(stores):
        blob = _values_bytes(stores[t].values)
        out.append(struct.pack("<qQ", t, len(blob)))
        out.append(blob)
    return b"".join(out)


def save_checkpoint(path, learner: eng.BaseLearner) -> None:
    sections: list[tuple[str, bytes]] = []
    if isinstance(learner, eng.MaskedLearner):
        sections.append(("params", _values_bytes(learner.params.values)))
        sections.append(("masks", _masks_bytes(learner.registry.masks)))
        sections.append(("ledger", _masks_bytes(learner.ledger.trained_by)))
        sections.append(("buffers", rehearsal.buffers_to_bytes(learner.buffers)))
    elif isinstance(learner, eng.IndependentLearner):
        sections.append(("stores", _stores_bytes(learner.stores)))
    else:
        sections.append(("params", _values_bytes(learner.params.values)))
        if isinstance(learner, eng.ReplayLearner):
            sections.append(("buffers", rehearsal.buffers_to_bytes(learner.buffers)))
    hp = asdict(learner.hp)
    hp["hidden"] = list(hp["hidden"])
    meta = {
        "version": VERSION,
        "method": learner.method,
        "hyperparams": hp,
        "master_seed": learner.master_seed,
        "task_count": learner.task_count,
        "input_dim": learner.arch.input_dim,
        "classes_per_task": learner.arch.classes_per_task,
        "omega": list(learner.omega),
        "ever_learned": sorted(learner.ever_learned),
        "counters": {f"{t}:{p}": c for (t, p), c in sorted(learner.streams.counters().items())},
        "retrain_events": [asdict(e) for e in learner.retrain_events],
        "sections": [[name, len(blob)] for name, blob in sections],
    }
    head = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(head)) + head)
        for _, blob in sections:
            fh.write(blob)


def load_checkpoint(path) -> eng.BaseLearner:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint file")
    version, head_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(data[16 : 16 + head_len])
    pos = 16 + head_len
    sections = {}
    for name, length in meta["sections"]:
        sections[name] = data[pos : pos + length]
        pos += length

    hp = eng.Hyperparams(**{**meta["hyperparams"],
                            "hidden": tuple(meta["hyperparams"]["hidden"])})
    from .scenario import SuiteSpec

    spec = SuiteSpec(meta["input_dim"], meta["classes_per_task"], meta["task_count"])
    learner = eng.make_learner(meta["method"], spec, hp, meta["master_seed"])
    learner.omega = list(meta["omega"])
    learner.ever_learned = set(meta["ever_learned"])
    counters = {}
    for key, c in meta["counters"].items():
        t, p = key.split(":")
        counters[(int(t), p)] = c
    learner.streams = StreamSet(meta["master_seed"], counters)
    learner.retrain_events = [eng.RetrainEvent(**e) for e in meta["retrain_events"]]
    if isinstance(learner, eng.MaskedLearner):
        learner.params.values[:] = _values_from(sections["params"])
        learner.registry.masks = _masks_from(sections["masks"])
        learner.ledger.trained_by = _masks_from(sections["ledger"])
        learner.buffers = rehearsal.buffers_from_bytes(sections["buffers"])
        learner.union_bits = learner.registry.union().bits
    elif isinstance(learner, eng.IndependentLearner):
        (count,) = struct.unpack_from("<Q", sections["stores"], 0)
        off = 8
        for _ in range(count):
            t, n = struct.unpack_from("<qQ", sections["stores"], off)
            off += 16
            store = ParamStore(learner.arch, _values_from(sections["stores"][off : off + n]))
            learner.stores[t] = store
            off += n
    else:
        learner.params.values[:] = _values_from(sections["params"])
        if isinstance(learner, eng.ReplayLearner):
            learner.buffers = rehearsal.buffers_from_bytes(sections["buffers"])
    return learner

"""Strict JSON model configs, binary checkpoints, and JSONL metrics files.

The config document has three sections: `model` (the graph template),
`family` (encoder and flow hyperparameters) and `train` (the staged recipe).
Parsing is strict: any key outside the schema is rejected with its path, so
a typo in a distribution name fails loudly instead of silently defaulting.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .family import DualFamily
from .hbm import DIST_KINDS, DistSpec, GraphTemplate, Param, Plate, RVSpec
from .training import Stage, TrainConfig

FORMAT_VERSION = 1
_MAGIC = b"ADVC"

LINK_KINDS = ("identity", "reshape", "exp", "softmax_centered",
              "sqrt_softmax_centered")


@dataclass(frozen=True)
class FamilyConfig:
    """Mirrors the DualFamily constructor, one field per hyperparameter."""

    d_enc: int = 8
    n_heads: int = 2
    n_inducing: int = 8
    maf_hidden: tuple = (32, 32, 32)
    n_maf: int = 1
    triangular_affine: bool = True
    seed: int = 0


@dataclass
class ModelConfig:
    template: GraphTemplate
    family: FamilyConfig
    train: TrainConfig


# -- strict parsing ----------------------------------------------------------

def _fail(path, msg):
    raise ConfigError(f"{path}: {msg}")


def _obj(v, path):
    if not isinstance(v, dict):
        _fail(path, "expected an object")
    return v


def _keys(d, path, required, optional=()):
    for k in d:
        if k not in required and k not in optional:
            _fail(f"{path}.{k}", "unknown key")
    for k in required:
        if k not in d:
            _fail(path, f"missing key '{k}'")


def _str(v, path):
    if not isinstance(v, str):
        _fail(path, "expected a string")
    return v


def _int(v, path):
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(path, "expected an integer")
    return v


def _num(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(path, "expected a number")
    return float(v)


def _bool(v, path):
    if not isinstance(v, bool):
        _fail(path, "expected true or false")
    return v


def _list(v, path):
    if not isinstance(v, list):
        _fail(path, "expected a list")
    return v


def _parse_param(v, path):
    d = _obj(v, path)
    _keys(d, path, required=(), optional=("value", "const", "parent"))
    if len(d) != 1:
        _fail(path, "needs exactly one of value / const / parent")
    if "const" in d:
        return Param(const=_str(d["const"], f"{path}.const"))
    if "parent" in d:
        return Param(parent=_str(d["parent"], f"{path}.parent"))
    raw = d["value"]
    if isinstance(raw, list):
        return Param(value=tuple(_num(x, f"{path}.value[{i}]")
                                 for i, x in enumerate(raw)))
    return Param(value=_num(raw, f"{path}.value"))


def _parse_dist(v, path):
    d = _obj(v, path)
    _keys(d, path, required=("kind", "params"), optional=("component",))
    kind = _str(d["kind"], f"{path}.kind")
    if kind not in DIST_KINDS:
        _fail(f"{path}.kind", f"unknown distribution '{kind}'"
              f" (expected one of {sorted(DIST_KINDS)})")
    params = {}
    for name, pv in _obj(d["params"], f"{path}.params").items():
        params[name] = _parse_param(pv, f"{path}.params.{name}")
    component = None
    if "component" in d:
        component = _parse_dist(d["component"], f"{path}.component")
    return DistSpec(kind, params, component=component)


def _parse_rv(v, path):
    d = _obj(v, path)
    _keys(d, path, required=("name", "dist", "plates", "event_shape"),
          optional=("link", "observed"))
    link = _str(d.get("link", "identity"), f"{path}.link")
    if link not in LINK_KINDS:
        _fail(f"{path}.link", f"unknown link '{link}'"
              f" (expected one of {sorted(LINK_KINDS)})")
    return RVSpec(
        name=_str(d["name"], f"{path}.name"),
        dist=_parse_dist(d["dist"], f"{path}.dist"),
        plates=tuple(_str(p, f"{path}.plates[{i}]")
                     for i, p in enumerate(_list(d["plates"], f"{path}.plates"))),
        event_shape=tuple(_int(n, f"{path}.event_shape[{i}]")
                          for i, n in enumerate(_list(d["event_shape"],
                                                      f"{path}.event_shape"))),
        link=link,
        observed=_bool(d.get("observed", False), f"{path}.observed"))


def _parse_template(v, path):
    d = _obj(v, path)
    _keys(d, path, required=("name", "plates", "constants", "rvs"))
    plates = []
    for i, pv in enumerate(_list(d["plates"], f"{path}.plates")):
        pd = _obj(pv, f"{path}.plates[{i}]")
        _keys(pd, f"{path}.plates[{i}]",
              required=("name", "rank", "cardinality"))
        plates.append(Plate(_str(pd["name"], f"{path}.plates[{i}].name"),
                            _int(pd["rank"], f"{path}.plates[{i}].rank"),
                            _int(pd["cardinality"],
                                 f"{path}.plates[{i}].cardinality")))
    constants = {k: _num(cv, f"{path}.constants.{k}")
                 for k, cv in _obj(d["constants"], f"{path}.constants").items()}
    rvs = [_parse_rv(rv, f"{path}.rvs[{i}]")
           for i, rv in enumerate(_list(d["rvs"], f"{path}.rvs"))]
    return GraphTemplate(name=_str(d["name"], f"{path}.name"),
                         plates=plates, constants=constants, rvs=rvs)


def _parse_family(v, path):
    d = _obj(v, path)
    _keys(d, path, required=(),
          optional=("d_enc", "n_heads", "n_inducing", "maf_hidden", "n_maf",
                    "triangular_affine", "seed"))
    kw = {}
    for k in ("d_enc", "n_heads", "n_inducing", "n_maf", "seed"):
        if k in d:
            kw[k] = _int(d[k], f"{path}.{k}")
    if "maf_hidden" in d:
        kw["maf_hidden"] = tuple(
            _int(n, f"{path}.maf_hidden[{i}]")
            for i, n in enumerate(_list(d["maf_hidden"], f"{path}.maf_hidden")))
    if "triangular_affine" in d:
        kw["triangular_affine"] = _bool(d["triangular_affine"],
                                        f"{path}.triangular_affine")
    return FamilyConfig(**kw)


def parse_train_section(v, path="train"):
    d = _obj(v, path)
    _keys(d, path,
          required=("dataset_size", "minibatch", "k_draws", "seed", "stages"))
    stages = []
    for i, sv in enumerate(_list(d["stages"], f"{path}.stages")):
        sp = f"{path}.stages[{i}]"
        sd = _obj(sv, sp)
        _keys(sd, sp, required=("loss", "epochs"), optional=("lr", "mask"))
        try:
            stages.append(Stage(loss=_str(sd["loss"], f"{sp}.loss"),
                                epochs=_int(sd["epochs"], f"{sp}.epochs"),
                                lr=_num(sd.get("lr", 1e-3), f"{sp}.lr"),
                                mask=_str(sd.get("mask", "all"), f"{sp}.mask")))
        except ConfigError as e:
            _fail(sp, str(e))
    try:
        return TrainConfig(dataset_size=_int(d["dataset_size"],
                                             f"{path}.dataset_size"),
                           minibatch=_int(d["minibatch"], f"{path}.minibatch"),
                           k_draws=_int(d["k_draws"], f"{path}.k_draws"),
                           seed=_int(d["seed"], f"{path}.seed"),
                           stages=tuple(stages))
    except ConfigError as e:
        _fail(path, str(e))


def parse_config(text: str) -> ModelConfig:
    """Parse and schema-check a config document; first violation wins."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    d = _obj(doc, "config")
    _keys(d, "config", required=("model", "family", "train"))
    return ModelConfig(template=_parse_template(d["model"], "model"),
                       family=_parse_family(d["family"], "family"),
                       train=parse_train_section(d["train"]))


# -- serialization -----------------------------------------------------------

def _param_dict(p: Param):
    if p.const is not None:
        return {"const": p.const}
    if p.parent is not None:
        return {"parent": p.parent}
    v = p.value
    return {"value": list(v) if isinstance(v, tuple) else v}


def _dist_dict(s: DistSpec):
    d = {"kind": s.kind,
         "params": {k: _param_dict(v) for k, v in s.params.items()}}
    if s.component is not None:
        d["component"] = _dist_dict(s.component)
    return d


def config_to_dict(cfg: ModelConfig) -> dict:
    f = cfg.family
    t = cfg.train
    return {
        "model": {
            "name": cfg.template.name,
            "plates": [{"name": p.name, "rank": p.rank,
                        "cardinality": p.cardinality}
                       for p in cfg.template.plates],
            "constants": dict(cfg.template.constants),
            "rvs": [{"name": rv.name, "dist": _dist_dict(rv.dist),
                     "plates": list(rv.plates),
                     "event_shape": list(rv.event_shape),
                     "link": rv.link, "observed": rv.observed}
                    for rv in cfg.template.rvs],
        },
        "family": {"d_enc": f.d_enc, "n_heads": f.n_heads,
                   "n_inducing": f.n_inducing,
                   "maf_hidden": list(f.maf_hidden), "n_maf": f.n_maf,
                   "triangular_affine": f.triangular_affine, "seed": f.seed},
        "train": {"dataset_size": t.dataset_size, "minibatch": t.minibatch,
                  "k_draws": t.k_draws, "seed": t.seed,
                  "stages": [{"loss": s.loss, "epochs": s.epochs,
                              "lr": s.lr, "mask": s.mask}
                             for s in t.stages]},
    }


def serialize_config(cfg: ModelConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2) + "\n"


def config_digest(cfg: ModelConfig) -> bytes:
    """sha256 over the canonical (sorted, compact) rendering."""
    canon = json.dumps(config_to_dict(cfg), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).digest()


def build_family(cfg: ModelConfig, desc) -> DualFamily:
    f = cfg.family
    return DualFamily(desc, d_enc=f.d_enc, n_heads=f.n_heads,
                      n_inducing=f.n_inducing, maf_hidden=f.maf_hidden,
                      n_maf=f.n_maf, triangular_affine=f.triangular_affine,
                      seed=f.seed)


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    digest: bytes
    params: dict            # name -> float64 array, insertion-ordered
    rng_state: dict | None = None
    opt_state: dict | None = None   # {"t": int, "m": {...}, "v": {...}}


def _pack_array(out, name, arr):
    raw = name.encode()
    out.append(struct.pack("<H", len(raw)))
    out.append(raw)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    out.append(struct.pack("<B", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(arr.tobytes())


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise ConfigError("checkpoint is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def _read_array(r):
    name = r.take(r.unpack("<H")).decode()
    ndim = r.unpack("<B")
    shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim)))
    size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def _rng_words(state):
    s = state["state"]
    return [*np.asarray(s["counter"], dtype=np.uint64),
            *np.asarray(s["key"], dtype=np.uint64),
            *np.asarray(state["buffer"], dtype=np.uint64),
            np.uint64(state["buffer_pos"]), np.uint64(state["has_uint32"]),
            np.uint64(state["uinteger"])]


def rng_state_of(gen: np.random.Generator) -> dict:
    state = gen.bit_generator.state
    if state.get("bit_generator") != "Philox":
        raise ConfigError("checkpoints only persist counter-based streams")
    return state


def restore_stream(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    out = [_MAGIC, struct.pack("<I", ckpt.version), ckpt.digest]
    if ckpt.rng_state is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<13Q", *[int(w) for w in
                                         _rng_words(ckpt.rng_state)]))
    out.append(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _pack_array(out, name, arr)
    if ckpt.opt_state is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<Q", ckpt.opt_state["t"]))
        out.append(struct.pack("<I", len(ckpt.opt_state["m"])))
        for slot in ("m", "v"):
            for name, arr in ckpt.opt_state[slot].items():
                _pack_array(out, f"{slot}:{name}", arr)
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != _MAGIC:
        raise ConfigError(f"'{path}' is not a checkpoint file")
    version = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {version}")
    digest = r.take(32)
    rng_state = None
    if r.unpack("<B"):
        w = r.unpack("<13Q")
        rng_state = {"bit_generator": "Philox",
                     "state": {"counter": np.array(w[0:4], dtype=np.uint64),
                               "key": np.array(w[4:6], dtype=np.uint64)},
                     "buffer": np.array(w[6:10], dtype=np.uint64),
                     "buffer_pos": int(w[10]), "has_uint32": int(w[11]),
                     "uinteger": int(w[12])}
    params = {}
    for _ in range(r.unpack("<I")):
        name, arr = _read_array(r)
        params[name] = arr
    opt_state = None
    if r.unpack("<B"):
        t = r.unpack("<Q")
        n = r.unpack("<I")
        opt_state = {"t": int(t), "m": {}, "v": {}}
        for _ in range(2 * n):
            name, arr = _read_array(r)
            slot, _, pname = name.partition(":")
            opt_state[slot][pname] = arr
    if r.pos != len(r.blob):
        raise ConfigError("checkpoint has trailing bytes")
    return Checkpoint(version, digest, params, rng_state, opt_state)


def save_checkpoint(path, cfg: ModelConfig, family, rng=None,
                    optimizer=None) -> None:
    """Persist the family's parameters, keyed to this exact config."""
    params = {name: p.data for name, p in family.all_named_params()}
    opt_state = None
    if optimizer is not None:
        opt_state = {"t": optimizer.t,
                     "m": dict(zip(optimizer.names, optimizer.m)),
                     "v": dict(zip(optimizer.names, optimizer.v))}
    ckpt = Checkpoint(FORMAT_VERSION, config_digest(cfg), params,
                      None if rng is None else rng_state_of(rng), opt_state)
    write_checkpoint(path, ckpt)


def load_checkpoint(path, cfg: ModelConfig, family) -> Checkpoint:
    """Read a checkpoint, refuse on digest mismatch, and fill the family."""
    ckpt = read_checkpoint(path)
    if ckpt.digest != config_digest(cfg):
        raise ConfigError(
            f"checkpoint '{path}' digest mismatch: it was written for a"
            " different model config, refusing to load")
    names = [name for name, _ in family.all_named_params()]
    if set(names) != set(ckpt.params):
        missing = sorted(set(names) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(names))
        raise ConfigError(f"checkpoint parameter table mismatch"
                          f" (missing {missing}, unexpected {extra})")
    for name, p in family.all_named_params():
        arr = ckpt.params[name]
        if arr.shape != p.data.shape:
            raise ConfigError(f"checkpoint entry '{name}' has shape"
                              f" {arr.shape}, expected {p.data.shape}")
        p.data = arr.copy()
    return ckpt


# -- metrics files -----------------------------------------------------------

def jsonl_writer(fh):
    """Metrics callback writing one JSON record per line."""
    def write(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()
    return write


def read_metrics(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records

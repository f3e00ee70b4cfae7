"""On-disk formats: binary checkpoints and datasets, metric CSVs, flat config files."""
import math
import os
import struct
import tempfile

import numpy as np

CKPT_MAGIC = b"NODACKPT"
DATA_MAGIC = b"NODADATA"
CKPT_VERSION = 1
DATA_VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte position where reading failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    pass


def _atomic_write(path, payload, mode="wb"):
    # write beside the target then rename, so readers never see a half-written file
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def magic(self, expected, version):
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)
        (v,) = self.unpack("<I", "version")
        if v != version:
            raise FormatError(f"unsupported format version {v}", len(expected))


def _meta_text(metadata):
    lines = []
    for k in sorted(metadata):
        v = str(metadata[k])
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r} cannot be serialized")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode("utf-8")


def encode_checkpoint(params, metadata=None):
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.array(params[name], dtype="<f8", order="C")     # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    meta = _meta_text(metadata or {})
    out.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(out)


def decode_checkpoint(buf):
    r = _Reader(bytes(buf))
    r.magic(CKPT_MAGIC, CKPT_VERSION)
    (count,) = r.unpack("<I", "entry count")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        start = r.pos
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", start) from None
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(8 * size, f"payload of {name!r}"), dtype="<f8")
        params[name] = data.astype(np.float64).reshape(dims)
    (n,) = r.unpack("<I", "metadata length")
    start = r.pos
    text = r.take(n, "metadata").decode("utf-8")
    meta = {}
    for line in text.splitlines():
        if "=" not in line:
            raise FormatError(f"malformed metadata line {line!r}", start)
        k, v = line.split("=", 1)
        meta[k] = v
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after metadata", r.pos)
    return params, meta


def save_checkpoint(params, metadata, path):
    _atomic_write(path, encode_checkpoint(params, metadata))


def load_checkpoint(path):
    """``(params, metadata)``; nothing is returned unless the whole file parses."""
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def _record_dtype(obs_dim, act_dim):
    return np.dtype([("s", "<f8", (obs_dim,)), ("a", "<f8", (act_dim,)), ("s2", "<f8", (obs_dim,)),
                     ("r", "<f8"), ("done", "u1")])


def encode_dataset(data):
    s, a = np.atleast_2d(data["s"]), np.atleast_2d(data["a"])
    n, obs_dim, act_dim = len(s), s.shape[1], a.shape[1]
    if np.shape(data["s2"]) != s.shape or a.shape[0] != n or len(data["r"]) != n or len(data["done"]) != n:
        raise ValueError("inconsistent record dimensions")
    rec = np.zeros(n, dtype=_record_dtype(obs_dim, act_dim))
    rec["s"], rec["a"], rec["s2"] = s, a, data["s2"]
    rec["r"], rec["done"] = data["r"], np.asarray(data["done"], dtype=bool)
    return DATA_MAGIC + struct.pack("<IIII", DATA_VERSION, n, obs_dim, act_dim) + rec.tobytes()


def decode_dataset(buf):
    r = _Reader(bytes(buf))
    r.magic(DATA_MAGIC, DATA_VERSION)
    n, obs_dim, act_dim = r.unpack("<III", "header")
    dt = _record_dtype(obs_dim, act_dim)
    body = r.take(n * dt.itemsize, f"{n} records")
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after records", r.pos)
    rec = np.frombuffer(body, dtype=dt)
    return {"s": rec["s"].copy(), "a": rec["a"].copy(), "s2": rec["s2"].copy(),
            "r": rec["r"].copy(), "done": rec["done"].astype(bool)}


def save_dataset(data, path):
    _atomic_write(path, encode_dataset(data))


def load_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


# --- CSV ----------------------------------------------------------------------

LOSSES = ("batch", "train_loss", "test_loss")
RL = ("env_steps", "eval_return_mean", "eval_return_std", "model_test_mse", "wall_seconds")
BOUNDS = ("n", "delta_measured", "bound_closed_form", "bound_recursive", "margin")


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return format(v, ".17g")
    s = str(v)
    if "," in s or "\n" in s:
        raise ValueError(f"value {s!r} cannot be written unquoted")
    return s


def metrics_text(rows, schema):
    lines = [",".join(schema)]
    for row in rows:
        missing = [c for c in schema if c not in row]
        if missing:
            raise ValueError(f"row lacks columns {missing}")
        lines.append(",".join(format_value(row[c]) for c in schema))
    return "\n".join(lines) + "\n"


def write_metrics(rows, schema, path):
    _atomic_write(path, metrics_text(rows, schema), mode="w")


def read_metrics(path):
    """Rows as dicts of floats (``n``-style labels kept as strings when not numeric)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            vals = []
            for x in line.strip().split(","):
                try:
                    vals.append(float(x))
                except ValueError:
                    vals.append(x)
            rows.append(dict(zip(header, vals)))
    return header, rows


# --- config -------------------------------------------------------------------

def _coerce(key, raw, default, where):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: bad value {raw!r} for {key}") from None


def parse_assignment(text, defaults, where):
    if "=" not in text:
        raise ConfigError(f"{where}: expected 'key = value', got {text!r}")
    key, raw = (x.strip() for x in text.split("=", 1))
    if key not in defaults:
        raise ConfigError(f"{where}: unknown key {key!r}")
    return key, _coerce(key, raw, defaults[key], where)


def parse_config(text, defaults, source="config"):
    """Flat ``key = value`` settings; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, defaults, f"{source}:{lineno}")
        out[key] = value
    return out


def resolve_config(defaults, file_text=None, overrides=(), source="config"):
    """Defaults, then file values, then ``key=value`` overrides (last wins)."""
    cfg = dict(defaults)
    if file_text is not None:
        cfg.update(parse_config(file_text, defaults, source))
    for i, item in enumerate(overrides, 1):
        key, value = parse_assignment(item, defaults, f"--set #{i}")
        cfg[key] = value
    return cfg


def split_list(value, cast=str):
    return [cast(x.strip()) for x in str(value).split(",") if x.strip()]

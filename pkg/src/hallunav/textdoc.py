"""Deterministic structured-text documents (YAML-compatible subset).

Every document starts with a ``format: <tag>/<version>`` header line.  The
writer emits keys in insertion order, floats via shortest round-trip repr,
and nested dicts / scalar lists / lists of flat dicts, so writing the same
data always yields the same bytes and ``write(read(write(x))) == write(x)``.
Reading goes through yaml.safe_load.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import yaml

_BARE = re.compile(r"^[A-Za-z0-9_./+-]+$")
_NUMERIC = re.compile(r"^[+-]?(\d+\.?\d*([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?)$")


class DocFormatError(ValueError):
    """Raised when a document is missing or mismatches its format tag."""


def _scalar(v) -> str:
    if isinstance(v, bool) or isinstance(v, np.bool_):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if not np.isfinite(f):
            raise ValueError("non-finite floats are not representable")
        r = repr(f)
        # yaml's float resolver needs a dotted mantissa ('1.0e-08', not '1e-08')
        if "e" in r:
            mant, _, ex = r.partition("e")
            if "." not in mant:
                r = mant + ".0e" + ex
        elif "." not in r:
            r += ".0"
        return r
    if isinstance(v, str):
        if _BARE.match(v) and not _NUMERIC.match(v) and v not in ("true", "false", "null"):
            return v
        return "'" + v.replace("'", "''") + "'"
    if v is None:
        return "null"
    raise TypeError(f"unsupported scalar type {type(v).__name__}")


def _emit(value, indent: int, lines: list[str], key: str | None) -> None:
    pad = "  " * indent
    if isinstance(value, dict):
        if key is not None:
            lines.append(f"{pad}{key}:")
        for k, v in value.items():
            _emit(v, indent + (0 if key is None else 1), lines, str(k))
        return
    if isinstance(value, (list, tuple, np.ndarray)):
        items = list(value)
        if all(not isinstance(it, (dict, list, tuple, np.ndarray)) for it in items):
            joined = ", ".join(_scalar(it) for it in items)
            lines.append(f"{pad}{key}: [{joined}]")
            return
        lines.append(f"{pad}{key}:")
        for it in items:
            if isinstance(it, dict):
                first = True
                for k, v in it.items():
                    bullet = f"{pad}- " if first else f"{pad}  "
                    if isinstance(v, (dict, list, tuple, np.ndarray)):
                        sub: list[str] = []
                        _emit(v, 0, sub, str(k))
                        lines.append(bullet + sub[0])
                        lines.extend(f"{pad}  " + s for s in sub[1:])
                    else:
                        lines.append(f"{bullet}{k}: {_scalar(v)}")
                    first = False
            elif isinstance(it, (list, tuple, np.ndarray)):
                joined = ", ".join(_scalar(x) for x in it)
                lines.append(f"{pad}- [{joined}]")
            else:
                lines.append(f"{pad}- {_scalar(it)}")
        return
    lines.append(f"{pad}{key}: {_scalar(value)}")


def dump_doc(tag: str, data: dict) -> str:
    """Serialize ``data`` under a versioned format tag (e.g. 'hallunav-env/1')."""
    lines = [f"format: {tag}"]
    for k, v in data.items():
        if k == "format":
            raise ValueError("'format' is reserved for the header line")
        _emit(v, 0, lines, str(k))
    return "\n".join(lines) + "\n"


def load_doc(text: str, tag: str | None = None) -> dict:
    data = yaml.safe_load(text)
    if not isinstance(data, dict) or "format" not in data:
        raise DocFormatError("document is missing its format header line")
    if tag is not None and data["format"] != tag:
        raise DocFormatError(f"expected format {tag!r}, found {data['format']!r}")
    data = dict(data)
    data.pop("format")
    return data


def save_doc(path, tag: str, data: dict) -> None:
    Path(path).write_text(dump_doc(tag, data))


def open_doc(path, tag: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise DocFormatError(f"missing document: {path}")
    return load_doc(path.read_text(), tag)


# ----------------------------------------------------------------------
# environment spec documents
# ----------------------------------------------------------------------

ENV_TAG = "hallunav-env/1"


def env_to_text(env) -> str:
    from .world import EnvSpec  # noqa: F401  (type reference only)

    doc = {
        "name": env.name,
        "seed": env.seed,
        "arena": list(env.bounds),
        "start": [env.start.x, env.start.y, env.start.yaw],
        "goal": [env.goal.x, env.goal.y, env.goal.yaw],
        "walls": [list(w) for w in env.walls],
        "obstacles": [
            {
                "kind": s.kind,
                "x0": s.x0,
                "y0": s.y0,
                "speed": s.speed,
                "heading": s.heading,
                "radius": s.radius,
                "amplitude": s.amplitude,
                "period": s.period,
                "retarget_lo": s.retarget_lo,
                "retarget_hi": s.retarget_hi,
                "seed": s.seed,
            }
            for s in env.scripts
        ],
    }
    return dump_doc(ENV_TAG, doc)


def env_from_text(text: str):
    from .world import EnvSpec, ObstacleScript, Pose

    doc = load_doc(text, ENV_TAG)
    scripts = tuple(
        ObstacleScript(
            kind=o["kind"],
            x0=float(o["x0"]),
            y0=float(o["y0"]),
            speed=float(o["speed"]),
            heading=float(o["heading"]),
            radius=float(o["radius"]),
            amplitude=float(o["amplitude"]),
            period=float(o["period"]),
            retarget_lo=float(o["retarget_lo"]),
            retarget_hi=float(o["retarget_hi"]),
            seed=int(o["seed"]),
        )
        for o in doc.get("obstacles", [])
    )
    return EnvSpec(
        name=str(doc["name"]),
        bounds=tuple(float(b) for b in doc["arena"]),
        walls=tuple(tuple(float(x) for x in w) for w in doc.get("walls", [])),
        scripts=scripts,
        start=Pose(*doc["start"]),
        goal=Pose(*doc["goal"]),
        seed=int(doc["seed"]),
    )


def save_env(path, env) -> None:
    Path(path).write_text(env_to_text(env))


def load_env(path):
    return env_from_text(Path(path).read_text())

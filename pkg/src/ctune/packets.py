"""KEY=VALUE information packets.

A packet is a run of ``KEY=VALUE`` lines; packets in a stream are separated
by one blank line.  Values are taken verbatim after the first ``=``.
"""

import logging
import re
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .errors import DuplicateKey, MalformedLine

log = logging.getLogger(__name__)

KEY_RE = re.compile(r"^[A-Z][A-Z0-9_]*$")

Fields = Dict[str, str]


def parse_pairs(text: str) -> List[Tuple[str, str]]:
    """Parse one packet into ``(key, value)`` pairs, duplicates allowed."""
    pairs = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if line == "":
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedLine(f"line {lineno}: no '=' in {line!r}")
        if not KEY_RE.match(key):
            raise MalformedLine(f"line {lineno}: bad key {key!r}")
        pairs.append((key, value))
    return pairs


def parse_fields(text: str) -> Fields:
    fields: Fields = {}
    for key, value in parse_pairs(text):
        if key in fields:
            raise DuplicateKey(f"duplicate key {key}")
        fields[key] = value
    return fields


def check_value(key: str, value: str) -> None:
    if "\n" in value or "\r" in value:
        raise ValueError(f"{key}: packet values cannot contain line breaks")


def format_packet(fields: Iterable[Tuple[str, str]]) -> str:
    """Render pairs as packet text, one ``KEY=VALUE`` line each, LF-terminated."""
    if isinstance(fields, Mapping):
        fields = fields.items()
    out = []
    for key, value in fields:
        if not KEY_RE.match(key):
            raise ValueError(f"bad packet key {key!r}")
        check_value(key, value)
        out.append(f"{key}={value}\n")
    return "".join(out)


def split_stream(text: str) -> Tuple[List[str], Optional[str]]:
    """Split a packet stream into complete packets plus an incomplete tail.

    Every packet in a stream is terminated by a blank line, so anything
    after the last ``\\n\\n`` is a partially written packet.
    """
    cut = text.rfind("\n\n")
    complete, tail = (text[: cut + 2], text[cut + 2 :]) if cut >= 0 else ("", text)
    chunks = [c for c in complete.split("\n\n") if c.strip("\n")]
    return chunks, (tail or None)


def parse_stream(text: str) -> List[Fields]:
    """Parse every packet of a blank-line separated stream (tail must be complete)."""
    packets = [c for c in re.split(r"\n\s*\n", text) if c.strip()]
    return [parse_fields(p) for p in packets]


def format_stream(packets: Iterable[Iterable[Tuple[str, str]]]) -> str:
    return "".join(format_packet(p) + "\n" for p in packets)


# value codecs

def fmt_float(x: float) -> str:
    """Six-decimal rendering used by every timing field (``69.000000``)."""
    return f"{x:.6f}"


def fmt_num(x: float) -> str:
    """Shortest exact rendering: integers without a point, floats via repr."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def parse_bool(value: str) -> bool:
    if value in ("1", "true", "True"):
        return True
    if value in ("0", "false", "False", ""):
        return False
    raise ValueError(f"not a boolean flag: {value!r}")


def parse_vector(value: str) -> Dict[str, float]:
    """``" ft1=9, ft2=4, ..."`` -> ``{"ft1": 9.0, "ft2": 4.0}``.

    A trailing ``...`` (as in truncated listings) is ignored.
    """
    out: Dict[str, float] = {}
    for token in value.split(","):
        token = token.strip()
        if not token or token == "...":
            continue
        name, sep, num = token.partition("=")
        name = name.strip()
        if not sep or not name:
            raise ValueError(f"bad vector entry {token!r}")
        if name in out:
            raise ValueError(f"duplicate vector index {name!r}")
        out[name] = float(num)
    return out


def format_vector(entries: Mapping[str, float]) -> str:
    return ", ".join(f"{k}={fmt_num(v)}" for k, v in entries.items())


_PROFILE_RE = re.compile(r"\{([^=}]+)=([^}]*)\}")


def parse_profile(value: str) -> Dict[str, Tuple[float, int, float]]:
    """``{susan_corners=12.27,782,0.0156905371}`` -> name -> (seconds, calls, fraction)."""
    out = {}
    if not value.strip():
        return out
    matched = _PROFILE_RE.findall(value)
    if not matched:
        raise ValueError(f"bad profile {value!r}")
    for name, body in matched:
        parts = body.split(",")
        if len(parts) != 3:
            raise ValueError(f"profile entry {name!r} needs seconds,calls,fraction")
        out[name] = (float(parts[0]), int(parts[1]), float(parts[2]))
    return out


def format_profile(profile: Mapping[str, Tuple[float, int, float]]) -> str:
    return ",".join(
        f"{{{name}={fmt_num(sec)},{int(calls)},{fmt_num(frac)}}}"
        for name, (sec, calls, frac) in profile.items()
    )


def parse_counters(value: str) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for token in value.split(","):
        token = token.strip()
        if not token:
            continue
        name, sep, num = token.partition("=")
        if not sep or not name.strip():
            raise ValueError(f"bad counter entry {token!r}")
        out[name.strip()] = int(num)
    return out


def format_counters(counters: Mapping[str, int]) -> str:
    return ", ".join(f"{k}={int(v)}" for k, v in counters.items())

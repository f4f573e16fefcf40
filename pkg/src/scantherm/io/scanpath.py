"""Line-based scan-path files.

Grammar (one directive per line, ``#`` comments, all values SI):

    layer <k> z=<height_m>
    track <x0> <y0> <x1> <y1> v=<m/s> P=<W>
    hatch box <x0> <y0> <x1> <y1> dh=<m> dir=<x|y> v=<m/s> P=<W>
    cool <seconds>

A ``layer`` line opens a block; ``track`` and ``hatch`` append segments
to it (hatch directives expand deterministically through the serpentine
generator); ``cool`` sets the block's dwell.  Layer indices must be
strictly increasing.
"""

from ..params import ConfigError
from ..physics import LayerPath, ScanPath, Segment

__all__ = ["parse_scanpath", "serialize_scanpath"]


def _fail(lineno, msg):
    raise ConfigError(f"line {lineno}: {msg}")


def _floats(toks, n, lineno, what):
    if len(toks) != n:
        _fail(lineno, f"{what} expects {n} coordinates, got {len(toks)}")
    try:
        return [float(t) for t in toks]
    except ValueError:
        _fail(lineno, f"cannot parse number in {what}")


def _kwargs(toks, lineno):
    out = {}
    for t in toks:
        if "=" not in t:
            _fail(lineno, f"expected key=value, got {t!r}")
        k, v = t.split("=", 1)
        out[k] = (v, lineno)
    return out


def _take(kw, key, lineno, conv=float):
    if key not in kw:
        _fail(lineno, f"missing {key}=")
    v, ln = kw.pop(key)
    try:
        return conv(v)
    except ValueError:
        _fail(ln, f"cannot parse {key}={v!r}")


def parse_scanpath(text) -> ScanPath:
    from ..driver import generate_hatch

    layers = []
    current = None
    last_index = -1
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        toks = body.split()
        word = toks[0]
        if word == "layer":
            if len(toks) != 3 or not toks[2].startswith("z="):
                _fail(lineno, "expected: layer <k> z=<height>")
            try:
                k = int(toks[1])
            except ValueError:
                _fail(lineno, f"bad layer index {toks[1]!r}")
            if k <= last_index:
                _fail(lineno, "layer indices must be strictly increasing")
            last_index = k
            z = _take({"z": (toks[2][2:], lineno)}, "z", lineno)
            current = LayerPath(k, z, [], 0.0)
            layers.append(current)
        elif word == "track":
            if current is None:
                _fail(lineno, "track before any layer line")
            kw = _kwargs(toks[5:], lineno)
            x0, y0, x1, y1 = _floats(toks[1:5], 4, lineno, "track")
            v = _take(kw, "v", lineno)
            power = _take(kw, "P", lineno)
            if kw:
                _fail(lineno, f"unknown option {sorted(kw)[0]!r}")
            current.segments.append(Segment(x0, y0, x1, y1, v, power))
        elif word == "hatch":
            if current is None:
                _fail(lineno, "hatch before any layer line")
            if len(toks) < 2 or toks[1] != "box":
                _fail(lineno, "expected: hatch box <x0> <y0> <x1> <y1> ...")
            kw = _kwargs(toks[6:], lineno)
            x0, y0, x1, y1 = _floats(toks[2:6], 4, lineno, "hatch box")
            dh = _take(kw, "dh", lineno)
            direction = _take(kw, "dir", lineno, conv=str)
            v = _take(kw, "v", lineno)
            power = _take(kw, "P", lineno)
            if kw:
                _fail(lineno, f"unknown option {sorted(kw)[0]!r}")
            if direction not in ("x", "y"):
                _fail(lineno, f"dir must be x or y, got {direction!r}")
            if dh <= 0.0:
                _fail(lineno, "dh must be positive")
            deg = 0.0 if direction == "x" else 90.0
            current.segments.extend(
                generate_hatch([(x0, y0, x1, y1)], dh, v, power, deg))
        elif word == "cool":
            if current is None:
                _fail(lineno, "cool before any layer line")
            (t,) = _floats(toks[1:], 1, lineno, "cool")
            if t < 0.0:
                _fail(lineno, "cool time must be nonnegative")
            current.cool_time = t
        else:
            _fail(lineno, f"unknown directive {word!r}")
    return ScanPath(layers).validate()


def serialize_scanpath(path: ScanPath) -> str:
    """Explicit track-level form (hatch directives already expanded)."""
    lines = []
    for lp in path.layers:
        lines.append(f"layer {lp.layer_index} z={lp.z!r}")
        for s in lp.segments:
            lines.append(f"track {s.x0!r} {s.y0!r} {s.x1!r} {s.y1!r} "
                         f"v={s.v!r} P={s.power!r}")
        if lp.cool_time:
            lines.append(f"cool {lp.cool_time!r}")
    return "\n".join(lines) + ("\n" if lines else "")

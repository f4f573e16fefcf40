"""XML unstructured-grid (.vtu) export of a mesh snapshot.

One file per snapshot: every leaf cell of the forest as a hexahedron
(inactive ones flagged by the ``active`` cell field), point temperatures
with hanging vertices closed through their constraints, and the
consolidation state per cell.  Appended-raw encoding, little endian,
64-bit block headers.

Field values are written bit-exactly; classification of
``material_state`` is the only derived quantity (0 powder, 1 mushy or
melt, 2 solid, by the largest cell-mean phase fraction).
"""

import re

import numpy as np

from ..material import phase_fractions
from ..mesh import pack_coords
from ..operators import close_constraints

__all__ = ["write_vtu", "read_vtu"]

_VTK_HEX = 12
# our corner index is ix*4 + iy*2 + iz; VTK wants the bottom loop then
# the top loop, counterclockwise
_VTK_ORDER = np.array([0, 4, 6, 2, 1, 5, 7, 3])

_DTYPES = {
    "Float64": "<f8", "Float32": "<f4",
    "Int64": "<i8", "Int32": "<i4",
    "UInt8": "<u1", "UInt64": "<u8",
}

_CORNERS = np.array([[ix, iy, iz] for ix in (0, 1) for iy in (0, 1)
                     for iz in (0, 1)], dtype=np.int64)


def _leaf_points(forest):
    """Unique corner vertices of all leaves and per-leaf corner indices."""
    corners = (forest.anchor[:, None, :]
               + forest.size()[:, None, None] * _CORNERS[None, :, :])
    keys = pack_coords(corners.reshape(-1, 3))
    uniq, inv = np.unique(keys, return_inverse=True)
    # coordinates back via an occurrence of each key (reversed scatter
    # leaves the first one)
    first = np.empty(len(uniq), dtype=np.int64)
    first[inv[::-1]] = np.arange(len(keys))[::-1]
    verts = corners.reshape(-1, 3)[first]
    return uniq, verts, inv.reshape(-1, 8)


def _material_state(t_mean, rc_mean, mat):
    r_p, r_m, r_s = phase_fractions(t_mean, rc_mean, mat)
    return np.argmax(np.stack([r_p, r_m, r_s]), axis=0).astype(np.int32)


def write_vtu(path, forest, dofmap, T, history, mat, time=None):
    keys, verts, conn8 = _leaf_points(forest)
    points = (verts * forest.h_fine).astype("<f8")

    # point temperature: constraint-closed values on mesh vertices,
    # zero on corners that belong only to inactive cells
    closed = close_constraints(dofmap, np.asarray(T, dtype=np.float64))
    temp = np.zeros(len(keys), dtype="<f8")
    dof_keys = pack_coords(dofmap.vertices)
    pos = np.searchsorted(keys, dof_keys)
    assert np.array_equal(keys[pos], dof_keys)
    temp[pos] = closed

    act = forest.active_cells()
    rc_mean = np.zeros(forest.n_cells, dtype="<f8")
    rc_mean[act] = history.r_c.reshape(len(act), -1).mean(axis=1)
    state = np.zeros(forest.n_cells, dtype="<i4")
    t_mean = temp[conn8[act]].mean(axis=1)
    state[act] = _material_state(t_mean, rc_mean[act], mat)

    conn = conn8[:, _VTK_ORDER].astype("<i8").ravel()
    offsets = (np.arange(1, forest.n_cells + 1, dtype="<i8") * 8)
    types = np.full(forest.n_cells, _VTK_HEX, dtype="<u1")

    arrays = [
        ("Points", points.reshape(-1), "Float64", 3, "point-geom"),
        ("connectivity", conn, "Int64", None, "cells"),
        ("offsets", offsets, "Int64", None, "cells"),
        ("types", types, "UInt8", None, "cells"),
        ("temperature", temp, "Float64", None, "point"),
        ("consolidated_fraction", rc_mean, "Float64", None, "cell"),
        ("material_state", state, "Int32", None, "cell"),
        ("refinement_level",
         forest.level.astype("<i4"), "Int32", None, "cell"),
        ("active", forest.active.astype("<i4"), "Int32", None, "cell"),
    ]
    if time is not None:
        arrays.append(("TimeValue", np.array([time], dtype="<f8"),
                       "Float64", None, "field"))

    blob = bytearray()
    offset_of = {}
    for name, data, vtype, _, group in arrays:
        offset_of[(group, name)] = len(blob)
        raw = np.ascontiguousarray(data).tobytes()
        blob += np.uint64(len(raw)).tobytes()
        blob += raw

    def da(name, vtype, group, ncomp=None):
        comp = f' NumberOfComponents="{ncomp}"' if ncomp else ""
        return (f'<DataArray type="{vtype}" Name="{name}"{comp} '
                f'format="appended" offset="{offset_of[(group, name)]}"/>')

    xml = ['<?xml version="1.0"?>',
           '<VTKFile type="UnstructuredGrid" version="1.0" '
           'byte_order="LittleEndian" header_type="UInt64">',
           '<UnstructuredGrid>']
    if time is not None:
        xml += ['<FieldData>',
                da("TimeValue", "Float64", "field").replace(
                    "/>", ' NumberOfTuples="1"/>'),
                '</FieldData>']
    xml += [f'<Piece NumberOfPoints="{len(points)}" '
            f'NumberOfCells="{forest.n_cells}">',
            '<Points>', da("Points", "Float64", "point-geom", 3), '</Points>',
            '<Cells>',
            da("connectivity", "Int64", "cells"),
            da("offsets", "Int64", "cells"),
            da("types", "UInt8", "cells"),
            '</Cells>',
            '<PointData Scalars="temperature">',
            da("temperature", "Float64", "point"),
            '</PointData>',
            '<CellData>',
            da("consolidated_fraction", "Float64", "cell"),
            da("material_state", "Int32", "cell"),
            da("refinement_level", "Int32", "cell"),
            da("active", "Int32", "cell"),
            '</CellData>',
            '</Piece>',
            '</UnstructuredGrid>',
            '<AppendedData encoding="raw">_']
    head = "\n".join(xml).encode()
    tail = b'</AppendedData>\n</VTKFile>\n'
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(bytes(blob))
        fh.write(tail)


def read_vtu(path):
    """Parse a .vtu written by write_vtu (or compatible appended-raw
    files).  Returns a dict with points, connectivity, point_data and
    cell_data; used by tests and the demo scripts, not the solver."""
    with open(path, "rb") as fh:
        data = fh.read()
    marker = data.index(b'encoding="raw">')
    underscore = data.index(b"_", marker)
    head = data[:underscore].decode("utf-8", errors="replace")
    blob = data[underscore + 1:data.rindex(b"</AppendedData>")]

    m = re.search(r'header_type="(\w+)"', head)
    hdr = np.dtype(_DTYPES[m.group(1)]) if m else np.dtype("<u4")
    piece = re.search(r'NumberOfPoints="(\d+)"\s+NumberOfCells="(\d+)"', head)
    n_points, n_cells = int(piece.group(1)), int(piece.group(2))

    out = {"n_points": n_points, "n_cells": n_cells,
           "point_data": {}, "cell_data": {}, "field_data": {}}
    section = None
    for line in head.splitlines():
        tag = line.strip()
        for sec in ("FieldData", "Points", "Cells", "PointData", "CellData"):
            if tag.startswith(f"<{sec}"):
                section = sec
            if tag.startswith(f"</{sec}"):
                section = None
        m = re.search(r'<DataArray type="(\w+)" Name="([^"]+)"'
                      r'(?:\s+NumberOfComponents="(\d+)")?'
                      r'(?:\s+format="appended")?\s+offset="(\d+)"', tag)
        if not m:
            continue
        vtype, name, ncomp, off = m.groups()
        off = int(off)
        nbytes = int(np.frombuffer(blob[off:off + hdr.itemsize], hdr)[0])
        raw = blob[off + hdr.itemsize:off + hdr.itemsize + nbytes]
        arr = np.frombuffer(raw, dtype=_DTYPES[vtype]).copy()
        if ncomp:
            arr = arr.reshape(-1, int(ncomp))
        if section == "Points":
            out["points"] = arr.reshape(-1, 3)
        elif section == "Cells":
            out[name] = arr
        elif section == "PointData":
            out["point_data"][name] = arr
        elif section == "CellData":
            out["cell_data"][name] = arr
        elif section == "FieldData":
            out["field_data"][name] = arr
    return out

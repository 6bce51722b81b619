"""On-disk dataset format: posed images, geometric/semantic priors, labeled
sparse points, ground-truth mesh and planes.

Layout (all trivially parseable):
  cameras.txt      one line per view: id w h fx fy cx cy + 12 row-major
                   world-to-cam floats (3x4 [R|t])
  rgb/<id>.png     8-bit color
  depth/<id>.raw   float32 little-endian + sidecar <id>.hdr text header
  normal/<id>.raw  3-channel float32 + sidecar header
  sem/<id>.png     8-bit labels (0 other, 1 wall, 2 floor, 3 ceiling)
  points.ply       ascii PLY, xyz double + uchar label
  points_obs.txt   line i: semicolon-separated view,u,v observations of point i
  mesh_gt.ply      triangle mesh, optional per-vertex uchar label
  planes_gt.txt    key/value lines: n_g, d_f, d_c, has_ceiling

write -> read -> write round trips byte-identically.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import Camera
from .meshing import TriangleMesh
from .planes import PlaneIndicators

F = "%.17g"  # lossless float64 text round trip


class ParseError(RuntimeError):
    pass


@dataclass
class SceneDataset:
    cameras: list  # of Camera
    images: np.ndarray  # (V, H, W, 3) uint8
    depths: np.ndarray  # (V, H, W) float32, 0 where invalid
    normals: np.ndarray  # (V, H, W, 3) float32, zero where invalid
    sems: np.ndarray  # (V, H, W) uint8 labels
    points: np.ndarray  # (N, 3) float64
    point_labels: np.ndarray  # (N,) int
    point_obs: list  # point_obs[i] = [(view, u, v), ...]
    mesh_gt: TriangleMesh = None
    planes_gt: PlaneIndicators = None
    mode: str = "indoor"

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def images_float(self) -> np.ndarray:
        return self.images.astype(np.float64) / 255.0


# ---------------------------------------------------------------- PLY I/O

_PLY_TYPES = {
    "double": ("<f8", 8), "float": ("<f4", 4),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "int": ("<i4", 4), "int32": ("<i4", 4), "uint": ("<u4", 4),
}


def write_ply(path, vertices, faces=None, labels=None, binary=False):
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    lines = ["ply",
             "format binary_little_endian 1.0" if binary else "format ascii 1.0",
             f"element vertex {len(vertices)}",
             "property double x", "property double y", "property double z"]
    if labels is not None:
        lines.append("property uchar label")
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        lines.append(f"element face {len(faces)}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        if binary:
            for i, v in enumerate(vertices):
                fh.write(v.astype("<f8").tobytes())
                if labels is not None:
                    fh.write(np.uint8(labels[i]).tobytes())
            if faces is not None:
                for f in faces:
                    fh.write(np.uint8(3).tobytes())
                    fh.write(f.astype("<i4").tobytes())
        else:
            for i, v in enumerate(vertices):
                row = " ".join(F % c for c in v)
                if labels is not None:
                    row += f" {int(labels[i])}"
                fh.write((row + "\n").encode("ascii"))
            if faces is not None:
                for f in faces:
                    fh.write((f"3 {f[0]} {f[1]} {f[2]}\n").encode("ascii"))


def read_ply(path):
    """Returns (vertices, faces or None, labels or None).  Supports ascii and
    binary_little_endian with double/float coordinates and optional uchar
    label, plus an optional face element with a vertex index list."""
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        header_end = data.index(b"end_header\n") + len(b"end_header\n")
    except ValueError:
        raise ParseError(f"{path}: missing end_header")
    header = data[:header_end].decode("ascii", "replace").splitlines()
    if not header or header[0].strip() != "ply":
        raise ParseError(f"{path}: not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, type) or ('list', count_t, item_t, name)])
    for line in header[1:]:
        parts = line.strip().split()
        if not parts or parts[0] in ("comment", "end_header"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append((parts[2], parts[1]))  # (name, type)
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"{path}: unsupported format {fmt}")

    vertices = faces = labels = None
    if fmt == "ascii":
        rows = data[header_end:].decode("ascii").splitlines()
        cursor = 0
        for name, count, props in elements:
            chunk = rows[cursor : cursor + count]
            cursor += count
            if name == "vertex":
                names = [p[0] for p in props]
                try:
                    xi, yi, zi = (names.index(c) for c in "xyz")
                except ValueError as e:
                    raise ParseError(f"{path}: vertex missing coordinate: {e}")
                arr = [r.split() for r in chunk]
                vertices = np.array(
                    [[float(r[xi]), float(r[yi]), float(r[zi])] for r in arr]
                )
                if "label" in names:
                    li = names.index("label")
                    labels = np.array([int(r[li]) for r in arr], dtype=np.int64)
            elif name == "face":
                faces = np.array(
                    [[int(x) for x in r.split()[1:4]] for r in chunk],
                    dtype=np.int64,
                ).reshape(-1, 3)
    else:
        buf = data[header_end:]
        off = 0
        for name, count, props in elements:
            if name == "vertex":
                names = [p[0] for p in props]
                dtype = np.dtype(
                    [(p[0], _PLY_TYPES[p[1]][0]) for p in props]
                )
                arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
                off += dtype.itemsize * count
                try:
                    vertices = np.stack(
                        [arr["x"], arr["y"], arr["z"]], axis=-1
                    ).astype(np.float64)
                except KeyError as e:
                    raise ParseError(f"{path}: vertex missing coordinate {e}")
                if "label" in names:
                    labels = arr["label"].astype(np.int64)
            elif name == "face":
                out = []
                for _ in range(count):
                    n = buf[off]
                    off += 1
                    if n != 3:
                        raise ParseError(f"{path}: only triangle faces supported")
                    out.append(np.frombuffer(buf, "<i4", count=3, offset=off))
                    off += 12
                faces = np.array(out, dtype=np.int64).reshape(-1, 3)
    if vertices is None:
        raise ParseError(f"{path}: no vertex element")
    return vertices, faces, labels


# ---------------------------------------------------------------- raw maps

def _write_raw(path, array, channels):
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    h, w = array.shape[:2]
    with open(path[: -len(".raw")] + ".hdr", "w") as fh:
        fh.write(f"width={w}\nheight={h}\ndtype=float32\nchannels={channels}\n")


def _read_raw(path):
    hdr_path = path[: -len(".raw")] + ".hdr"
    if not os.path.exists(hdr_path):
        raise ParseError(f"{path}: missing sidecar header")
    kv = {}
    with open(hdr_path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.strip().split("=", 1)
                kv[k] = v
    try:
        w, h, c = int(kv["width"]), int(kv["height"]), int(kv["channels"])
        if kv["dtype"] != "float32":
            raise ParseError(f"{hdr_path}: unsupported dtype {kv['dtype']}")
    except KeyError as e:
        raise ParseError(f"{hdr_path}: missing field {e}")
    data = np.fromfile(path, dtype="<f4")
    expect = w * h * c
    if data.size != expect:
        raise ParseError(f"{path}: expected {expect} floats, got {data.size}")
    return data.reshape((h, w) if c == 1 else (h, w, c))


# ---------------------------------------------------------------- dataset

def write_dataset(ds: SceneDataset, path):
    os.makedirs(path, exist_ok=True)
    for sub in ("rgb", "depth", "normal", "sem"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)
    with open(os.path.join(path, "cameras.txt"), "w") as fh:
        for i, cam in enumerate(ds.cameras):
            pose = np.concatenate(
                [np.concatenate([cam.rotation[r], [cam.translation[r]]])
                 for r in range(3)]
            )
            vals = [F % v for v in
                    (cam.fx, cam.fy, cam.cx, cam.cy, *pose)]
            fh.write(f"{i} {cam.width} {cam.height} " + " ".join(vals) + "\n")
    for i in range(ds.n_views):
        Image.fromarray(ds.images[i]).save(os.path.join(path, "rgb", f"{i}.png"))
        Image.fromarray(ds.sems[i]).save(os.path.join(path, "sem", f"{i}.png"))
        _write_raw(os.path.join(path, "depth", f"{i}.raw"), ds.depths[i], 1)
        _write_raw(os.path.join(path, "normal", f"{i}.raw"), ds.normals[i], 3)
    write_ply(os.path.join(path, "points.ply"), ds.points, labels=ds.point_labels)
    with open(os.path.join(path, "points_obs.txt"), "w") as fh:
        for obs in ds.point_obs:
            fh.write(";".join(f"{int(v)},{F % u},{F % vv}" for v, u, vv in obs))
            fh.write("\n")
    if ds.mesh_gt is not None:
        write_ply(os.path.join(path, "mesh_gt.ply"), ds.mesh_gt.vertices,
                  faces=ds.mesh_gt.triangles, labels=ds.mesh_gt.labels)
    if ds.planes_gt is not None:
        p = ds.planes_gt
        with open(os.path.join(path, "planes_gt.txt"), "w") as fh:
            fh.write("n_g " + " ".join(F % v for v in p.n_g) + "\n")
            fh.write(f"d_f {F % p.d_f}\nd_c {F % p.d_c}\n")
            fh.write(f"has_ceiling {int(p.has_ceiling)}\n")
    with open(os.path.join(path, "mode.txt"), "w") as fh:
        fh.write(ds.mode + "\n")


def read_dataset(path) -> SceneDataset:
    cam_path = os.path.join(path, "cameras.txt")
    if not os.path.exists(cam_path):
        raise ParseError(f"{cam_path}: missing")
    cameras = []
    with open(cam_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 19:
                raise ParseError(f"{cam_path}: expected 19 fields, got {len(parts)}")
            _, w, h = int(parts[0]), int(parts[1]), int(parts[2])
            fx, fy, cx, cy = map(float, parts[3:7])
            pose = np.array(list(map(float, parts[7:]))).reshape(3, 4)
            cameras.append(Camera(
                width=w, height=h, fx=fx, fy=fy, cx=cx, cy=cy,
                rotation=pose[:, :3], translation=pose[:, 3],
            ))
    images, depths, normals, sems = [], [], [], []
    for i in range(len(cameras)):
        for sub, ext, sink in (("rgb", ".png", images), ("sem", ".png", sems),
                               ("depth", ".raw", depths),
                               ("normal", ".raw", normals)):
            p = os.path.join(path, sub, f"{i}{ext}")
            if not os.path.exists(p):
                raise ParseError(f"{sub} map missing for view {i}: {p}")
            if ext == ".png":
                sink.append(np.asarray(Image.open(p)))
            else:
                sink.append(_read_raw(p))
    pts, _, labels = read_ply(os.path.join(path, "points.ply"))
    obs_path = os.path.join(path, "points_obs.txt")
    point_obs = []
    if os.path.exists(obs_path):
        with open(obs_path) as fh:
            for line in fh:
                line = line.strip()
                entry = []
                if line:
                    for item in line.split(";"):
                        v, u, vv = item.split(",")
                        entry.append((int(v), float(u), float(vv)))
                point_obs.append(entry)
    else:
        point_obs = [[] for _ in range(len(pts))]
    if len(point_obs) != len(pts):
        raise ParseError(f"{obs_path}: {len(point_obs)} lines for {len(pts)} points")
    mesh = None
    mesh_path = os.path.join(path, "mesh_gt.ply")
    if os.path.exists(mesh_path):
        mv, mf, ml = read_ply(mesh_path)
        mesh = TriangleMesh(mv, mf if mf is not None else np.zeros((0, 3), int), ml)
    planes = None
    planes_path = os.path.join(path, "planes_gt.txt")
    if os.path.exists(planes_path):
        kv = {}
        with open(planes_path) as fh:
            for line in fh:
                parts = line.split()
                if parts:
                    kv[parts[0]] = parts[1:]
        try:
            planes = PlaneIndicators(
                np.array(list(map(float, kv["n_g"]))),
                d_f=float(kv["d_f"][0]), d_c=float(kv["d_c"][0]),
                has_ceiling=bool(int(kv["has_ceiling"][0])),
            )
        except KeyError as e:
            raise ParseError(f"{planes_path}: missing field {e}")
    mode = "indoor"
    mode_path = os.path.join(path, "mode.txt")
    if os.path.exists(mode_path):
        mode = open(mode_path).read().strip()
    return SceneDataset(
        cameras=cameras,
        images=np.stack(images),
        depths=np.stack(depths),
        normals=np.stack(normals),
        sems=np.stack(sems),
        points=pts,
        point_labels=(labels if labels is not None
                      else np.zeros(len(pts), dtype=np.int64)),
        point_obs=point_obs,
        mesh_gt=mesh,
        planes_gt=planes,
        mode=mode,
    )

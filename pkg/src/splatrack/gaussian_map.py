"""3D Gaussian splat scenes: PLY I/O, covariances, SH colour, synthetic maps."""

from dataclasses import dataclass
import configparser
import os

import numpy as np


class MapFormatError(ValueError):
    pass


class EmptyMapError(ValueError):
    pass


class ShConfigError(ValueError):
    pass


SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

MAX_SH_DEGREE = 3


def sh_count(degree):
    return (degree + 1) ** 2


def sh_degree_for(count):
    for d in range(MAX_SH_DEGREE + 1):
        if sh_count(d) == count:
            return d
    raise ShConfigError(f"{count} SH coefficients per channel match no degree 0..3")


def quat_to_rotmat(q):
    """Rotation matrices from (w, x, y, z) quaternions, normalizing first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass(frozen=True)
class Gaussian3D:
    mean: np.ndarray        # (3,) world metres
    rotation: np.ndarray    # (4,) unit quaternion, w first
    scale: np.ndarray       # (3,) standard deviations in metres
    opacity: float
    sh_coeffs: np.ndarray   # ((degree+1)^2, 3)

    @property
    def sh_degree(self):
        return sh_degree_for(self.sh_coeffs.shape[0])


def covariance(g):
    """World covariance R diag(s^2) R^T of a single gaussian."""
    R = quat_to_rotmat(g.rotation)
    return R @ np.diag(np.asarray(g.scale, dtype=np.float64) ** 2) @ R.T


def covariances(rotations, scales):
    R = quat_to_rotmat(rotations)
    M = R * np.asarray(scales, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def sh_to_color(sh_coeffs, view_dir):
    """Evaluate real SH colour for one or many gaussians.

    ``sh_coeffs`` is (K, 3) or (N, K, 3); ``view_dir`` unit (3,) or (N, 3).
    Returns rgb clamped at zero after the +0.5 offset.
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    d = np.asarray(view_dir, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh = sh[None]
        d = d[None]
    degree = sh_degree_for(sh.shape[1])
    d = np.broadcast_to(d, (sh.shape[0], 3))
    result = SH_C0 * sh[:, 0]
    if degree > 0:
        x, y, z = (d[:, i:i + 1] for i in range(3))
        result = result - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
        if degree > 1:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            result = (result
                      + SH_C2[0] * xy * sh[:, 4]
                      + SH_C2[1] * yz * sh[:, 5]
                      + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
                      + SH_C2[3] * xz * sh[:, 7]
                      + SH_C2[4] * (xx - yy) * sh[:, 8])
            if degree > 2:
                result = (result
                          + SH_C3[0] * y * (3.0 * xx - yy) * sh[:, 9]
                          + SH_C3[1] * xy * z * sh[:, 10]
                          + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[:, 11]
                          + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, 12]
                          + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[:, 13]
                          + SH_C3[5] * z * (xx - yy) * sh[:, 14]
                          + SH_C3[6] * x * (xx - 3.0 * yy) * sh[:, 15])
    rgb = np.maximum(result + 0.5, 0.0)
    return rgb[0] if single else rgb


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


class GaussianMap:
    """Immutable struct-of-arrays container of gaussians.

    Arrays: ``means`` (N, 3), ``rotations`` (N, 4) unit wxyz quaternions,
    ``scales`` (N, 3) metres, ``opacities`` (N,), ``sh`` (N, K, 3).
    """

    def __init__(self, means, rotations, scales, opacities, sh):
        means = np.array(means, dtype=np.float64).reshape(-1, 3)
        if means.shape[0] == 0:
            raise EmptyMapError("gaussian map is empty")
        rotations = np.array(rotations, dtype=np.float64).reshape(-1, 4)
        norms = np.linalg.norm(rotations, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise MapFormatError("zero-norm quaternion")
        rotations = rotations / norms
        scales = np.array(scales, dtype=np.float64).reshape(-1, 3)
        if np.any(scales <= 0):
            raise MapFormatError("scales must be strictly positive")
        opacities = np.array(opacities, dtype=np.float64).reshape(-1)
        if np.any((opacities < 0) | (opacities > 1)):
            raise MapFormatError("opacity outside [0, 1]")
        sh = np.array(sh, dtype=np.float64)
        if sh.ndim == 2:
            sh = sh[:, None, :]
        self.sh_degree = sh_degree_for(sh.shape[1])
        n = means.shape[0]
        for name, arr in (("rotations", rotations), ("scales", scales),
                          ("opacities", opacities), ("sh", sh)):
            if arr.shape[0] != n:
                raise MapFormatError(f"{name} has {arr.shape[0]} rows, expected {n}")
        self.means = means
        self.rotations = rotations
        self.scales = scales
        self.opacities = opacities
        self.sh = sh
        for arr in (self.means, self.rotations, self.scales, self.opacities, self.sh):
            arr.setflags(write=False)
        self._cov = None

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, i):
        return Gaussian3D(self.means[i], self.rotations[i], self.scales[i],
                          float(self.opacities[i]), self.sh[i])

    @property
    def bounds(self):
        return self.means.min(axis=0), self.means.max(axis=0)

    @property
    def cov3d(self):
        if self._cov is None:
            cov = covariances(self.rotations, self.scales)
            cov.setflags(write=False)
            self._cov = cov
        return self._cov

    def colors(self, camera_center=None):
        """Per-gaussian rgb as seen from ``camera_center`` (ignored at degree 0)."""
        if self.sh_degree == 0:
            return np.maximum(SH_C0 * self.sh[:, 0] + 0.5, 0.0)
        dirs = self.means - np.asarray(camera_center, dtype=np.float64)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return sh_to_color(self.sh, dirs)

    @classmethod
    def from_gaussians(cls, gaussians):
        gaussians = list(gaussians)
        if not gaussians:
            raise EmptyMapError("no gaussians given")
        return cls([g.mean for g in gaussians], [g.rotation for g in gaussians],
                   [g.scale for g in gaussians], [g.opacity for g in gaussians],
                   np.stack([g.sh_coeffs for g in gaussians]))


# -- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4",
    "uint": "u4", "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1",
    "int16": "i2", "uint16": "u2", "int32": "i4", "uint32": "u4",
    "float32": "f4", "float64": "f8",
}


def _read_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise MapFormatError("not a PLY file")
    fmt = None
    vertex_count = None
    props = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise MapFormatError("unterminated PLY header")
        tokens = line.decode("ascii", "replace").split()
        if not tokens:
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                vertex_count = int(tokens[2])
            elif vertex_count is not None and props:
                # elements after the vertex block are ignored
                pass
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise MapFormatError("list properties are not supported in the vertex element")
            if tokens[1] not in _PLY_TYPES:
                raise MapFormatError(f"unknown PLY property type {tokens[1]!r}")
            props.append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
    if fmt != "binary_little_endian":
        raise MapFormatError(f"unsupported PLY format {fmt!r}; need binary_little_endian")
    if vertex_count is None:
        raise MapFormatError("PLY has no vertex element")
    return vertex_count, np.dtype(props)


def load_ply(path):
    """Load a map stored in the usual 3DGS training-output layout."""
    with open(path, "rb") as fh:
        count, dtype = _read_header(fh)
        data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype, count=count) \
            if count else np.zeros(0, dtype=dtype)
    names = set(dtype.names)
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    for name in required:
        if name not in names:
            raise MapFormatError(f"missing required PLY property {name!r}")
    if count == 0:
        raise EmptyMapError(f"{path}: PLY has zero vertices")
    n_rest = sum(1 for n in names if n.startswith("f_rest_"))
    if n_rest % 3:
        raise MapFormatError(f"f_rest count {n_rest} is not a multiple of 3")
    for i in range(n_rest):
        if f"f_rest_{i}" not in names:
            raise MapFormatError(f"missing required PLY property 'f_rest_{i}'")
    k = n_rest // 3 + 1
    try:
        sh_degree_for(k)
    except ShConfigError as exc:
        raise MapFormatError(f"{n_rest} f_rest fields: {exc}") from None

    def col(name):
        return data[name].astype(np.float64)

    means = np.stack([col("x"), col("y"), col("z")], axis=1)
    sh = np.zeros((count, k, 3))
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
        for j in range(1, k):
            sh[:, j, c] = col(f"f_rest_{c * (k - 1) + j - 1}")
    scales = np.exp(np.stack([col(f"scale_{i}") for i in range(3)], axis=1))
    opac = 1.0 / (1.0 + np.exp(-col("opacity")))
    rots = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    return GaussianMap(means, rots, scales, opac, sh)


def save_ply(gmap, path, dtype="f4"):
    """Write the map in the 3DGS layout (log scales, logit opacities)."""
    k = gmap.sh.shape[1]
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    n = len(gmap)
    rec = np.zeros(n, dtype=[(name, "<" + dtype) for name in names])
    for i, axis in enumerate("xyz"):
        rec[axis] = gmap.means[:, i]
    for c in range(3):
        rec[f"f_dc_{c}"] = gmap.sh[:, 0, c]
        for j in range(1, k):
            rec[f"f_rest_{c * (k - 1) + j - 1}"] = gmap.sh[:, j, c]
    op = np.clip(gmap.opacities, 1e-12, 1 - 1e-12)
    rec["opacity"] = np.log(op / (1.0 - op))
    for i in range(3):
        rec[f"scale_{i}"] = np.log(gmap.scales[:, i])
    for i in range(4):
        rec[f"rot_{i}"] = gmap.rotations[:, i]
    ply_type = {"f4": "float", "f8": "double"}[dtype]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {ply_type} {name}" for name in names]
    header.append("end_header")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


# -- synthetic scenes --------------------------------------------------------

@dataclass
class SceneSpec:
    """Parametric description of a synthetic map.

    ``kind`` is ``wall`` (random-texture grid), ``checker`` (alternating two
    colours) or ``list`` (explicit ``gaussians``).  Grids lie in the plane
    ``z = depth`` (plus ``depth_jitter`` noise) centred on (``center_x``, ``center_y``).
    """

    kind: str = "wall"
    nx: int = 10
    ny: int = 10
    spacing: float = 0.05
    depth: float = 2.0
    center_x: float = 0.0
    center_y: float = 0.0
    sigma: float = None          # in-plane std; defaults to spacing
    thickness: float = 0.005     # out-of-plane std
    depth_jitter: float = 0.02   # std of per-gaussian depth offsets; breaks depth-sort ties
    opacity: float = 0.9
    color_a: float = 0.2
    color_b: float = 0.8
    blob_scale: float = 3.0      # texture correlation length, in grid cells
    seed: int = 0
    gaussians: list = None

    @classmethod
    def from_config(cls, path_or_section):
        if isinstance(path_or_section, (str, os.PathLike)):
            parser = configparser.ConfigParser()
            if not parser.read(path_or_section):
                raise FileNotFoundError(path_or_section)
            section = parser["scene"]
        else:
            section = path_or_section
        kwargs = {}
        for name, typ in (("kind", str), ("nx", int), ("ny", int), ("spacing", float),
                          ("depth", float), ("center_x", float), ("center_y", float),
                          ("sigma", float), ("thickness", float), ("depth_jitter", float), ("opacity", float),
                          ("color_a", float), ("color_b", float), ("blob_scale", float),
                          ("seed", int)):
            if name in section:
                kwargs[name] = typ(section[name])
        return cls(**kwargs)


def _grid(spec):
    xs = (np.arange(spec.nx) - (spec.nx - 1) / 2.0) * spec.spacing + spec.center_x
    ys = (np.arange(spec.ny) - (spec.ny - 1) / 2.0) * spec.spacing + spec.center_y
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    means = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, spec.depth)], axis=1)
    return means


def _smooth_texture(spec, rng):
    from scipy.ndimage import gaussian_filter

    noise = rng.standard_normal((spec.ny, spec.nx))
    tex = gaussian_filter(noise, spec.blob_scale, mode="wrap") if spec.blob_scale > 0 else noise
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    return spec.color_a + (spec.color_b - spec.color_a) * tex


def make_synthetic_map(spec):
    """Build a deterministic map from a :class:`SceneSpec`."""
    if spec.kind == "list":
        if not spec.gaussians:
            raise EmptyMapError("scene spec lists no gaussians")
        return GaussianMap.from_gaussians(spec.gaussians)
    if spec.nx <= 0 or spec.ny <= 0:
        raise EmptyMapError("scene grid is empty")
    rng = np.random.default_rng(spec.seed)
    means = _grid(spec)
    n = means.shape[0]
    if spec.kind == "checker":
        ix, iy = np.meshgrid(np.arange(spec.nx), np.arange(spec.ny), indexing="xy")
        gray = np.where((ix + iy).ravel() % 2 == 0, spec.color_a, spec.color_b)
    elif spec.kind == "wall":
        gray = _smooth_texture(spec, rng).ravel()
    else:
        raise ValueError(f"unknown scene kind {spec.kind!r}")
    if spec.depth_jitter > 0:
        # equal depths make the blend order flip all at once under tiny rotations
        means[:, 2] += spec.depth_jitter * rng.standard_normal(n)
    sigma = spec.sigma if spec.sigma is not None else spec.spacing
    scales = np.tile([sigma, sigma, spec.thickness], (n, 1))
    rots = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    sh = rgb_to_sh_dc(np.repeat(gray[:, None], 3, axis=1))[:, None, :]
    return GaussianMap(means, rots, scales, np.full(n, spec.opacity), sh)


def random_map(n, seed=0, depth=(1.5, 3.0), spread=0.6, scale=(0.02, 0.12),
               opacity=(0.3, 0.9), sh_degree=0):
    """Random gaussians in front of an identity camera (test fixture)."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(*depth, n)
    xy = rng.uniform(-spread, spread, (n, 2)) * z[:, None]
    means = np.column_stack([xy, z])
    q = rng.standard_normal((n, 4))
    scales = rng.uniform(*scale, (n, 3))
    op = rng.uniform(*opacity, n)
    sh = np.zeros((n, sh_count(sh_degree), 3))
    sh[:, 0] = rgb_to_sh_dc(rng.uniform(0.1, 0.9, (n, 3)))
    if sh_degree:
        sh[:, 1:] = 0.1 * rng.standard_normal((n, sh_count(sh_degree) - 1, 3))
    return GaussianMap(means, q, scales, op, sh)

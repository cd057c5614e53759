"""Multi-scale particle network with an antisymmetric output layer.

Data flow of one forward pass (all in the gravity-aligned frame):

    preprocess   one CConv per particle type, union -> main set
    L1           main set -> every branch
    exchange     every branch -> every branch, summed per target (repeated)
    merge        every branch -> main set, summed
    head         ASCC on the fluid+boundary union (or a plain CConv for the
                 unconstrained variant)

Branch ``i`` works on points subsampled at scale ``2**-i`` and convolves
with the radius of the branch it reads from.
"""
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .geometry import farthest_point_indices, gravity_rotation, voxel_sample
from .layers import (
    ConvGeometry,
    ascc_apply,
    cconv_apply,
    conv_backward,
    fold_antisymmetric_grad,
    half_shape,
    materialize_antisymmetric,
    relu,
    relu_backward,
)
from .state import BOUNDARY, FLUID

HEADS = ("ascc", "cconv")
SAMPLERS = ("voxel", "fps")


@dataclass
class ArchitectureConfig:
    """Topology and scales of the network.

    ``radius`` (the main-branch convolution radius) is ``radius_scale *
    particle_radius``; branch ``i`` uses ``radius * 2**i`` and voxel size
    ``radius / 2 * 2**i``.
    """

    d: int = 2
    particle_radius: float = 0.005
    radius_scale: float = 4.0
    branches: int = 4
    l1_channels: tuple = (16, 8, 4, 4)
    exchange_channels: tuple = (32, 16, 8, 4)
    exchange_layers: int = 2
    merge_channels: int = 32
    pre_channels: int = 8
    kernel_size: int = 8
    ascc_kernel_size: int = 8
    output_scale: float = 1.0 / 128
    head: str = "ascc"
    sampler: str = "voxel"
    gravity_normalize: bool = True
    boundary_all_layers: bool = True

    def __post_init__(self):
        self.l1_channels = tuple(int(c) for c in self.l1_channels)
        self.exchange_channels = tuple(int(c) for c in self.exchange_channels)
        self.validate()

    @classmethod
    def default(cls, d, **overrides):
        if d == 1:
            base = dict(d=1, branches=2, l1_channels=(16, 8), exchange_channels=(32, 16), exchange_layers=1)
        else:
            base = dict(d=d)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"d must be 1, 2 or 3, got {self.d}")
        if self.branches < 1:
            raise ValueError("need at least one branch")
        if len(self.l1_channels) != self.branches or len(self.exchange_channels) != self.branches:
            raise ValueError("channel lists must have one entry per branch")
        if self.particle_radius <= 0 or self.radius_scale <= 0:
            raise ValueError("radii must be positive")
        if self.kernel_size < 2:
            raise ValueError("kernel_size must be at least 2")
        if self.ascc_kernel_size % 2:
            raise ValueError("the output kernel size must be even")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.exchange_layers < 0:
            raise ValueError("exchange_layers must be non-negative")
        return self

    @property
    def radius(self):
        return self.radius_scale * self.particle_radius

    def scale(self, i):
        return 2.0**-i

    def branch_radius(self, i):
        return self.radius / self.scale(i)

    def voxel_size(self, i):
        return 0.5 * self.radius / self.scale(i)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def param_shapes(config):
    """Name -> shape of every trainable tensor, in a fixed order."""
    d, K, B = config.d, config.kernel_size, config.branches
    grid = (K,) * d
    shapes = {}
    pre = config.pre_channels
    shapes["pre/fluid/w"] = grid + (2 * d, pre)
    shapes["pre/fluid/b"] = (pre,)
    shapes["pre/boundary/w"] = grid + (d, pre)
    shapes["pre/boundary/b"] = (pre,)
    prev = [2 * pre]
    for j in range(B):
        shapes[f"l1/{j}/w"] = grid + (prev[0], config.l1_channels[j])
        shapes[f"l1/{j}/b"] = (config.l1_channels[j],)
    prev = list(config.l1_channels)
    for layer in range(config.exchange_layers):
        for j in range(B):
            for k in range(B):
                shapes[f"x{layer}/{k}>{j}/w"] = grid + (prev[k], config.exchange_channels[j])
                shapes[f"x{layer}/{k}>{j}/b"] = (config.exchange_channels[j],)
        prev = list(config.exchange_channels)
    for k in range(B):
        shapes[f"merge/{k}/w"] = grid + (prev[k], config.merge_channels)
        shapes[f"merge/{k}/b"] = (config.merge_channels,)
    Ka = config.ascc_kernel_size
    if config.head == "ascc":
        shapes["head/half"] = half_shape(d, Ka, config.merge_channels, d)
    else:
        shapes["head/w"] = (Ka,) * d + (config.merge_channels, d)
        shapes["head/b"] = (d,)
    return shapes


def init_params(config, rng_seed=0, dtype=float):
    """Kernel weights uniform on [-0.05, 0.05], biases zero."""
    rng = np.random.default_rng(rng_seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("/b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.uniform(-0.05, 0.05, size=shape).astype(dtype)
    return params


def count_params(config):
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


@dataclass
class ForwardCache:
    config: object
    rotation: np.ndarray
    order: np.ndarray
    fluid_sorted: np.ndarray
    main_idx: np.ndarray
    branch_idx: list
    keys: list
    kernel_gain: float
    n: int
    steps: list = field(default_factory=list)
    head_out: np.ndarray | None = None
    acts: dict = field(default_factory=dict)
    # main-set index of the minimum along each axis; voxel centers move with it
    anchor: np.ndarray | None = None


def _canonical_order(x, types):
    keys = (types,) + tuple(x[:, a] for a in reversed(range(x.shape[1])))
    return np.lexsort(keys)


def _branch_sets(config, main_pts):
    """Query points of every branch; index arrays into the main set for FPS, else None."""
    sets, idx = [main_pts], [None]
    if len(main_pts) == 0:
        return sets + [main_pts] * (config.branches - 1), idx + [None] * (config.branches - 1)
    origin = main_pts.min(axis=0)
    for i in range(1, config.branches):
        vox = voxel_sample(main_pts, config.voxel_size(i), origin=origin)
        if config.sampler == "voxel":
            sets.append(vox)
            idx.append(None)
        else:
            sel = farthest_point_indices(main_pts, len(vox), start=0)
            sets.append(main_pts[sel])
            idx.append(sel)
    return sets, idx


class _Geometries:
    """Builds each convolution geometry once per forward pass."""

    def __init__(self, points):
        self.points = points
        self.cache = {}

    def get(self, src, dst, radius, K, window, skip_self=False):
        key = (src, dst, radius, K, window, skip_self)
        if key not in self.cache:
            self.cache[key] = ConvGeometry.build(self.points[src], self.points[dst], radius, K, window,
                                                 skip_self=skip_self)
        return self.cache[key]


def network_forward(state, params, config, gravity, kernel_gain=1.0):
    """Position residual for every fluid particle of a provisional state.

    Returns ``(dx_fluid, cache)``; ``cache.head_out`` holds the raw output on
    the whole fluid+boundary union (sorted canonically, unscaled, rotated).
    """
    d = config.d
    if state.d != d:
        raise ValueError(f"state has d={state.d} but the network expects d={d}")
    rot = gravity_rotation(gravity) if config.gravity_normalize else np.eye(d)
    x = state.positions @ rot.T
    order = _canonical_order(x, state.types)
    x = x[order]
    types = state.types[order]
    fluid = types == FLUID
    vel = (state.velocities[order] @ rot.T) * fluid[:, None]
    acc = (state.accelerations[order] @ rot.T) * fluid[:, None]
    nrm = (state.normals[order] @ rot.T) * (types == BOUNDARY)[:, None]

    main_idx = np.arange(len(x)) if config.boundary_all_layers else np.flatnonzero(fluid)
    main_pts = x[main_idx]
    sets, branch_idx = _branch_sets(config, main_pts)
    keys = ["all" if config.boundary_all_layers else 0] + list(range(1, config.branches))
    points = {"all": x}
    points.update({key: p for key, p in zip(keys, sets)})
    geo = _Geometries(points)
    K, R = config.kernel_size, config.radius
    gain = kernel_gain
    cache = ForwardCache(config, rot, order, fluid, main_idx, branch_idx, keys, gain, len(x))
    if len(main_pts):
        cache.anchor = np.argmin(main_pts, axis=0)
    steps = cache.steps

    def conv(name, feats, src, dst, radius, K=K, window="poly6"):
        g = geo.get(src, dst, radius, K, window)
        w = params[name + "/w"]
        out, c = cconv_apply(feats, g, w * gain if gain != 1.0 else w, params.get(name + "/b"))
        steps.append((name, src, dst, c))
        return out

    # type-aware preprocessing
    f_fluid = np.concatenate([vel, acc], axis=1)
    z_pre = np.concatenate(
        [conv("pre/fluid", f_fluid, "all", keys[0], R), conv("pre/boundary", nrm, "all", keys[0], R)], axis=1
    )
    h0 = relu(z_pre)
    pre_acts = {"z": z_pre}

    B = config.branches
    z_l1 = [conv(f"l1/{j}", h0, keys[0], keys[j], R) for j in range(B)]
    h = [relu(z) for z in z_l1]
    z_layers = [z_l1]
    for layer in range(config.exchange_layers):
        z_new = []
        for j in range(B):
            z = None
            for k in range(B):
                out = conv(f"x{layer}/{k}>{j}", h[k], keys[k], keys[j], config.branch_radius(k))
                z = out if z is None else z + out
            z_new.append(z)
        z_layers.append(z_new)
        h = [relu(z) for z in z_new]
    z_merge = None
    for k in range(B):
        out = conv(f"merge/{k}", h[k], keys[k], keys[0], config.branch_radius(k))
        z_merge = out if z_merge is None else z_merge + out
    h_main = relu(z_merge)
    if config.boundary_all_layers:
        h_all = h_main
    else:
        h_all = np.zeros((len(x), h_main.shape[1]), dtype=h_main.dtype)
        h_all[main_idx] = h_main

    Ka = config.ascc_kernel_size
    head_geom = geo.get("all", "all", R, Ka, "peak", skip_self=config.head == "ascc")
    if config.head == "ascc":
        full = materialize_antisymmetric(params["head/half"])
        out, c = ascc_apply(h_all, head_geom, full * gain if gain != 1.0 else full)
    else:
        w = params["head/w"]
        out, c = cconv_apply(h_all, head_geom, w * gain if gain != 1.0 else w, params["head/b"])
    steps.append(("head", "all", "all", c))
    cache.head_out = out
    cache.acts = dict(pre=pre_acts, layers=z_layers, merge=z_merge)

    dx_sorted = out * config.output_scale
    dx = np.empty_like(dx_sorted)
    dx[order] = dx_sorted
    dx = dx @ rot
    return dx[state.fluid], cache


def network_backward(grad_dx, cache, params):
    """Adjoint of :func:`network_forward`.

    Returns ``(param_grads, grad_positions, grad_velocities)``; the position
    and velocity gradients are full ``(N, d)`` arrays in world coordinates.
    """
    config = cache.config
    d, B, n = config.d, config.branches, cache.n
    rot, order, gain = cache.rotation, cache.order, cache.kernel_gain
    world_fluid = np.zeros(n, dtype=bool)
    world_fluid[order] = cache.fluid_sorted
    g_union = np.zeros((n, d))
    g_union[world_fluid] = grad_dx
    g_out = (g_union @ rot.T)[order] * config.output_scale
    steps = {name: (src, dst, c) for name, src, dst, c in cache.steps}
    grads = {}
    n_sets = {"all": n}
    for name, src, dst, c in cache.steps:
        n_sets[src] = c.geom.n_data
        n_sets[dst] = c.geom.n_query
    g_pos = {key: np.zeros((m, d)) for key, m in n_sets.items()}

    def back(name, g):
        src, dst, c = steps[name]
        r = conv_backward(g, c)
        g_pos[src] += r.data_pos
        g_pos[dst] += r.query_pos
        if name == "head" and config.head == "ascc":
            grads["head/half"] = fold_antisymmetric_grad(r.kernel) * gain
        else:
            grads[name + "/w"] = r.kernel * gain
            if r.bias is not None:
                grads[name + "/b"] = r.bias
        return r.features

    g_h_all = back("head", g_out)
    g_h_main = g_h_all if config.boundary_all_layers else g_h_all[cache.main_idx]
    g_z = relu_backward(g_h_main, cache.acts["merge"])
    g_h = [back(f"merge/{k}", g_z) for k in range(B)]
    layers = cache.acts["layers"]
    for layer in reversed(range(config.exchange_layers)):
        z_cur = layers[layer + 1]
        g_z = [relu_backward(g_h[j], z_cur[j]) for j in range(B)]
        g_prev = [None] * B
        for j in range(B):
            for k in range(B):
                gf = back(f"x{layer}/{k}>{j}", g_z[j])
                g_prev[k] = gf if g_prev[k] is None else g_prev[k] + gf
        g_h = g_prev
    g_h0 = None
    for j in range(B):
        gf = back(f"l1/{j}", relu_backward(g_h[j], layers[0][j]))
        g_h0 = gf if g_h0 is None else g_h0 + gf
    g_zpre = relu_backward(g_h0, cache.acts["pre"]["z"])
    pre = config.pre_channels
    g_ffluid = back("pre/fluid", g_zpre[:, :pre])
    back("pre/boundary", g_zpre[:, pre:])

    g_x = g_pos["all"]
    g_main = g_pos[cache.keys[0]]
    for i in range(1, B):
        if i not in g_pos:
            continue
        if cache.branch_idx[i] is not None:
            np.add.at(g_main, cache.branch_idx[i], g_pos[i])
        elif cache.anchor is not None:
            # voxel centers are the anchor plus a piecewise-constant offset
            g_main[cache.anchor, np.arange(d)] += g_pos[i].sum(axis=0)
    if cache.keys[0] != "all":
        np.add.at(g_x, cache.main_idx, g_main)
    g_vel_sorted = g_ffluid[:, :d] * cache.fluid_sorted[:, None]
    g_positions = np.empty_like(g_x)
    g_positions[order] = g_x
    g_velocities = np.empty_like(g_vel_sorted)
    g_velocities[order] = g_vel_sorted
    for name in params:
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
    return grads, g_positions @ rot, g_velocities @ rot

"""Flat ``key = value`` run configuration.

Keys are grouped by prefix: ``arch.*`` (:class:`ArchitectureConfig`),
``train.*`` (:class:`TrainConfig`), ``solver.*`` (:class:`SolverConfig`),
``scene.*`` (:class:`SceneSpec`) and ``eval.*`` (:class:`EvalOptions`), plus
the top-level ``seed`` and ``ablation``. Lines starting with ``#`` are
comments. Unknown keys are rejected. ``--dump-defaults`` prints every key.

Resolution order: defaults, then the ablation preset, then explicit keys.
Architecture defaults depend on ``arch.d`` (1D uses a two-branch stack).
"""
from dataclasses import MISSING, asdict, dataclass, fields, replace

from .network import ArchitectureConfig
from .reference_sph import SolverConfig
from .training import TrainConfig

SCENE_KINDS = ("column", "freefall", "drops2d")

# ablation variants, each adding one feature to the previous one
ABLATIONS = {
    "base": dict(arch=dict(head="cconv", branches=1, gravity_normalize=False, boundary_all_layers=False),
                 train=dict(warmup_max=0)),
    "ascc": dict(arch=dict(head="ascc", branches=1, gravity_normalize=False, boundary_all_layers=False),
                 train=dict(warmup_max=0)),
    "multiscale_fps": dict(arch=dict(head="ascc", sampler="fps", gravity_normalize=False,
                                     boundary_all_layers=False), train=dict(warmup_max=0)),
    "voxelize": dict(arch=dict(head="ascc", sampler="voxel", gravity_normalize=False,
                               boundary_all_layers=False), train=dict(warmup_max=0)),
    "preprocess": dict(arch=dict(head="ascc", sampler="voxel", gravity_normalize=False,
                                 boundary_all_layers=False), train=dict()),
    "ours": dict(arch=dict(head="ascc", sampler="voxel", gravity_normalize=True, boundary_all_layers=True),
                 train=dict()),
}


@dataclass
class SceneSpec:
    kind: str = "column"
    counts: tuple = tuple(range(1, 41))
    frames: int = 100
    height: float = 0.01
    gravity: float = -9.81
    drop_radius: float = 0.03
    separation: float = 0.1
    speed: float = 0.5

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"scene kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        if not self.counts or min(self.counts) < 1:
            raise ValueError("scene counts must be >= 1")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")


@dataclass
class EvalOptions:
    noise_ratio: float = 0.0
    sampling_ratio: float = 1.0
    bins: int = 64

    def __post_init__(self):
        if self.noise_ratio < 0:
            raise ValueError("noise_ratio must be non-negative")
        if not 0 < self.sampling_ratio <= 1:
            raise ValueError("sampling_ratio must lie in (0, 1]")
        if self.bins < 2:
            raise ValueError("bins must be at least 2")

    @property
    def kernel_gain(self):
        # fewer particles carry proportionally more of each convolution sum
        return 1.0 / self.sampling_ratio


SECTIONS = {
    "arch": ArchitectureConfig,
    "train": TrainConfig,
    "solver": SolverConfig,
    "scene": SceneSpec,
    "eval": EvalOptions,
}


class ConfigError(ValueError):
    pass


def _default_of(cls, name):
    for f in fields(cls):
        if f.name == name:
            if f.default is not MISSING:
                return f.default
            return f.default_factory()
    raise KeyError(name)


def parse_value(text, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return _parse_ints(text)
    return text


def _parse_ints(text):
    out = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            a, b = part.split("-", 1) if not part.startswith("-") else (part, None)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class RunConfig:
    arch: ArchitectureConfig
    train: TrainConfig
    solver: SolverConfig
    scene: SceneSpec
    eval: EvalOptions
    seed: int = 0
    ablation: str = "ours"

    @classmethod
    def defaults(cls, d=None):
        return cls.from_items({} if d is None else {"arch.d": str(d)})

    @classmethod
    def from_items(cls, items):
        items = dict(items)
        unknown = []
        explicit = {name: {} for name in SECTIONS}
        seed, ablation = 0, "ours"
        for key, raw in items.items():
            if key == "seed":
                seed = int(raw)
                continue
            if key == "ablation":
                ablation = raw.strip()
                continue
            section, _, name = key.partition(".")
            cls_ = SECTIONS.get(section)
            if cls_ is None or name not in [f.name for f in fields(cls_)]:
                unknown.append(key)
                continue
            try:
                explicit[section][name] = parse_value(raw, _default_of(cls_, name))
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {sorted(ABLATIONS)}, got {ablation!r}")
        preset = ABLATIONS[ablation]
        try:
            arch_explicit = dict(explicit["arch"])
            d = arch_explicit.pop("d", 2)
            arch_kw = dict(preset["arch"])
            if arch_kw.get("branches") == 1:
                arch_kw.update(l1_channels=(16,), exchange_channels=(32,))
            arch_kw.update(arch_explicit)
            arch = ArchitectureConfig.default(d, **arch_kw)
            train_kw = dict(preset["train"])
            train_kw.setdefault("seed", seed)
            train_kw.update(explicit["train"])
            train = TrainConfig(**train_kw)
            solver = SolverConfig(**explicit["solver"])
            scene = SceneSpec(**explicit["scene"])
            ev = EvalOptions(**explicit["eval"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(arch, train, solver, scene, ev, seed, ablation)

    @classmethod
    def parse(cls, text):
        items = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in items:
                raise ConfigError(f"line {lineno}: duplicate key {key}")
            items[key] = value
        return cls.from_items(items)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read())

    def items(self):
        out = [("seed", format_value(self.seed)), ("ablation", self.ablation)]
        for section in SECTIONS:
            for k, v in asdict(getattr(self, section)).items():
                out.append((f"{section}.{k}", format_value(v)))
        return out

    def dump(self):
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def with_train(self, **kw):
        return replace(self, train=replace(self.train, **kw))

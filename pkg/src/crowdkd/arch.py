"""Teacher and student networks, feature taps, channel aligners, checkpoints.

All networks expose the same seam: ``encode(x) -> (feature, taps)`` and a
``decoder`` module mapping ``feature`` to a one-channel density map. The
review wrapper and the distillation losses only rely on that seam.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import torch
from torch import nn

CHECKPOINT_VERSION = 1
ALLOWED_CPR = (Fraction(1), Fraction(1, 2), Fraction(1, 3), Fraction(1, 4), Fraction(1, 5))


class BuildError(ValueError):
    """Inconsistent network profile or teacher/student pairing."""


@dataclass(frozen=True)
class StageSpec:
    convs: int
    channels: int
    dilation: int = 1
    pool: bool = False  # 2x2 max-pool in front of the stage


@dataclass(frozen=True)
class NetworkProfile:
    kind: str
    stages: tuple
    decoder: tuple  # 3x3 conv widths ahead of the 1x1 output conv
    taps: tuple  # (stage, conv) pairs, both 1-based
    decoder_dilation: int = 1
    decoder_upsample: int = 1
    student_decoder: tuple = ()  # decoder widths of a cpr=1 student

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "decoder", tuple(self.decoder))
        object.__setattr__(self, "taps", tuple(tuple(t) for t in self.taps))
        object.__setattr__(self, "student_decoder", tuple(self.student_decoder or self.decoder))
        self.validate()

    def validate(self):
        if not self.stages:
            raise BuildError("profile needs at least one encoder stage")
        for s in self.stages:
            if s.convs < 1 or s.channels < 1 or s.dilation < 1:
                raise BuildError(f"bad stage {s}")
        for stage, conv in self.taps:
            if not (1 <= stage <= len(self.stages)) or not (1 <= conv <= self.stages[stage - 1].convs):
                raise BuildError(f"tap ({stage}, {conv}) does not reference an existing conv")
        if self.decoder_upsample < 1:
            raise BuildError("decoder_upsample must be >= 1")

    def stage_strides(self):
        strides, s = [], 1
        for st in self.stages:
            s *= 2 if st.pool else 1
            strides.append(s)
        return strides

    @property
    def encoder_stride(self) -> int:
        return self.stage_strides()[-1]

    @property
    def output_stride(self) -> int:
        return self.encoder_stride // self.decoder_upsample

    def tap_channels(self):
        return [self.stages[s - 1].channels for s, _ in self.taps]

    def tap_strides(self):
        strides = self.stage_strides()
        return [strides[s - 1] for s, _ in self.taps]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _vgg_stages(convs, widths, pools):
    return tuple(StageSpec(n, c, 1, p) for n, c, p in zip(convs, widths, pools))


CSRNET_BACKEND = (512, 512, 512, 256, 128, 64)


def get_profile(kind: str) -> NetworkProfile:
    """Built-in teacher profiles: ``toy``, ``csrnet_like`` and ``bl_like``."""
    if kind == "toy":
        return NetworkProfile(
            kind="toy",
            stages=_vgg_stages((2, 2, 3, 3), (16, 32, 64, 64), (False, True, True, True)),
            decoder=(64, 32),
            decoder_dilation=2,
            taps=((1, 1), (1, 2), (2, 2), (3, 3), (4, 3)),
        )
    if kind == "csrnet_like":
        # VGG16 front end (10 convs) + dilated back end
        return NetworkProfile(
            kind="csrnet_like",
            stages=_vgg_stages((2, 2, 3, 3), (64, 128, 256, 512), (False, True, True, True)),
            decoder=CSRNET_BACKEND,
            decoder_dilation=2,
            taps=((1, 1), (1, 2), (2, 2), (3, 3), (4, 3)),
        )
    if kind == "bl_like":
        # VGG19 (16 convs, 1/16) + 2x upsampling regression head
        return NetworkProfile(
            kind="bl_like",
            stages=_vgg_stages((2, 2, 4, 4, 4), (64, 128, 256, 512, 512),
                               (False, True, True, True, True)),
            decoder=(256, 128),
            decoder_upsample=2,
            taps=((1, 1), (1, 2), (2, 2), (3, 4), (4, 4), (5, 4)),
            student_decoder=CSRNET_BACKEND,
            decoder_dilation=1,
        )
    raise BuildError(f"unknown profile kind {kind!r}")


class Decoder(nn.Module):
    def __init__(self, in_channels, widths, dilation=1, upsample=1):
        super().__init__()
        self.in_channels = in_channels
        self.upsample = upsample
        layers = []
        c = in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=dilation, dilation=dilation), nn.ReLU(inplace=True)]
            c = w
        layers.append(nn.Conv2d(c, 1, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-3] != self.in_channels:
            raise ValueError(f"decoder expects {self.in_channels} channels, got {x.shape[-3]}")
        if self.upsample > 1:
            x = nn.functional.interpolate(x, scale_factor=self.upsample, mode="bilinear",
                                          align_corners=False)
        return self.body(x)


def init_weights(module: nn.Module):
    # default PyTorch init leaves toy VGG stacks stuck predicting the mean density
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class CountingNet(nn.Module):
    """Encoder-decoder counting network; subclasses implement ``encode``."""

    decoder: Decoder

    def encode(self, x):
        raise NotImplementedError

    def forward(self, x):
        feature, _ = self.encode(x)
        return self.decoder(feature)


class TeacherNet(CountingNet):
    def __init__(self, profile: NetworkProfile):
        super().__init__()
        profile.validate()
        self.profile = profile
        self.stages = nn.ModuleList()
        c = 3
        for st in profile.stages:
            convs = nn.ModuleList()
            for _ in range(st.convs):
                convs.append(nn.Conv2d(c, st.channels, 3, padding=st.dilation, dilation=st.dilation))
                c = st.channels
            self.stages.append(convs)
        self.decoder = Decoder(c, profile.decoder, profile.decoder_dilation, profile.decoder_upsample)
        self._tap_index = {t: i for i, t in enumerate(profile.taps)}
        init_weights(self)

    def encode(self, x):
        taps = [None] * len(self._tap_index)
        for si, (st, convs) in enumerate(zip(self.profile.stages, self.stages), start=1):
            if st.pool:
                x = nn.functional.max_pool2d(x, 2)
            for ci, conv in enumerate(convs, start=1):
                x = torch.relu(conv(x))
                k = self._tap_index.get((si, ci))
                if k is not None:
                    taps[k] = x
        return x, taps


def build_teacher(profile) -> TeacherNet:
    if isinstance(profile, str):
        profile = get_profile(profile)
    return TeacherNet(profile)


# Rows of the student encoder table: (expansion, blocks, stride); Layer0 is a plain conv.
STUDENT_LAYERS = ((None, 1, 1), (1, 1, 1), (6, 2, 2), (6, 3, 2), (6, 4, 2), (6, 4, 2))


def parse_cpr(value) -> Fraction:
    if isinstance(value, str) and "/" in value:
        num, den = value.split("/")
        value = Fraction(int(num), int(den))
    cpr = Fraction(value).limit_denominator(10)
    if cpr not in ALLOWED_CPR:
        raise BuildError(f"cpr must be one of 1, 1/2, 1/3, 1/4, 1/5; got {value}")
    return cpr


def scale_channels(base: int, cpr) -> int:
    # round half up, floor of 1
    return max(1, int(Fraction(base) * Fraction(cpr) + Fraction(1, 2)))


@dataclass(frozen=True)
class StudentSpec:
    cpr: Fraction = Fraction(1, 4)
    extra_stage5: bool = False

    def __post_init__(self):
        object.__setattr__(self, "cpr", parse_cpr(self.cpr))

    def layers(self):
        return STUDENT_LAYERS if self.extra_stage5 else STUDENT_LAYERS[:5]

    def to_dict(self):
        return {"cpr": str(self.cpr), "extra_stage5": self.extra_stage5}

    @classmethod
    def from_dict(cls, d):
        return cls(parse_cpr(d["cpr"]), bool(d.get("extra_stage5", False)))

    @classmethod
    def for_teacher(cls, profile: NetworkProfile, cpr=Fraction(1, 4)):
        return cls(cpr, extra_stage5=len(profile.taps) == 6)


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, kernel=3, stride=1, groups=1):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride, kernel // 2, groups=groups, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU6(inplace=True),
        )


class InvertedResidual(nn.Module):
    def __init__(self, cin, cout, stride, expansion):
        super().__init__()
        hidden = cin * expansion
        layers = []
        if expansion != 1:
            layers.append(ConvBNReLU(cin, hidden, kernel=1))
        layers += [
            ConvBNReLU(hidden, hidden, stride=stride, groups=hidden),
            nn.Conv2d(hidden, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        ]
        self.conv = nn.Sequential(*layers)
        self.use_residual = stride == 1 and cin == cout

    def forward(self, x):
        out = self.conv(x)
        return x + out if self.use_residual else out


class StudentNet(CountingNet):
    """MobileNetV2-style student; taps are the outputs of each layer's last block."""

    def __init__(self, spec: StudentSpec, teacher: NetworkProfile):
        super().__init__()
        self.spec = spec
        self.teacher_profile = teacher
        rows = spec.layers()
        if len(rows) != len(teacher.taps):
            raise BuildError(f"student has {len(rows)} tap layers but teacher has {len(teacher.taps)} taps")
        strides, s = [], 1
        for _, _, st in rows:
            s *= st
            strides.append(s)
        if strides != teacher.tap_strides():
            raise BuildError(f"student tap strides {strides} do not match teacher {teacher.tap_strides()}")
        if strides[-1] % teacher.output_stride:
            raise BuildError("student stride incompatible with teacher output resolution")

        self.channels = [scale_channels(c, spec.cpr) for c in teacher.tap_channels()]
        self.layers = nn.ModuleList()
        cin = 3
        for (t, n, st), cout in zip(rows, self.channels):
            if t is None:
                self.layers.append(ConvBNReLU(cin, cout, stride=st))
            else:
                blocks = [InvertedResidual(cin if i == 0 else cout, cout, st if i == 0 else 1, t)
                          for i in range(n)]
                self.layers.append(nn.Sequential(*blocks))
            cin = cout
        widths = [scale_channels(w, spec.cpr) for w in teacher.student_decoder]
        self.decoder = Decoder(cin, widths, dilation=2,
                               upsample=strides[-1] // teacher.output_stride)
        init_weights(self)

    def encode(self, x):
        taps = []
        for layer in self.layers:
            x = layer(x)
            taps.append(x)
        return x, taps


def build_student(spec: StudentSpec, teacher) -> StudentNet:
    if isinstance(teacher, str):
        teacher = get_profile(teacher)
    return StudentNet(spec, teacher)


def tap_features(network: CountingNet, x):
    """Ordered tap features of ``network`` on input ``x``."""
    _, taps = network.encode(x)
    if any(t is None for t in taps):
        raise RuntimeError("a registered tap was not produced by the forward pass")
    return taps


class ChannelAligner(nn.Conv2d):
    """1x1 conv lifting student tap channels to teacher width; training-only."""

    def __init__(self, in_channels, out_channels, bias=True):
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        super().__init__(in_channels, out_channels, 1, bias=bias)

    def identity_(self):
        if self.in_channels != self.out_channels:
            raise ValueError("identity init needs a square aligner")
        with torch.no_grad():
            self.weight.copy_(torch.eye(self.in_channels).view_as(self.weight))
            if self.bias is not None:
                self.bias.zero_()
        return self


def align_channels(features, aligners):
    return [a(f) for a, f in zip(aligners, features)]


def build_aligners(student: StudentNet, teacher_profile: NetworkProfile) -> nn.ModuleList:
    return nn.ModuleList(ChannelAligner(cs, ct)
                         for cs, ct in zip(student.channels, teacher_profile.tap_channels()))


def count_parameters(network: nn.Module, scope: str = "inference") -> int:
    """Trainable-array element count; ``inference`` scope drops aligner weights."""
    if scope not in ("inference", "training"):
        raise ValueError(f"unknown scope {scope!r}")
    skip = set()
    if scope == "inference":
        for m in network.modules():
            if isinstance(m, ChannelAligner):
                skip.update(id(p) for p in m.parameters())
    return sum(p.numel() for p in network.parameters() if id(p) not in skip)


def parameter_digest(network: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in network.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    network: CountingNet
    role: str
    review_rounds: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, network: CountingNet, review_rounds: int = 0, meta=None) -> Path:
    """Self-describing archive: descriptors + named parameter arrays (no aligners)."""
    if isinstance(network, StudentNet):
        role, profile, student = "student", network.teacher_profile, network.spec.to_dict()
    elif isinstance(network, TeacherNet):
        role, profile, student = "teacher", network.profile, None
    else:
        raise TypeError(f"cannot checkpoint {type(network).__name__}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "role": role,
        "profile": profile.to_dict(),
        "student": student,
        "review_rounds": int(review_rounds),
        "meta": dict(meta or {}),
        "state_dict": network.state_dict(),
    }, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    doc = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(doc, dict) or "version" not in doc:
        raise ValueError(f"{path} is not a checkpoint (no version field)")
    if doc["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc['version']}")
    profile = NetworkProfile.from_dict(doc["profile"])
    if doc["role"] == "student":
        net = StudentNet(StudentSpec.from_dict(doc["student"]), profile)
    else:
        net = TeacherNet(profile)
    net.load_state_dict(doc["state_dict"])
    return Checkpoint(net, doc["role"], doc.get("review_rounds", 0), doc.get("meta", {}))

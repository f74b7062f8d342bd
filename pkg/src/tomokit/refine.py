"""
2D refinement branches and the full imaging operator.

The pre-imaged magnitude volume (ranges, azimuths, L) is resliced twice:

    AE  one elevation x azimuth slice per range index
    RE  one elevation x range slice per azimuth index

Each stack goes through its own encoder-decoder with skip connections
(independent parameters), the results are reassembled into volumes and
merged elementwise (max by default, ties go to AE).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .autodiff import (Tensor, add, as_tensor, concat, maximum, no_grad, relu, reshape, transpose)
from .errors import CheckpointError, ShapeError
from .layers import (BatchNormState, batchnorm2d, concat_channels, conv2d, conv_transpose2d, crop,
                     he_uniform, maxpool2x2, pad_reflect, padded_size)
from .prenet import PreNetParams, pre_image_magnitude, prenet_init_from_geometry
from .simulator import EchoTensor, ReflectivityVolume

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (16, 32, 64, 128, 256)
ORIENTATIONS = ("AE", "RE")
MERGE_STRATEGIES = ("max", "sum")
# Slices per forward pass when refining without a graph.
INFERENCE_CHUNK = 32


@dataclass
class ConvBlock:
    """conv3x3 -> batchnorm -> ReLU; the conv has no bias since batchnorm shifts anyway."""
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState

    @classmethod
    def create(cls, rng: np.random.Generator, name: str, in_ch: int, out_ch: int) -> "ConvBlock":
        weight = he_uniform(rng, (out_ch, in_ch, 3, 3), fan_in=in_ch * 9)
        return cls(Tensor(weight, True, f"{name}.weight"),
                   Tensor(np.ones(out_ch), True, f"{name}.gamma"),
                   Tensor(np.zeros(out_ch), True, f"{name}.beta"),
                   BatchNormState.create(out_ch))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(batchnorm2d(conv2d(x, self.weight), self.gamma, self.beta, self.bn, training))

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.gamma, self.beta]

    def buffers(self) -> Dict[str, np.ndarray]:
        name = self.gamma.name[: -len(".gamma")]
        return {f"{name}.running_mean": self.bn.running_mean, f"{name}.running_var": self.bn.running_var}


@dataclass
class EncoderStage:
    first: ConvBlock
    second: ConvBlock


@dataclass
class DecoderStage:
    up_weight: Tensor
    up_bias: Tensor
    first: ConvBlock
    second: ConvBlock


@dataclass
class EncDecParams:
    """Encoder-decoder weights of one branch.

    Attributes:
        prefix: checkpoint name prefix ("ae" or "re")
        channels: channel count of each encoder stage; the decoder mirrors it
        encoder: stages 1..S, each two conv blocks followed by a 2x2 max pool
        decoder: stages 1..S, decoder stage i takes the skip of encoder stage S+1-i
        head_weight, head_bias: final 1x1 conv to one channel
    """
    prefix: str
    channels: Sequence[int]
    encoder: List[EncoderStage]
    decoder: List[DecoderStage]
    head_weight: Tensor
    head_bias: Tensor

    @property
    def stages(self) -> int:
        return len(self.encoder)

    @property
    def multiple(self) -> int:
        return 2 ** self.stages

    def blocks(self) -> List[ConvBlock]:
        found = []
        for stage in self.encoder:
            found.extend([stage.first, stage.second])
        for stage in self.decoder:
            found.extend([stage.first, stage.second])
        return found

    def parameters(self) -> List[Tensor]:
        params = []
        for stage in self.encoder:
            params.extend(stage.first.parameters() + stage.second.parameters())
        for stage in self.decoder:
            params.extend([stage.up_weight, stage.up_bias])
            params.extend(stage.first.parameters() + stage.second.parameters())
        params.extend([self.head_weight, self.head_bias])
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        buffers = {}
        for block in self.blocks():
            buffers.update(block.buffers())
        return buffers

    def load_buffers(self, tensors: Mapping[str, np.ndarray]) -> None:
        for block in self.blocks():
            for key in block.buffers():
                if key not in tensors:
                    raise CheckpointError(f"checkpoint is missing {key}")
            name = block.gamma.name[: -len(".gamma")]
            block.bn.running_mean = np.array(tensors[f"{name}.running_mean"], dtype=np.float64)
            block.bn.running_var = np.array(tensors[f"{name}.running_var"], dtype=np.float64)


def init_encdec(prefix: str, channels: Sequence[int] = DEFAULT_CHANNELS, in_channels: int = 1,
                seed: Union[int, np.random.SeedSequence] = 0) -> EncDecParams:
    """He-uniform convolutions, unit/zero batchnorm scale/shift, zero biases."""
    if not channels:
        raise ValueError("encoder-decoder needs at least one stage")
    rng = np.random.default_rng(seed)
    encoder = []
    previous = in_channels
    for i, ch in enumerate(channels, start=1):
        name = f"{prefix}.stage{i}.enc"
        encoder.append(EncoderStage(ConvBlock.create(rng, f"{name}.conv1", previous, ch),
                                    ConvBlock.create(rng, f"{name}.conv2", ch, ch)))
        previous = ch
    decoder = []
    stages = len(channels)
    for i in range(1, stages + 1):
        ch = channels[stages - i]
        name = f"{prefix}.stage{i}.dec"
        decoder.append(DecoderStage(
            Tensor(he_uniform(rng, (previous, ch, 2, 2), fan_in=previous), True, f"{name}.up.weight"),
            Tensor(np.zeros(ch), True, f"{name}.up.bias"),
            ConvBlock.create(rng, f"{name}.conv1", 2 * ch, ch),
            ConvBlock.create(rng, f"{name}.conv2", ch, ch)))
        previous = ch
    head = Tensor(he_uniform(rng, (1, previous, 1, 1), fan_in=previous), True, f"{prefix}.head.weight")
    return EncDecParams(prefix, tuple(channels), encoder, decoder, head,
                        Tensor(np.zeros(1), True, f"{prefix}.head.bias"))


@dataclass
class SliceStack:
    """Magnitude slices (S, 1, H, W) padded to the encoder's multiple, with the unpadded size."""
    data: Tensor
    height: int
    width: int
    orientation: str

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def padded_shape(self):
        return self.data.shape[2:]


def volume_to_slices(volume, orientation: str, multiple: int = 2 ** len(DEFAULT_CHANNELS)) -> SliceStack:
    """Reslice a (ranges, azimuths, L) volume and reflect-pad H and W up to `multiple`.

    Args:
        volume: complex ndarray (magnitudes are taken) or a real Tensor of magnitudes
        orientation: "AE" (one L x azimuths slice per range) or "RE" (one L x ranges slice per azimuth)
        multiple: padded sizes are multiples of this
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}, got '{orientation}'")
    if isinstance(volume, np.ndarray) and np.iscomplexobj(volume):
        volume = np.abs(volume)
    volume = as_tensor(volume)
    if volume.ndim != 3:
        raise ShapeError(f"volume must be (range, azimuth, elevation), got {volume.shape}")
    ranges, azimuths, bins = volume.shape
    if orientation == "AE":
        slices = reshape(transpose(volume, (0, 2, 1)), (ranges, 1, bins, azimuths))
    else:
        slices = reshape(transpose(volume, (1, 2, 0)), (azimuths, 1, bins, ranges))
    height, width = slices.shape[2], slices.shape[3]
    padded = pad_reflect(slices, padded_size(height, multiple) - height, padded_size(width, multiple) - width)
    return SliceStack(padded, height, width, orientation)


def slices_to_volume(stack: SliceStack) -> Tensor:
    """Crop the padding and reassemble the (ranges, azimuths, L) volume."""
    data = crop(stack.data, stack.height, stack.width)
    count = data.shape[0]
    planes = reshape(data, (count, stack.height, stack.width))
    if stack.orientation == "AE":
        return transpose(planes, (0, 2, 1))
    return transpose(planes, (2, 0, 1))


def encdec_forward(stack: SliceStack, params: EncDecParams, training: bool = False) -> SliceStack:
    """Encoder-decoder with skips; the output keeps the padded shape and is nonnegative.

    Raises:
        ShapeError: padded height or width not divisible by 2**stages
    """
    x = stack.data
    h, w = x.shape[2], x.shape[3]
    if h % params.multiple or w % params.multiple:
        raise ShapeError(f"slices of {h}x{w} are not divisible by {params.multiple}; "
                         "pad them with volume_to_slices first")
    skips = []
    for stage in params.encoder:
        x = stage.second(stage.first(x, training), training)
        skips.append(x)
        x = maxpool2x2(x)
    for i, stage in enumerate(params.decoder, start=1):
        x = conv_transpose2d(x, stage.up_weight, stage.up_bias)
        x = concat_channels(x, skips[-i])
        x = stage.second(stage.first(x, training), training)
    x = relu(conv2d(x, params.head_weight, params.head_bias))
    return SliceStack(x, stack.height, stack.width, stack.orientation)


def encdec_inference(stack: SliceStack, params: EncDecParams, chunk: int = INFERENCE_CHUNK) -> SliceStack:
    """Eval-mode forward in chunks of slices without recording a graph."""
    outputs = []
    with no_grad():
        for start in range(0, stack.count, chunk):
            part = SliceStack(Tensor(stack.data.data[start:start + chunk]), stack.height,
                              stack.width, stack.orientation)
            outputs.append(encdec_forward(part, params, training=False).data)
    return SliceStack(concat(outputs, axis=0), stack.height, stack.width, stack.orientation)


def merge(ae, re, strategy: str = "max") -> Tensor:
    """Elementwise max (ties to the AE volume) or sum of the two branch volumes."""
    ae, re = as_tensor(ae), as_tensor(re)
    if ae.shape != re.shape:
        raise ShapeError(f"branch volumes differ in shape: {ae.shape} vs {re.shape}")
    if strategy == "max":
        return maximum(ae, re)
    if strategy == "sum":
        return add(ae, re)
    raise ValueError(f"unknown merge strategy '{strategy}', expected one of {MERGE_STRATEGIES}")


Refiner = Callable[[SliceStack, EncDecParams, bool], SliceStack]


@dataclass
class TomoNet:
    """Pre-imaging network plus the two refinement branches."""
    prenet: PreNetParams
    ae: EncDecParams
    re: EncDecParams
    merge_strategy: str = "max"

    def __post_init__(self):
        if self.merge_strategy not in MERGE_STRATEGIES:
            raise ValueError(f"unknown merge strategy '{self.merge_strategy}'")
        if self.ae.multiple != self.re.multiple:
            raise ValueError("both branches need the same number of stages")

    @classmethod
    def create(cls, A, channels: Sequence[int] = DEFAULT_CHANNELS, K: int = 5,
               variant: str = "untied", mu0: Optional[float] = None, theta0: Optional[float] = None,
               eps: Optional[float] = None, merge_strategy: str = "max", seed: int = 0) -> "TomoNet":
        extra = {} if eps is None else {"eps": eps}
        prenet = prenet_init_from_geometry(A, mu0, theta0, K, variant, **extra)
        ae_seed, re_seed = np.random.SeedSequence(seed).spawn(2)
        return cls(prenet, init_encdec("ae", channels, seed=ae_seed),
                   init_encdec("re", channels, seed=re_seed), merge_strategy)

    @property
    def multiple(self) -> int:
        return self.ae.multiple

    def parameters(self, include_prenet: bool = True) -> List[Tensor]:
        params = self.prenet.parameters() if include_prenet else []
        return params + self.ae.parameters() + self.re.parameters()

    def named_tensors(self) -> Dict[str, np.ndarray]:
        """Every learned tensor and batchnorm buffer under its checkpoint name."""
        tensors = {p.name: p.data.copy() for p in self.parameters()}
        for buffers in (self.ae.buffers(), self.re.buffers()):
            tensors.update({k: v.copy() for k, v in buffers.items()})
        return tensors

    def load_tensors(self, tensors: Mapping[str, np.ndarray], require_refiners: bool = True) -> None:
        self.prenet.load_tensors(tensors)
        if not require_refiners and not any(k.startswith(("ae.", "re.")) for k in tensors):
            logger.info("checkpoint holds the pre-imaging network only; refiners keep their init")
            return
        for p in self.ae.parameters() + self.re.parameters():
            if p.name not in tensors:
                raise CheckpointError(f"checkpoint is missing {p.name}")
            if tensors[p.name].shape != p.shape:
                raise CheckpointError(f"{p.name} has shape {tensors[p.name].shape}, model expects {p.shape}")
            p.data = np.array(tensors[p.name], dtype=np.float64)
        self.ae.load_buffers(tensors)
        self.re.load_buffers(tensors)


@dataclass
class BranchOutputs:
    """Intermediate volumes of one forward pass, each (ranges, azimuths, L)."""
    pre: Tensor
    ae: Tensor
    re: Tensor
    merged: Tensor


def forward_branches(echoes: Union[EchoTensor, np.ndarray], model: TomoNet, training: bool = False,
                     refiner: Optional[Refiner] = None) -> BranchOutputs:
    """Differentiable pass: pre-image, reslice both ways, refine, reassemble, merge."""
    refiner = refiner or encdec_forward
    pre = pre_image_magnitude(echoes, model.prenet)
    volumes = {}
    for orientation, params in (("AE", model.ae), ("RE", model.re)):
        stack = volume_to_slices(pre, orientation, model.multiple)
        volumes[orientation] = slices_to_volume(refiner(stack, params, training))
    merged = merge(volumes["AE"], volumes["RE"], model.merge_strategy)
    return BranchOutputs(pre, volumes["AE"], volumes["RE"], merged)


def full_forward(echoes: Union[EchoTensor, np.ndarray], model: TomoNet,
                 refiner: Optional[Refiner] = None, chunk: int = INFERENCE_CHUNK) -> ReflectivityVolume:
    """Inference: the merged nonnegative volume, batchnorm in eval mode.

    Args:
        echoes: (N, ranges, azimuths)
        model: trained or freshly initialized network
        refiner: replaces encdec_forward (e.g. an identity for checks)
        chunk: slices per refiner call
    """
    geometry_id = echoes.geometry_id if isinstance(echoes, EchoTensor) else ""
    with no_grad():
        pre = pre_image_magnitude(echoes, model.prenet)
        volumes = []
        for orientation, params in (("AE", model.ae), ("RE", model.re)):
            stack = volume_to_slices(pre, orientation, model.multiple)
            if refiner is None:
                out = encdec_inference(stack, params, chunk)
            else:
                out = refiner(stack, params, False)
            volumes.append(slices_to_volume(out))
        merged = merge(volumes[0], volumes[1], model.merge_strategy)
    return ReflectivityVolume(np.array(merged.data), geometry_id=geometry_id)

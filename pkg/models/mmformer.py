"""
Multimodal Transformer for the JointSR Project
One shared network with two token streams (image, text), joint attention across them,
adaptive layer-norm timestep modulation, and two heads: image velocity and text logits.

Image stream = noisy HR patches followed by LR-condition patches (or a learned null
embedding when unconditional). Text stream = token embeddings of a possibly masked sequence.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from utils.exceptions import ModelConfigError, ShapeMismatchError

Time = Union[float, torch.Tensor]


@dataclass
class ModelConfig:
    """
    Toy-scale sizing of the transformer.

    ``vocab_size`` counts the real ids (glyphs + PAD); MASK is the extra id ``vocab_size``
    and never appears as a logit column.
    """

    image_size: Tuple[int, int] = (32, 128)
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 256
    depth: int = 6
    heads: int = 4
    vocab_size: int = 27
    seq_len: int = 24
    lr_scale: int = 4
    mlp_ratio: float = 4.0
    time_freq_dim: int = 128
    mask_id: Optional[int] = field(default=None)

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.mask_id is None:
            self.mask_id = self.vocab_size
        self.validate()

    def validate(self) -> None:
        """
        Raises:
            ModelConfigError: On inconsistent sizes
        """
        if len(self.image_size) != 2:
            raise ModelConfigError(f"image_size must be (H, W), got {self.image_size}")
        height, width = self.image_size
        if height % self.patch_size or width % self.patch_size:
            raise ModelConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.lr_scale not in (2, 4):
            raise ModelConfigError(f"lr_scale must be 2 or 4, got {self.lr_scale}")
        if height % self.lr_scale or width % self.lr_scale:
            raise ModelConfigError(f"image_size {self.image_size} not divisible by lr_scale {self.lr_scale}")
        if self.embed_dim % self.heads:
            raise ModelConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.time_freq_dim % 2:
            raise ModelConfigError(f"time_freq_dim must be even, got {self.time_freq_dim}")
        for name in ("patch_size", "channels", "embed_dim", "depth", "heads", "vocab_size", "seq_len"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mask_id != self.vocab_size:
            raise ModelConfigError(f"mask_id must equal vocab_size ({self.vocab_size}), got {self.mask_id}")

    @property
    def grid_size(self) -> Tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid_size
        return rows * cols

    @property
    def lr_size(self) -> Tuple[int, int]:
        return self.image_size[0] // self.lr_scale, self.image_size[1] // self.lr_scale

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["image_size"] = list(self.image_size)
        return data

    def parameter_count(self) -> int:
        """
        Closed-form number of trainable parameters of ``JointSRTransformer(self)``.

        With D = embed_dim, P = patch_size**2 * channels, n = num_patches, M = mlp_dim,
        F = time_freq_dim, N = vocab_size, L = seq_len:

            embeddings   2(DP + D) + nD + 2D + D + (N + 1)D + LD
            time MLP     2FD + D + D^2 + D
            per block    20D^2 + 22D + 4DM + 2M
            image head   2D^2 + 2D + DP + P
            text head    2D + DN + N
        """
        D, M, F_, N, L = self.embed_dim, self.mlp_dim, self.time_freq_dim, self.vocab_size, self.seq_len
        P = self.patch_size ** 2 * self.channels
        n = self.num_patches
        embeddings = 2 * (D * P + D) + n * D + 2 * D + D + (N + 1) * D + L * D
        time_mlp = 2 * F_ * D + D + D * D + D
        block = 20 * D * D + 22 * D + 4 * D * M + 2 * M
        image_head = 2 * D * D + 2 * D + D * P + P
        text_head = 2 * D + D * N + N
        return embeddings + time_mlp + self.depth * block + image_head + text_head


class ModelOutput(NamedTuple):
    velocity: torch.Tensor
    text_logits: torch.Tensor


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (B,) times in [0, 1]; returns (B, dim)."""
    half = dim // 2
    exponent = -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    angles = t.float().unsqueeze(1) * 1000.0 * torch.exp(exponent).unsqueeze(0)
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def cross_modality_mask(n_img: int, n_txt: int, device: Union[str, torch.device] = "cpu") -> torch.Tensor:
    """Boolean (n_img + n_txt) square mask allowing attention only within each stream."""
    kinds = torch.cat([torch.zeros(n_img, dtype=torch.bool), torch.ones(n_txt, dtype=torch.bool)]).to(device)
    return kinds.unsqueeze(0) == kinds.unsqueeze(1)


class JointAttention(nn.Module):
    """Per-stream Q/K/V and output projections around one shared self-attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ModelConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv_img = nn.Linear(dim, 3 * dim)
        self.qkv_txt = nn.Linear(dim, 3 * dim)
        self.proj_img = nn.Linear(dim, dim)
        self.proj_txt = nn.Linear(dim, dim)

    def _split_heads(self, qkv: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        batch, tokens, _ = qkv.shape
        qkv = qkv.reshape(batch, tokens, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return qkv.unbind(0)

    def forward(self, img_tokens: torch.Tensor, txt_tokens: torch.Tensor,
                attn_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        if img_tokens.shape[-1] != self.dim or txt_tokens.shape[-1] != self.dim:
            raise ShapeMismatchError(
                f"Token width must be {self.dim}, got image {img_tokens.shape[-1]} and text {txt_tokens.shape[-1]}"
            )
        n_img = img_tokens.shape[1]
        q_img, k_img, v_img = self._split_heads(self.qkv_img(img_tokens))
        q_txt, k_txt, v_txt = self._split_heads(self.qkv_txt(txt_tokens))

        q = torch.cat([q_img, q_txt], dim=2)
        k = torch.cat([k_img, k_txt], dim=2)
        v = torch.cat([v_img, v_txt], dim=2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        out = out.transpose(1, 2).reshape(img_tokens.shape[0], -1, self.dim)

        return self.proj_img(out[:, :n_img]), self.proj_txt(out[:, n_img:])


def joint_attention_block(img_tokens: torch.Tensor, txt_tokens: torch.Tensor, attention: JointAttention,
                          attn_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Joint attention over the concatenation of both streams.

    Args:
        img_tokens: (B, n_img, D)
        txt_tokens: (B, n_txt, D); may be empty along the token axis
        attention: Module holding the per-stream projections
        attn_mask: Optional boolean (n_img + n_txt) square mask, True = may attend

    Returns:
        (image tokens, text tokens) with the input shapes

    Raises:
        ShapeMismatchError: If the streams' widths differ from the module width
    """
    return attention(img_tokens, txt_tokens, attn_mask=attn_mask)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))


class MMDiTBlock(nn.Module):
    """Two-stream transformer block with adaLN-zero modulation per stream."""

    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.modulation_img = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        self.modulation_txt = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        self.norm1_img = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.norm1_txt = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = JointAttention(dim, heads)
        self.norm2_img = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.norm2_txt = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp_img = FeedForward(dim, mlp_dim)
        self.mlp_txt = FeedForward(dim, mlp_dim)

    def forward(self, img_tokens: torch.Tensor, txt_tokens: torch.Tensor,
                c: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        shift1_i, scale1_i, gate1_i, shift2_i, scale2_i, gate2_i = self.modulation_img(c).chunk(6, dim=1)
        shift1_t, scale1_t, gate1_t, shift2_t, scale2_t, gate2_t = self.modulation_txt(c).chunk(6, dim=1)

        img_attn, txt_attn = joint_attention_block(
            modulate(self.norm1_img(img_tokens), shift1_i, scale1_i),
            modulate(self.norm1_txt(txt_tokens), shift1_t, scale1_t),
            self.attn,
        )
        img_tokens = img_tokens + gate1_i.unsqueeze(1) * img_attn
        txt_tokens = txt_tokens + gate1_t.unsqueeze(1) * txt_attn

        img_tokens = img_tokens + gate2_i.unsqueeze(1) * self.mlp_img(modulate(self.norm2_img(img_tokens), shift2_i, scale2_i))
        txt_tokens = txt_tokens + gate2_t.unsqueeze(1) * self.mlp_txt(modulate(self.norm2_txt(txt_tokens), shift2_t, scale2_t))
        return img_tokens, txt_tokens


class JointSRTransformer(nn.Module):
    """
    Shared image/text denoiser.

    ``forward`` returns both heads in one pass: the image velocity for the flow
    branch and logits over the real vocabulary for the absorbing text branch.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        D = config.embed_dim

        self.img_patch = nn.Conv2d(config.channels, D, kernel_size=config.patch_size, stride=config.patch_size)
        self.lr_patch = nn.Conv2d(config.channels, D, kernel_size=config.patch_size, stride=config.patch_size)
        self.img_pos = nn.Parameter(torch.zeros(1, config.num_patches, D))
        self.stream_type = nn.Parameter(torch.zeros(2, D))
        self.null_lr = nn.Parameter(torch.zeros(1, 1, D))

        self.txt_embed = nn.Embedding(config.vocab_size + 1, D)
        self.txt_pos = nn.Parameter(torch.zeros(1, config.seq_len, D))

        self.time_mlp = nn.Sequential(
            nn.Linear(2 * config.time_freq_dim, D),
            nn.SiLU(),
            nn.Linear(D, D),
        )
        self.blocks = nn.ModuleList(MMDiTBlock(D, config.heads, config.mlp_dim) for _ in range(config.depth))

        self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(D, 2 * D))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.velocity_head = nn.Linear(D, config.patch_size ** 2 * config.channels)
        self.text_norm = nn.LayerNorm(D)
        self.text_head = nn.Linear(D, config.vocab_size)

        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Truncated-normal (std 0.02) projections and embeddings, zero modulation outputs."""
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.trunc_normal_(module.weight, std=0.02)
        for param in (self.img_pos, self.txt_pos, self.stream_type, self.null_lr):
            nn.init.trunc_normal_(param, std=0.02)
        for block in self.blocks:
            for modulation in (block.modulation_img, block.modulation_txt):
                nn.init.zeros_(modulation[-1].weight)
                nn.init.zeros_(modulation[-1].bias)
        nn.init.zeros_(self.final_modulation[-1].weight)
        nn.init.zeros_(self.final_modulation[-1].bias)

    @property
    def device(self) -> torch.device:
        return self.img_pos.device

    def null_text(self, batch_size: int) -> torch.Tensor:
        """All-MASK text used by the unconditional branch."""
        return torch.full((batch_size, self.config.seq_len), self.config.mask_id, dtype=torch.long, device=self.device)

    def _check_inputs(self, x_img: torch.Tensor, x_txt: torch.Tensor, cond_lr: Optional[torch.Tensor]) -> None:
        cfg = self.config
        expected = (cfg.channels, *cfg.image_size)
        if x_img.dim() != 4 or tuple(x_img.shape[1:]) != expected:
            raise ModelConfigError(f"Image input must be (B, {expected}), got {tuple(x_img.shape)}")
        if x_txt.dim() != 2 or x_txt.shape != (x_img.shape[0], cfg.seq_len):
            raise ModelConfigError(f"Text input must be ({x_img.shape[0]}, {cfg.seq_len}), got {tuple(x_txt.shape)}")
        if x_txt.numel() and (int(x_txt.min()) < 0 or int(x_txt.max()) > cfg.mask_id):
            raise ModelConfigError(f"Token ids must lie in [0, {cfg.mask_id}]")
        if cond_lr is not None:
            expected_lr = (x_img.shape[0], cfg.channels, *cfg.lr_size)
            if tuple(cond_lr.shape) != expected_lr:
                raise ModelConfigError(f"LR condition must be {expected_lr}, got {tuple(cond_lr.shape)}")

    def _time_vector(self, t: Time, batch_size: int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float32, device=self.device)
        if t.dim() == 0:
            t = t.expand(batch_size)
        return t.reshape(batch_size)

    def _patchify(self, conv: nn.Conv2d, image: torch.Tensor) -> torch.Tensor:
        return conv(image).flatten(2).transpose(1, 2)

    def _unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        rows, cols = cfg.grid_size
        p, C = cfg.patch_size, cfg.channels
        x = tokens.reshape(tokens.shape[0], rows, cols, p, p, C)
        x = torch.einsum("bhwpqc->bchpwq", x)
        return x.reshape(tokens.shape[0], C, rows * p, cols * p)

    def _lr_tokens(self, cond_lr: Optional[torch.Tensor], lr_keep: Optional[torch.Tensor],
                   batch_size: int) -> torch.Tensor:
        null = self.null_lr.expand(batch_size, self.config.num_patches, -1)
        if cond_lr is None:
            return null
        upsampled = F.interpolate(cond_lr, size=self.config.image_size, mode="bicubic", align_corners=False)
        tokens = self._patchify(self.lr_patch, upsampled) + self.img_pos
        if lr_keep is not None:
            tokens = torch.where(lr_keep.view(-1, 1, 1).to(torch.bool), tokens, null)
        return tokens

    def forward(self, x_img: torch.Tensor, t_img: Time, x_txt: torch.Tensor, t_txt: Time,
                cond_lr: Optional[torch.Tensor] = None, lr_keep: Optional[torch.Tensor] = None) -> ModelOutput:
        """
        Predict the image velocity and the text posterior logits.

        Args:
            x_img: (B, C, H, W) image interpolant
            t_img: Image time, scalar or (B,)
            x_txt: (B, L) token ids, MASK allowed
            t_txt: Text time, scalar or (B,)
            cond_lr: (B, C, H / lr_scale, W / lr_scale) LR condition or None for the null condition
            lr_keep: Optional (B,) bool; False rows use the null LR embedding

        Returns:
            ModelOutput(velocity (B, C, H, W), text_logits (B, L, vocab_size))

        Raises:
            ModelConfigError: If inputs disagree with the model config
        """
        self._check_inputs(x_img, x_txt, cond_lr)
        batch_size = x_img.shape[0]
        n = self.config.num_patches

        noisy = self._patchify(self.img_patch, x_img) + self.img_pos + self.stream_type[0]
        lr = self._lr_tokens(cond_lr, lr_keep, batch_size) + self.stream_type[1]
        img_tokens = torch.cat([noisy, lr], dim=1)
        txt_tokens = self.txt_embed(x_txt) + self.txt_pos

        freq = self.config.time_freq_dim
        c = self.time_mlp(torch.cat([
            timestep_embedding(self._time_vector(t_img, batch_size), freq),
            timestep_embedding(self._time_vector(t_txt, batch_size), freq),
        ], dim=-1).to(self.img_pos.dtype))

        for block in self.blocks:
            img_tokens, txt_tokens = block(img_tokens, txt_tokens, c)

        shift, scale = self.final_modulation(c).chunk(2, dim=1)
        velocity = self._unpatchify(self.velocity_head(modulate(self.final_norm(img_tokens[:, :n]), shift, scale)))
        text_logits = self.text_head(self.text_norm(txt_tokens))
        return ModelOutput(velocity=velocity, text_logits=text_logits)


def build_model(config: ModelConfig, generator: Optional[torch.Generator] = None) -> JointSRTransformer:
    """
    Construct a model; with a generator, initialization is reproducible independent of global RNG state.
    """
    if generator is None:
        return JointSRTransformer(config)
    fork_seed = int(torch.randint(0, 2 ** 62, (1,), generator=generator))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(fork_seed)
        return JointSRTransformer(config)

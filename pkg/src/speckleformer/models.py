"""The model zoo: CNN, ViT, Swin (plain and residual), importance-weighted
ViT, and graph-attention ViT with selectable adjacency strategies.

Every variant maps a (H, W, 3) image in [0, 1] to a scalar regression
output. Forward passes run in standardized target units; ``predict``
applies the training-set de-standardization. Construction is fully
deterministic given ``ModelConfig.seed``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import graphs
from .errors import ConfigError, ContractError, ShapeError
from .tensor import (ParameterStore, Tensor, conv2d_valid, dropout,
                     layer_norm, maxpool2d, relu, reshape, take, transpose)

VARIANTS = ("cnn", "vit", "swin", "swin_residual", "importance_vit", "gat_vit")

_GAT_FAMILY = ("gat_vit",)
_TRANSFORMER_FAMILY = ("vit", "importance_vit", "gat_vit", "swin", "swin_residual")


@dataclass
class ModelConfig:
    variant: str = "vit"
    image_size: int = 126
    patch_size: int = 16
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    ffn_dim: int = 128
    head_hidden: int = 2048
    dropout_rate: float = 0.5
    window_size: int = 4
    shift_size: int = 2
    adjacency_strategy: str = "full"
    sigma: float = 1.0
    cnn_filters: tuple[int, ...] = (64, 256, 192, 128)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.cnn_filters, list):
            self.cnn_filters = tuple(self.cnn_filters)

    def grid_size(self) -> int:
        if self.image_size < self.patch_size:
            raise ConfigError(f"image size {self.image_size} smaller than "
                              f"patch size {self.patch_size}")
        return (self.image_size - self.patch_size) // self.patch_size + 1

    def num_patches(self) -> int:
        g = self.grid_size()
        return g * g

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; "
                              f"expected one of {VARIANTS}")
        if self.variant == "cnn":
            h = self.image_size
            for _ in self.cnn_filters[:self.num_blocks]:
                if h < 3:
                    raise ConfigError(f"image size {self.image_size} too small "
                                      f"for {self.num_blocks} conv stages")
                h = (h - 2) // 2
            if h < 1:
                raise ConfigError(f"image size {self.image_size} too small "
                                  f"for {self.num_blocks} conv stages")
            return
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        g = self.grid_size()
        if self.variant in ("swin", "swin_residual"):
            if g % self.window_size != 0:
                raise ConfigError(f"patch grid {g}x{g} not tiled by "
                                  f"window size {self.window_size}")
            if not 0 <= self.shift_size < self.window_size:
                raise ConfigError(f"shift_size {self.shift_size} must lie in "
                                  f"[0, window_size)")
        if self.variant == "gat_vit":
            if self.adjacency_strategy not in graphs.ADJACENCY_STRATEGIES:
                raise ConfigError(f"unknown adjacency strategy "
                                  f"{self.adjacency_strategy!r}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_filters"] = list(self.cnn_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def default_config(variant: str, **overrides) -> ModelConfig:
    """Paper-scale defaults per variant; keyword overrides win."""
    if variant in ("swin", "swin_residual"):
        base = dict(variant=variant, image_size=128, patch_size=8,
                    embed_dim=60, num_heads=6, ffn_dim=512, head_hidden=512,
                    dropout_rate=0.0)
    elif variant == "cnn":
        base = dict(variant=variant)
    else:
        base = dict(variant=variant)
    base.update(overrides)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 bound: float = 2.0) -> np.ndarray:
    """Normal draws with |z| > bound resampled, then scaled by std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def _window_permutation(grid: int, window: int) -> np.ndarray:
    idx = np.arange(grid * grid).reshape(grid, grid)
    tiles = idx.reshape(grid // window, window, grid // window, window)
    return tiles.transpose(0, 2, 1, 3).reshape(-1)


class Model:
    """One architecture instance: parameters, config, and forward passes.

    ``forward`` returns standardized-scale outputs of shape (B,);
    ``predict``/``predict_batch`` return degrees Celsius using the
    de-standardization constants set by training (identity before).
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params = ParameterStore()
        self.target_mean = 0.0
        self.target_std = 1.0
        if config.variant in _TRANSFORMER_FAMILY:
            g = config.grid_size()
            self.grid = (g, g)
        else:
            self.grid = None
        self._build(np.random.default_rng(config.seed))

    # -- construction ---------------------------------------------------

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        if cfg.variant == "cnn":
            self._build_cnn(rng)
            return
        d = cfg.embed_dim
        p = cfg.patch_size
        n = cfg.num_patches()
        add = self.params.add
        add("patch/kernel", trunc_normal(rng, (p, p, 3, d)))
        add("patch/bias", np.zeros(d))
        add("pos", trunc_normal(rng, (n, d)))
        if cfg.variant == "importance_vit":
            add("importance", np.zeros(n))
        if cfg.variant in _GAT_FAMILY:
            add("gat/W", trunc_normal(rng, (d, d)))
            add("gat/a", trunc_normal(rng, (2 * d,)))
            if cfg.adjacency_strategy == "learnable":
                graphs.learnable_adjacency(self.params, n)
        for b in range(cfg.num_blocks):
            add(f"block{b}/ln1/gamma", np.ones(d))
            add(f"block{b}/ln1/beta", np.zeros(d))
            for w in ("Wq", "Wk", "Wv", "Wo"):
                add(f"block{b}/attn/{w}", trunc_normal(rng, (d, d)))
            for bias in ("bq", "bk", "bv", "bo"):
                add(f"block{b}/attn/{bias}", np.zeros(d))
            add(f"block{b}/ln2/gamma", np.ones(d))
            add(f"block{b}/ln2/beta", np.zeros(d))
            add(f"block{b}/ffn/W1", trunc_normal(rng, (d, cfg.ffn_dim)))
            add(f"block{b}/ffn/b1", np.zeros(cfg.ffn_dim))
            add(f"block{b}/ffn/W2", trunc_normal(rng, (cfg.ffn_dim, d)))
            add(f"block{b}/ffn/b2", np.zeros(d))
        add("head/W1", trunc_normal(rng, (d, cfg.head_hidden)))
        add("head/b1", np.zeros(cfg.head_hidden))
        add("head/W2", trunc_normal(rng, (cfg.head_hidden, 1)))
        add("head/b2", np.zeros(1))

    def _build_cnn(self, rng: np.random.Generator) -> None:
        cfg = self.config
        add = self.params.add
        cin = 3
        h = cfg.image_size
        for i, cout in enumerate(cfg.cnn_filters[:cfg.num_blocks]):
            add(f"conv{i}/kernel", trunc_normal(rng, (3, 3, cin, cout)))
            add(f"conv{i}/bias", np.zeros(cout))
            cin = cout
            h = (h - 2) // 2
        flat = h * h * cin
        add("head/W1", trunc_normal(rng, (flat, cfg.head_hidden)))
        add("head/b1", np.zeros(cfg.head_hidden))
        add("head/W2", trunc_normal(rng, (cfg.head_hidden, 1)))
        add("head/b2", np.zeros(1))

    # -- shared pieces ----------------------------------------------------

    def _as_batch(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 4:
            raise ShapeError(f"expected (B, H, W, 3) or (H, W, 3), got {x.shape}")
        s = self.config.image_size
        if x.shape[1:] != (s, s, 3):
            raise ConfigError(f"model expects {s}x{s}x3 input, got "
                              f"{tuple(x.shape[1:])}")
        return x

    def embed(self, images) -> Tensor:
        """Patch projection plus positional embedding: (B, N, d)."""
        x = self._as_batch(images)
        cfg = self.config
        P = self.params
        patches = conv2d_valid(x, P["patch/kernel"], stride=cfg.patch_size)
        b = patches.shape[0]
        seq = reshape(patches, (b, cfg.num_patches(), cfg.embed_dim))
        return seq + P["patch/bias"] + P["pos"]

    def _mhsa(self, x: Tensor, prefix: str, importance: Tensor | None,
              capture: list | None, block: int) -> Tensor:
        cfg = self.config
        P = self.params
        heads, d = cfg.num_heads, cfg.embed_dim
        hd = d // heads
        lead = x.shape[:-2]
        n = x.shape[-2]
        k = len(lead)
        split_perm = tuple(range(k)) + (k + 1, k, k + 2)

        def split_heads(t: Tensor) -> Tensor:
            return transpose(reshape(t, lead + (n, heads, hd)), split_perm)

        q = split_heads(x @ P[f"{prefix}/Wq"] + P[f"{prefix}/bq"])
        kk = split_heads(x @ P[f"{prefix}/Wk"] + P[f"{prefix}/bk"])
        v = split_heads(x @ P[f"{prefix}/Wv"] + P[f"{prefix}/bv"])
        attn, ctx = graphs.scaled_dot_attention(q, kk, v, importance)
        if capture is not None:
            capture.append({"block": block, "attn": attn.data.copy()})
        merged = reshape(transpose(ctx, split_perm), lead + (n, d))
        return merged @ P[f"{prefix}/Wo"] + P[f"{prefix}/bo"]

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        P = self.params
        h = relu(x @ P[f"{prefix}/W1"] + P[f"{prefix}/b1"])
        return h @ P[f"{prefix}/W2"] + P[f"{prefix}/b2"]

    def _vit_block(self, x: Tensor, b: int, importance: Tensor | None,
                   capture: list | None) -> Tensor:
        P = self.params
        xn = layer_norm(x, P[f"block{b}/ln1/gamma"], P[f"block{b}/ln1/beta"])
        u = x + self._mhsa(xn, f"block{b}/attn", importance, capture, b)
        un = layer_norm(u, P[f"block{b}/ln2/gamma"], P[f"block{b}/ln2/beta"])
        return u + self._ffn(un, f"block{b}/ffn")

    # -- swin -------------------------------------------------------------

    def _swin_block(self, seq: Tensor, b: int, capture: list | None) -> Tensor:
        cfg = self.config
        P = self.params
        g = self.grid[0]
        ws = cfg.window_size
        n = g * g
        nw = (g // ws) ** 2
        part = _window_permutation(g, ws)
        if b % 2 == 1 and cfg.shift_size > 0:
            shift = np.roll(np.arange(n).reshape(g, g),
                            (-cfg.shift_size, -cfg.shift_size), (0, 1)).reshape(-1)
            comb = shift[part]
        else:
            comb = part
        batch = seq.shape[0]
        xw = reshape(take(seq, comb, axis=1), (batch, nw, ws * ws, cfg.embed_dim))
        xn = layer_norm(xw, P[f"block{b}/ln1/gamma"], P[f"block{b}/ln1/beta"])
        win_capture: list | None = [] if capture is not None else None
        u = self._mhsa(xn, f"block{b}/attn", None, win_capture, b)
        if capture is not None:
            attn = win_capture[0]["attn"]        # (B, nw, H, ws^2, ws^2)
            full = np.zeros((batch, cfg.num_heads, n, n))
            for w in range(nw):
                idx = comb[w * ws * ws:(w + 1) * ws * ws]
                full[:, :, idx[:, None], idx[None, :]] = attn[:, w]
            capture.append({"block": b, "attn": full})
        un = layer_norm(u, P[f"block{b}/ln2/gamma"], P[f"block{b}/ln2/beta"])
        y = self._ffn(un, f"block{b}/ffn")       # no intra-block residuals
        flat = reshape(y, (batch, n, cfg.embed_dim))
        return take(flat, np.argsort(comb), axis=1)

    # -- forward ------------------------------------------------------------

    def forward_features(self, images, *, capture: list | None = None) -> Tensor:
        """Patch sequence after all attention stages: (B, N, d)."""
        cfg = self.config
        if cfg.variant == "cnn":
            raise ContractError("cnn variant has no patch sequence")
        seq = self.embed(images)
        if cfg.variant in _GAT_FAMILY:
            seq = self._gat_layer(seq)
        if cfg.variant in ("swin", "swin_residual"):
            seq0 = seq
            for b in range(cfg.num_blocks):
                seq = self._swin_block(seq, b, capture)
            if cfg.variant == "swin_residual":
                seq = seq + seq0
            return seq
        importance = self.params["importance"] if cfg.variant == "importance_vit" else None
        for b in range(cfg.num_blocks):
            seq = self._vit_block(seq, b, importance, capture)
        return seq

    def _gat_layer(self, seq: Tensor) -> Tensor:
        cfg = self.config
        n = cfg.num_patches()
        strategy = cfg.adjacency_strategy
        if strategy == "full":
            adjacency = graphs.full_adjacency(n)
        elif strategy == "spatial":
            adjacency = graphs.spatial_adjacency(*self.grid, sigma=cfg.sigma)
        elif strategy == "learnable":
            adjacency = graphs.learnable_adjacency(self.params, n)
        else:
            adjacency = graphs.feature_adjacency(seq)
        gat = graphs.GatParams(W=self.params["gat/W"], a=self.params["gat/a"])
        _, out = graphs.gat_attention(seq, gat, adjacency)
        return out

    def forward(self, images, *, training: bool = False,
                rng: np.random.Generator | None = None,
                capture: list | None = None) -> Tensor:
        """Standardized-scale predictions of shape (B,)."""
        cfg = self.config
        use_dropout = training and cfg.dropout_rate > 0.0
        if use_dropout and rng is None:
            raise ContractError("training with dropout needs an explicit rng")
        if cfg.variant == "cnn":
            h = self._cnn_features(images)
        else:
            seq = self.forward_features(images, capture=capture)
            h = seq.mean(axis=1)
        P = self.params
        h = relu(h @ P["head/W1"] + P["head/b1"])
        if use_dropout:
            h = dropout(h, cfg.dropout_rate, rng)
        out = h @ P["head/W2"] + P["head/b2"]
        return reshape(out, (out.shape[0],))

    def _cnn_features(self, images) -> Tensor:
        cfg = self.config
        x = self._as_batch(images)
        for i in range(min(cfg.num_blocks, len(cfg.cnn_filters))):
            x = conv2d_valid(x, self.params[f"conv{i}/kernel"], stride=1)
            x = relu(x + self.params[f"conv{i}/bias"])
            x = maxpool2d(x, 2)
        b = x.shape[0]
        return reshape(x, (b, x.shape[1] * x.shape[2] * x.shape[3]))

    def forward_celsius(self, images, *, capture: list | None = None) -> Tensor:
        """Eval-mode forward in degrees Celsius (kept on the tape, so
        input gradients are in output units)."""
        return self.forward(images, capture=capture) * self.target_std + self.target_mean

    # -- prediction -------------------------------------------------------

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        out = self.forward(images, training=False)
        return out.data * self.target_std + self.target_mean

    def predict(self, image: np.ndarray) -> float:
        return float(self.predict_batch(np.asarray(image)[None])[0])

    def importance_weights(self) -> np.ndarray:
        """Current per-patch importance vector (importance_vit only)."""
        if self.config.variant != "importance_vit":
            raise ContractError(f"variant {self.config.variant!r} has no "
                                f"importance weights")
        return self.params["importance"].data.copy()

    def num_parameters(self) -> int:
        return self.params.num_values()

"""The proactive anomaly detector: three feature generators, two-stage fusion, T-step head.

Forward methods return ``(output, cache)``; the matching ``*_backward``
methods accumulate parameter gradients into ``self.params`` and return the
gradient with respect to their input.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigurationError, DimensionError, LayerParams, StateError
from .geometry import CameraModel, path_input_shape, render_path_input

LIDAR_MAX_RANGE = 10.0

FUSION_MODES = ("both", "lidar_only", "camera_only")
ATTENTION_MODES = ("mha", "mlp")
PATH_VIEWS = ("front", "bev")


@dataclass(frozen=True)
class PaadConfig:
    horizon: int = 10
    latent_dim: int = 32
    token_dim: int = 64
    heads: int = 8
    lidar_len: int = 1081
    lidar_hidden: int = 128
    image_h: int = 60
    image_w: int = 80
    conv_filters: tuple[int, ...] = (8, 16, 32)
    conv_pool: tuple[bool, ...] = (True, True, False)
    image_fc_hidden: int = 64
    fusion_hidden: int = 128
    fusion_mode: str = "both"
    attention: str = "mha"
    reconstruction: bool = True
    path_view: str = "front"
    bev_size: int = 48
    bev_scale: float = 20.0
    camera: CameraModel = field(default_factory=CameraModel)
    init_seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.latent_dim < 1:
            raise ConfigurationError("latent dimension must be >= 1")
        if self.token_dim % self.heads:
            raise ConfigurationError(f"token dim {self.token_dim} not divisible by {self.heads} heads")
        if 2 * self.latent_dim != self.token_dim:
            raise ConfigurationError(
                f"LiDAR token [mu, sigma] has length {2 * self.latent_dim}, token dim is "
                f"{self.token_dim}; no projection is configured")
        if len(self.conv_filters) != len(self.conv_pool):
            raise ConfigurationError("conv_filters and conv_pool differ in length")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigurationError(f"attention must be one of {ATTENTION_MODES}")
        if self.path_view not in PATH_VIEWS:
            raise ConfigurationError(f"path_view must be one of {PATH_VIEWS}")
        if (self.camera.image_h, self.camera.image_w) != (self.image_h, self.image_w):
            raise ConfigurationError("camera model resolution differs from the image resolution")
        for shape in (self.image_shape, self.path_shape):
            self._conv_out(shape)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.image_h, self.image_w

    @property
    def path_shape(self) -> tuple[int, int]:
        return path_input_shape(self.camera, self.path_view, self.bev_size)

    def _conv_out(self, shape):
        h, w = shape
        for pool in self.conv_pool:
            h, w = dc.conv_output_shape(h, w, False)
            if pool:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigurationError(f"conv stack collapses input {shape} to nothing")
        return self.conv_filters[-1], h, w

    @property
    def path_feature_len(self) -> int:
        f, h, w = self._conv_out(self.path_shape)
        return f * h * w

    @property
    def image_feature_len(self) -> int:
        f, h, w = self._conv_out(self.image_shape)
        return f * h * w

    @property
    def uses_camera(self) -> bool:
        return self.fusion_mode != "lidar_only"

    @property
    def uses_lidar(self) -> bool:
        return self.fusion_mode != "camera_only"

    @property
    def uses_reconstruction(self) -> bool:
        return self.reconstruction and self.uses_lidar

    def with_ablation(self, **kw) -> "PaadConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera"] = self.camera.to_dict()
        d["conv_filters"] = list(self.conv_filters)
        d["conv_pool"] = list(self.conv_pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PaadConfig":
        d = dict(d)
        if "camera" in d and isinstance(d["camera"], dict):
            d["camera"] = CameraModel(**d["camera"])
        elif "camera" not in d:
            d["camera"] = CameraModel.default(d.get("image_h", 60), d.get("image_w", 80))
        for key in ("conv_filters", "conv_pool"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def default_config(**kw) -> PaadConfig:
    h, w = kw.get("image_h", 60), kw.get("image_w", 80)
    kw.setdefault("camera", CameraModel.default(h, w))
    return PaadConfig(**kw)


@dataclass
class LidarPosterior:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if np.any(self.sigma <= 0):
            raise dc.NumericError("posterior sigma must be strictly positive")


@dataclass
class FailureProfile:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities)
        if p.ndim != 1 or np.any(p < 0) or np.any(p > 1):
            raise ValueError("failure profile must be a vector of probabilities")

    def __len__(self):
        return len(self.probabilities)


def normalize_lidar(ranges: np.ndarray) -> np.ndarray:
    return (np.clip(ranges, 0.0, LIDAR_MAX_RANGE) / LIDAR_MAX_RANGE).astype(np.float32)


def _uniform(rng, fan_in, shape, gain):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Paad:
    """Parameters plus forward/backward for every stage of the network."""

    def __init__(self, config: PaadConfig | None = None, params: LayerParams | None = None,
                 dtype=np.float32):
        self.config = config or default_config()
        self.training = False
        self.params = params if params is not None else self._init_params(dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values.values())).dtype

    # ------------------------------------------------------------ init

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        shapes: dict[str, tuple[int, ...]] = {}

        def conv_stack(prefix):
            cin = 1
            for i, f in enumerate(c.conv_filters):
                shapes[f"{prefix}.conv{i}.w"] = (f, cin, 3, 3)
                shapes[f"{prefix}.conv{i}.b"] = (f,)
                cin = f

        def lin(name, i, o):
            shapes[f"{name}.w"] = (i, o)
            shapes[f"{name}.b"] = (o,)

        D = c.token_dim
        conv_stack("path")
        conv_stack("cam")
        lin("cam.fc0", c.image_feature_len, c.image_fc_hidden)
        lin("cam.fc1", c.image_fc_hidden, D)
        lin("lidar.enc", c.lidar_len, c.lidar_hidden)
        lin("lidar.mu", c.lidar_hidden, c.latent_dim)
        lin("lidar.logvar", c.lidar_hidden, c.latent_dim)
        lin("lidar.dec0", c.latent_dim, c.lidar_hidden)
        lin("lidar.dec1", c.lidar_hidden, c.lidar_len)
        for p in ("q", "k", "v", "o"):
            lin(f"mha.{p}", D, D)
        lin("fmlp.fc0", 2 * D, 2 * D)
        lin("fmlp.fc1", 2 * D, 2 * D)
        lin("head.fc0", 2 * D + c.path_feature_len, c.fusion_hidden)
        lin("head.fc1", c.fusion_hidden, c.horizon)
        return shapes

    # layers followed by ReLU get He scaling, linear outputs LeCun scaling
    _RELU_LAYERS = ("conv", "cam.fc0", "lidar.enc", "lidar.dec0", "fmlp.fc0", "head.fc0")

    def _init_params(self, dtype) -> LayerParams:
        rng = np.random.default_rng(self.config.init_seed)
        params = LayerParams()
        for name, shape in self.parameter_shapes().items():
            if name.endswith(".b"):
                value = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                gain = 6.0 if any(t in name for t in self._RELU_LAYERS) else 3.0
                value = _uniform(rng, fan_in, shape, gain)
            params.add(name, value.astype(dtype))
        return params

    def active_param_names(self) -> list[str]:
        c = self.config
        names = []
        for n in self.params.names():
            if n.startswith("cam.") and not c.uses_camera:
                continue
            if n.startswith(("lidar.enc", "lidar.mu", "lidar.logvar")) and not c.uses_lidar:
                continue
            if n.startswith("lidar.dec") and not c.uses_reconstruction:
                continue
            if n.startswith("mha.") and c.attention != "mha":
                continue
            if n.startswith("fmlp.") and c.attention != "mlp":
                continue
            names.append(n)
        return names

    def astype(self, dtype) -> "Paad":
        m = Paad(self.config, self.params.astype(dtype))
        m.training = self.training
        return m

    def _p(self, name):
        return self.params.values[name]

    def _acc(self, name, g):
        self.params.accumulate(name, g)

    # ---------------------------------------------------------- conv stacks

    def _conv_stack(self, prefix, x):
        caches = []
        for i, pool in enumerate(self.config.conv_pool):
            x, cache = dc.conv2d_block_forward(x, self._p(f"{prefix}.conv{i}.w"),
                                               self._p(f"{prefix}.conv{i}.b"), pool=pool)
            caches.append(cache)
        return x.reshape(x.shape[0], -1), (caches, x.shape)

    def _conv_stack_backward(self, prefix, d, cache):
        caches, shape = cache
        d = d.reshape(shape)
        for i in reversed(range(len(caches))):
            d, dw, db = dc.conv2d_block_backward(d, caches[i])
            self._acc(f"{prefix}.conv{i}.w", dw)
            self._acc(f"{prefix}.conv{i}.b", db)
        return d

    def _as_images(self, x, shape, what):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != (1,) + tuple(shape):
            raise DimensionError(f"{what}: got {x.shape[1:]}, configured {(1,) + tuple(shape)}")
        return x

    def path_features(self, p):
        """(B, h, w) cropped path rasters -> (B, path_feature_len)."""
        x = self._as_images(p, self.config.path_shape, "path image")
        return self._conv_stack("path", x)

    def path_features_backward(self, d, cache):
        self._conv_stack_backward("path", d, cache)

    def camera_features(self, img):
        """(B, H, W) grayscale images in [0, 1] -> (B, token_dim) tokens."""
        x = self._as_images(img, self.config.image_shape, "camera image")
        flat, conv_cache = self._conv_stack("cam", x)
        h, c0 = dc.linear_forward(flat, self._p("cam.fc0.w"), self._p("cam.fc0.b"))
        h = dc.relu(h)
        tok, c1 = dc.linear_forward(h, self._p("cam.fc1.w"), self._p("cam.fc1.b"))
        return tok, (conv_cache, c0, h, c1)

    def camera_features_backward(self, d, cache):
        conv_cache, c0, h, c1 = cache
        dh, dw, db = dc.linear_backward(d, c1)
        self._acc("cam.fc1.w", dw)
        self._acc("cam.fc1.b", db)
        dh = dc.relu_backward(dh, h)
        dflat, dw, db = dc.linear_backward(dh, c0)
        self._acc("cam.fc0.w", dw)
        self._acc("cam.fc0.b", db)
        return self._conv_stack_backward("cam", dflat, conv_cache)

    # -------------------------------------------------------------- LiDAR

    def lidar_encode(self, x):
        """(B, L) normalized ranges -> LidarPosterior of (B, d) arrays."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != self.config.lidar_len:
            raise DimensionError(f"LiDAR scan length {x.shape[1]}, configured {self.config.lidar_len}")
        h, c0 = dc.linear_forward(x, self._p("lidar.enc.w"), self._p("lidar.enc.b"))
        h = dc.relu(h)
        mu, cm = dc.linear_forward(h, self._p("lidar.mu.w"), self._p("lidar.mu.b"))
        logvar, cl = dc.linear_forward(h, self._p("lidar.logvar.w"), self._p("lidar.logvar.b"))
        sigma = np.exp(0.5 * logvar)
        return LidarPosterior(mu, sigma), (c0, h, cm, cl, sigma)

    def lidar_encode_backward(self, dmu, dsigma, cache):
        c0, h, cm, cl, sigma = cache
        dlogvar = dsigma * 0.5 * sigma
        dh1, dw, db = dc.linear_backward(dmu, cm)
        self._acc("lidar.mu.w", dw)
        self._acc("lidar.mu.b", db)
        dh2, dw, db = dc.linear_backward(dlogvar, cl)
        self._acc("lidar.logvar.w", dw)
        self._acc("lidar.logvar.b", db)
        dh = dc.relu_backward(dh1 + dh2, h)
        dx, dw, db = dc.linear_backward(dh, c0)
        self._acc("lidar.enc.w", dw)
        self._acc("lidar.enc.b", db)
        return dx

    def lidar_features(self, post: LidarPosterior):
        tok = np.concatenate([post.mu, post.sigma], axis=-1)
        if tok.shape[-1] != self.config.token_dim:
            raise ConfigurationError(
                f"LiDAR token length {tok.shape[-1]} != token dim {self.config.token_dim}")
        return tok

    def lidar_decode(self, z):
        """(B, d) latent -> (B, L) Gaussian mean. Training mode only."""
        if not self.training:
            raise StateError("the reconstruction branch is only available in training mode")
        if not self.config.uses_reconstruction:
            raise StateError("the reconstruction branch is disabled by the configuration")
        z = np.asarray(z, dtype=self.dtype)
        if z.ndim == 1:
            z = z[None]
        h, c0 = dc.linear_forward(z, self._p("lidar.dec0.w"), self._p("lidar.dec0.b"))
        h = dc.relu(h)
        mean, c1 = dc.linear_forward(h, self._p("lidar.dec1.w"), self._p("lidar.dec1.b"))
        return mean, (c0, h, c1)

    def lidar_decode_backward(self, d, cache):
        c0, h, c1 = cache
        dh, dw, db = dc.linear_backward(d, c1)
        self._acc("lidar.dec1.w", dw)
        self._acc("lidar.dec1.b", db)
        dh = dc.relu_backward(dh, h)
        dz, dw, db = dc.linear_backward(dh, c0)
        self._acc("lidar.dec0.w", dw)
        self._acc("lidar.dec0.b", db)
        return dz

    # ------------------------------------------------------------- fusion

    def _mha_params(self):
        return [self._p(f"mha.{p}.{s}") for p in "qkvo" for s in "wb"]

    def fuse_observation(self, f_camera, f_lidar):
        """Two (B, D) tokens -> (B, 2D) observation features."""
        if f_camera.shape != f_lidar.shape or f_camera.shape[-1] != self.config.token_dim:
            raise DimensionError(f"tokens {f_camera.shape} and {f_lidar.shape} do not match")
        seq = np.stack([f_camera, f_lidar], axis=1)
        B, S, D = seq.shape
        if self.config.attention == "mha":
            att, cache = dc.mha_forward(seq, self.config.heads, *self._mha_params())
            return (seq + att).reshape(B, S * D), ("mha", cache, seq.shape)
        flat = seq.reshape(B, S * D)
        h, c0 = dc.linear_forward(flat, self._p("fmlp.fc0.w"), self._p("fmlp.fc0.b"))
        h = dc.relu(h)
        out, c1 = dc.linear_forward(h, self._p("fmlp.fc1.w"), self._p("fmlp.fc1.b"))
        return out, ("mlp", (c0, h, c1), seq.shape)

    def fuse_observation_backward(self, d, cache):
        kind, inner, shape = cache
        if kind == "mha":
            dseq = d.reshape(shape)
            dx, g = dc.mha_backward(dseq, inner)
            for key, val in g.items():
                self._acc(f"mha.{key[1]}.{key[0]}", val)
            dseq = dseq + dx
        else:
            c0, h, c1 = inner
            dh, dw, db = dc.linear_backward(d, c1)
            self._acc("fmlp.fc1.w", dw)
            self._acc("fmlp.fc1.b", db)
            dh = dc.relu_backward(dh, h)
            dflat, dw, db = dc.linear_backward(dh, c0)
            self._acc("fmlp.fc0.w", dw)
            self._acc("fmlp.fc0.b", db)
            dseq = dflat.reshape(shape)
        return dseq[:, 0], dseq[:, 1]

    # --------------------------------------------------------------- full

    def forward(self, images, lidar, paths, noise=None):
        """Batched forward pass.

        ``lidar`` must already be normalized. In training mode with the
        reconstruction branch enabled, ``noise`` (B, d) drives the
        reparameterized sample and the decoder output is returned too.
        Returns (logits, probs, extras, cache).
        """
        c = self.config
        extras = {}
        f_path, path_cache = self.path_features(paths)
        cam_cache = lid_cache = None
        if c.uses_camera:
            f_cam, cam_cache = self.camera_features(images)
        if c.uses_lidar:
            post, lid_cache = self.lidar_encode(lidar)
            f_lid = self.lidar_features(post)
            extras["posterior"] = post
        if c.fusion_mode == "camera_only":
            f_lid = f_cam
        elif c.fusion_mode == "lidar_only":
            f_cam = f_lid
        f_obs, fuse_cache = self.fuse_observation(f_cam, f_lid)
        joint = np.concatenate([f_obs, f_path], axis=1)
        h, c0 = dc.linear_forward(joint, self._p("head.fc0.w"), self._p("head.fc0.b"))
        h = dc.relu(h)
        logits, c1 = dc.linear_forward(h, self._p("head.fc1.w"), self._p("head.fc1.b"))
        probs = dc.sigmoid(logits)
        dec_cache = None
        if self.training and c.uses_reconstruction:
            if noise is None:
                raise StateError("training forward needs reparameterization noise")
            post = extras["posterior"]
            z = dc.reparameterize(post.mu, post.sigma, np.asarray(noise, dtype=self.dtype))
            extras["recon_mean"], dec_cache = self.lidar_decode(z)
            extras["noise"] = noise
        cache = (path_cache, cam_cache, lid_cache, fuse_cache, c0, h, c1, dec_cache,
                 f_obs.shape[1])
        return logits, probs, extras, cache

    def backward(self, dlogits, cache, dmu=None, dsigma=None, drecon=None, noise=None):
        """Accumulate parameter gradients for one forward pass.

        ``dmu``/``dsigma`` are extra posterior gradients (KL term); ``drecon``
        is the gradient w.r.t. the decoder mean.
        """
        c = self.config
        path_cache, cam_cache, lid_cache, fuse_cache, c0, h, c1, dec_cache, n_obs = cache
        dh, dw, db = dc.linear_backward(dlogits, c1)
        self._acc("head.fc1.w", dw)
        self._acc("head.fc1.b", db)
        dh = dc.relu_backward(dh, h)
        djoint, dw, db = dc.linear_backward(dh, c0)
        self._acc("head.fc0.w", dw)
        self._acc("head.fc0.b", db)
        self.path_features_backward(djoint[:, n_obs:], path_cache)
        dcam, dlid = self.fuse_observation_backward(djoint[:, :n_obs], fuse_cache)
        if c.fusion_mode == "camera_only":
            dcam, dlid = dcam + dlid, None
        elif c.fusion_mode == "lidar_only":
            dcam, dlid = None, dcam + dlid
        if dcam is not None:
            self.camera_features_backward(dcam, cam_cache)
        if dlid is not None:
            d = c.latent_dim
            gmu, gsig = dlid[:, :d].copy(), dlid[:, d:].copy()
            if dmu is not None:
                gmu += dmu
                gsig += dsigma
            if dec_cache is not None and drecon is not None:
                dz = self.lidar_decode_backward(drecon, dec_cache)
                dmu_z, dsig_z = dc.reparameterize_backward(dz, noise)
                gmu += dmu_z
                gsig += dsig_z
            self.lidar_encode_backward(gmu, gsig, lid_cache)

    def predict_batch(self, images, lidar_ranges, paths) -> np.ndarray:
        """(B, T) failure probabilities from raw ranges; sampling-free.

        uint8 images are scaled to [0, 1]; float images are used as given.
        """
        images = np.asarray(images)
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / 255.0
        was = self.training
        self.training = False
        try:
            _, probs, _, _ = self.forward(images, normalize_lidar(np.asarray(lidar_ranges)), paths)
        finally:
            self.training = was
        return probs

    def path_raster(self, path):
        """Network-ready raster of a PlannedPath for this configuration's view."""
        c = self.config
        return render_path_input(path, c.camera, c.path_view, c.bev_scale, c.bev_size)

    def predict(self, frame) -> FailureProfile:
        """Failure profile for one ObservationFrame."""
        probs = self.predict_batch(frame.image[None], frame.lidar[None],
                                   self.path_raster(frame.path)[None])
        return FailureProfile(probs[0])


def predict(frame, model: Paad) -> FailureProfile:
    return model.predict(frame)

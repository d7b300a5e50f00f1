"""The joint geometry + attribute codec.

One trained model covers the whole quality plane: the analysis transform
downsamples the cloud over K dyadic scales while a per-point condition
network scales and shifts features according to the requested geometry and
attribute qualities. A hyper latent two scales coarser carries the
entropy-model side information. The synthesis transform upsamples with
generative convolutions, predicts per-voxel occupancy, keeps the
transmitted number of voxels per scale and regresses colors on the
surviving geometry. Encoding runs a single pass through the analysis side;
the decoder-side quality map is estimated from the decoded latents, never
transmitted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .bitstream import (
    TABLE_FACTORIZED,
    TABLE_GAUSSIAN,
    Bitstream,
    pack_entropy_payload,
    unpack_entropy_payload,
)
from .conditioning import ConditionEncoder, QualityMap, quality_pyramid
from .entropy import (
    FactorizedPrior,
    GaussianParams,
    build_factorized_rows,
    build_gaussian_table,
    decode_gaussian_residuals,
    encode_gaussian_residuals,
    gaussian_likelihood,
    gaussian_row_assignment,
    quantize,
)
from .errors import ContractError, CorruptStreamError, DomainError
from .nn import ParameterStore, config_hash, glorot_init, load_checkpoint, save_checkpoint
from .octree import depth_for_bound, octree_decode, octree_encode
from .rangecoder import decode_symbols, encode_symbols
from .voxels import (
    SparseFeatureTensor,
    VoxelCloud,
    ancestor_indices,
    conv_tap_map,
    downsample_coords,
    generative_tap_map,
    lookup_rows,
    scale_bound,
    top_k_indices,
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and conditioning hyperparameters (desk scale defaults)."""

    latent_scales: int = 3  # K
    hyper_scale: int = 5  # H, strictly coarser than K
    enc_widths: tuple = (16, 32, 64)
    y_channels: int = 32
    hyper_widths: tuple = (32, 16)
    z_channels: int = 16
    dec_widths: tuple = (64, 32, 16)
    cond_hidden: int = 16
    surrogate_hidden: int = 16
    focal_gamma: float = 2.0
    geometry_lambda: tuple = (5.0, 80.0)
    attribute_lambda: tuple = (50.0, 6400.0)
    quality_exponent: float = 2.0
    sigma_min: float = 0.04
    sigma_max: float = 64.0
    sigma_levels: int = 64
    mu_buckets: int = 64

    def __post_init__(self):
        if self.hyper_scale <= self.latent_scales:
            raise DomainError("hyper scale must be coarser than the latent scale")
        if len(self.enc_widths) != self.latent_scales:
            raise DomainError("need one encoder width per scale")
        if len(self.dec_widths) != self.latent_scales:
            raise DomainError("need one decoder width per scale")
        if self.hyper_widths[-1] != self.z_channels:
            raise DomainError("last hyper width must equal the hyper channel count")
        widths = (*self.enc_widths, *self.dec_widths, *self.hyper_widths,
                  self.y_channels, self.z_channels)
        if any(w <= 0 for w in widths):
            raise DomainError("channel widths must be positive")

    def to_dict(self):
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @staticmethod
    def from_dict(data):
        kwargs = dict(data)
        for key in ("enc_widths", "hyper_widths", "dec_widths", "geometry_lambda",
                    "attribute_lambda"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return ModelConfig(**kwargs)

    @property
    def hash(self):
        return config_hash(self.to_dict())


class SparseConvLayer:
    """One learnable sparse convolution (standard or generative)."""

    def __init__(self, store, name, kernel, cin, cout, stride=1, generative=False):
        self.kernel = kernel
        self.stride = stride
        self.generative = generative
        self.cin, self.cout = cin, cout
        self.weight = store.create(f"{name}.weight", (kernel**3, cin, cout))
        self.bias = store.create(f"{name}.bias", (cout,))

    def apply(self, coords, feats, child_bound=None):
        if self.generative:
            out_coords, taps = generative_tap_map(coords, self.kernel, child_bound)
        else:
            out_coords, taps = conv_tap_map(coords, self.kernel, self.stride)
        out = ad.sparse_affine(feats, self.weight, self.bias, taps, len(coords))
        return out_coords, out


class AnalysisNet:
    """Encoder: K conditioned downsampling stages plus a 1x1x1 head."""

    def __init__(self, store, cfg: ModelConfig):
        self.cfg = cfg
        self.stages = []
        cin = 3  # colors are the input features
        for k, width in enumerate(cfg.enc_widths):
            conv_a = SparseConvLayer(store, f"analysis.s{k}.conv_a", 3, cin, width)
            conv_b = SparseConvLayer(store, f"analysis.s{k}.conv_b", 2, width, width,
                                     stride=2)
            cond = ConditionEncoder(store, f"analysis.s{k}.cond", width,
                                    hidden=cfg.cond_hidden)
            self.stages.append((conv_a, conv_b, cond))
            cin = width
        self.head = SparseConvLayer(store, "analysis.head", 1, cin, cfg.y_channels)

    def apply(self, coords, feats, scale_qvalues):
        """scale_qvalues[k] is the (N_k, 2) quality array at scale k."""
        for k, (conv_a, conv_b, cond) in enumerate(self.stages):
            coords, feats = conv_a.apply(coords, feats)
            feats = ad.leaky_relu(feats)
            coords, feats = conv_b.apply(coords, feats)
            alpha, beta = cond.apply(ad.constant(scale_qvalues[k + 1]))
            if alpha.data.shape != feats.data.shape:
                raise ContractError("condition map does not match stage features")
            feats = alpha * feats + beta
        coords, y = self.head.apply(coords, feats)
        return coords, y


class HyperAnalysis:
    """Two stride-2 stages from the latent scale down to the hyper scale."""

    def __init__(self, store, cfg: ModelConfig):
        w0, w1 = cfg.hyper_widths
        self.conv_a0 = SparseConvLayer(store, "hyper_a.s0.conv_a", 3, cfg.y_channels, w0)
        self.conv_b0 = SparseConvLayer(store, "hyper_a.s0.conv_b", 2, w0, w0, stride=2)
        self.conv_a1 = SparseConvLayer(store, "hyper_a.s1.conv_a", 3, w0, w1)
        self.conv_b1 = SparseConvLayer(store, "hyper_a.s1.conv_b", 2, w1, w1, stride=2)

    def apply(self, coords, y):
        coords, f = self.conv_a0.apply(coords, y)
        f = ad.leaky_relu(f)
        coords, f = self.conv_b0.apply(coords, f)
        coords, f = self.conv_a1.apply(coords, f)
        f = ad.leaky_relu(f)
        coords, f = self.conv_b1.apply(coords, f)
        return coords, f


class HyperSynthesis:
    """Generative upsampling back to the latent scale; emits means/scales.

    Kernel size 2 keeps every child attributable to exactly one parent,
    which together with canonical coordinate ordering makes this path
    bit-reproducible between encoder and decoder.
    """

    def __init__(self, store, cfg: ModelConfig):
        w0 = cfg.hyper_widths[0]
        self.cfg = cfg
        self.gen0 = SparseConvLayer(store, "hyper_s.g0", 2, cfg.z_channels, w0,
                                    stride=2, generative=True)
        self.gen1 = SparseConvLayer(store, "hyper_s.g1", 2, w0, w0, stride=2,
                                    generative=True)
        self.head = SparseConvLayer(store, "hyper_s.head", 1, w0, 2 * cfg.y_channels)

    def apply(self, coords, z, latent_coords, resolution):
        cfg = self.cfg
        k = cfg.latent_scales
        coords, f = self.gen0.apply(coords, z, child_bound=scale_bound(resolution, k + 1))
        f = ad.leaky_relu(f)
        coords, f = self.gen1.apply(coords, f, child_bound=scale_bound(resolution, k))
        f = ad.leaky_relu(f)
        idx = lookup_rows(coords, latent_coords)
        if len(idx) and idx.min() < 0:
            raise ContractError("hyper synthesis does not cover the latent geometry")
        trunk = ad.gather_rows(f, idx, unique=True)
        _, raw = self.head.apply(latent_coords, trunk)
        mu = ad.cols(raw, 0, cfg.y_channels)
        sigma = ad.softplus(ad.cols(raw, cfg.y_channels, 2 * cfg.y_channels)) + cfg.sigma_min
        return mu, sigma, trunk


class SurrogateHead:
    """Decoder-side quality estimate from the hyper trunk and the latent."""

    def __init__(self, store, cfg: ModelConfig):
        cin = cfg.hyper_widths[0] + cfg.y_channels
        self.l0 = SparseConvLayer(store, "surrogate.l0", 1, cin, cfg.surrogate_hidden)
        self.l1 = SparseConvLayer(store, "surrogate.l1", 1, cfg.surrogate_hidden, 2)

    def apply(self, coords, trunk, y):
        f = ad.concat([trunk, y], axis=1)
        _, f = self.l0.apply(coords, f)
        f = ad.leaky_relu(f)
        _, f = self.l1.apply(coords, f)
        return ad.sigmoid(f)


class UpsamplePruneBlock:
    """Generative upsample, feature transform, occupancy branch, pruning."""

    def __init__(self, store, name, cin, cout, cond_hidden):
        self.gen = SparseConvLayer(store, f"{name}.gen", 2, cin, cin, stride=2,
                                   generative=True)
        self.conv = SparseConvLayer(store, f"{name}.conv", 3, cin, cout)
        self.cond = ConditionEncoder(store, f"{name}.cond", cout, hidden=cond_hidden)
        self.occ = SparseConvLayer(store, f"{name}.occ", 1, cout, 1)

    def apply(self, coords, feats, child_bound, q_base_coords, q_values, levels_up,
              n_keep=None, teacher_coords=None):
        """Returns (kept_coords, kept_feats, candidate_coords, logits)."""
        coords_d, f = self.gen.apply(coords, feats, child_bound)
        f = ad.leaky_relu(f)
        coords_d, f = self.conv.apply(coords_d, f)
        f = ad.leaky_relu(f)
        anc = ancestor_indices(coords_d, q_base_coords, levels_up)
        qvals = ad.gather_rows(q_values, anc) if isinstance(q_values, ad.Tensor) \
            else ad.constant(np.asarray(q_values)[anc])
        alpha, beta = self.cond.apply(qvals)
        f = alpha * f + beta
        _, logits = self.occ.apply(coords_d, f)
        if teacher_coords is not None:
            keep = lookup_rows(coords_d, teacher_coords)
            if len(keep) and keep.min() < 0:
                raise ContractError("teacher coordinates missing from the candidates")
        else:
            if n_keep is None:
                raise ContractError("need either a kept count or teacher coordinates")
            if n_keep > len(coords_d):
                raise DomainError(
                    f"cannot keep {n_keep} of {len(coords_d)} candidate voxels"
                )
            probs = np.asarray(
                1.0 / (1.0 + np.exp(-logits.data.reshape(-1)))
            )
            keep = top_k_indices(probs, int(n_keep))
        kept_feats = ad.gather_rows(f, keep, unique=True)
        return coords_d[keep], kept_feats, coords_d, logits


class SynthesisNet:
    """Decoder: lift, K upsample/prune blocks, attribute head."""

    def __init__(self, store, cfg: ModelConfig):
        self.cfg = cfg
        self.lift = SparseConvLayer(store, "synthesis.lift", 3, cfg.y_channels,
                                    cfg.dec_widths[0])
        self.blocks = []
        for i in range(cfg.latent_scales):
            cin = cfg.dec_widths[i]
            cout = cfg.dec_widths[min(i + 1, cfg.latent_scales - 1)]
            self.blocks.append(
                UpsamplePruneBlock(store, f"synthesis.up{i}", cin, cout,
                                   cfg.cond_hidden)
            )
        self.attr_head = SparseConvLayer(store, "synthesis.attr_head", 1,
                                         cfg.dec_widths[-1], 3)

    def apply(self, latent_coords, y, q_values, resolution, kept_counts=None,
              teacher_sets=None):
        """Run the decoder.

        ``kept_counts`` follows the header order n^(K-1) .. n^(0);
        ``teacher_sets`` (training) forces the retained coordinate set per
        scale instead. Returns (coords, attr_tensor, scale_predictions)
        where scale_predictions is a list of (candidate_coords, logits)
        finest scale last.
        """
        cfg = self.cfg
        coords, f = self.lift.apply(latent_coords, y)
        f = ad.leaky_relu(f)
        predictions = []
        for i, block in enumerate(self.blocks):
            scale = cfg.latent_scales - 1 - i
            teacher = None if teacher_sets is None else teacher_sets[i]
            n_keep = None if kept_counts is None else int(kept_counts[i])
            coords, f, cand, logits = block.apply(
                coords, f,
                child_bound=scale_bound(resolution, scale),
                q_base_coords=latent_coords,
                q_values=q_values,
                levels_up=cfg.latent_scales - scale,
                n_keep=n_keep,
                teacher_coords=teacher,
            )
            predictions.append((cand, logits))
        _, attrs = self.attr_head.apply(coords, f)
        return coords, attrs, predictions


class CodecModel:
    """Parameter container plus the full encode/decode pipelines."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.store = ParameterStore()
        self.analysis = AnalysisNet(self.store, config)
        self.hyper_analysis = HyperAnalysis(self.store, config)
        self.hyper_synthesis = HyperSynthesis(self.store, config)
        self.surrogate = SurrogateHead(self.store, config)
        self.synthesis = SynthesisNet(self.store, config)
        self.prior = FactorizedPrior(self.store, "prior", config.z_channels)
        skip = set(self.prior._param_names)
        for enc in self._condition_encoders():
            skip.update(enc.zero_init_names)
        glorot_init(self.store, seed, skip=skip)
        self.prior.init_biases(np.random.default_rng(seed + 1))

    def _condition_encoders(self):
        encoders = [cond for _, _, cond in self.analysis.stages]
        encoders += [block.cond for block in self.synthesis.blocks]
        return encoders

    @property
    def hash(self):
        return self.config.hash

    def parameters(self):
        return self.store.values()

    # -- persistence -------------------------------------------------------
    def save(self, path, optimizer_arrays=None, meta=None):
        save_checkpoint(path, self.config.to_dict(), self.store.state_arrays(),
                        optimizer_arrays, meta)

    @staticmethod
    def load(path):
        config_dict, meta, params, optimizer = load_checkpoint(path)
        model = CodecModel(ModelConfig.from_dict(config_dict), seed=0)
        model.store.load_state(params)
        return model, meta, optimizer

    # -- geometry helpers ----------------------------------------------------
    def coordinate_pyramid(self, coords):
        """Ground-truth coordinate sets for scales 0 .. hyper_scale."""
        pyramid = [np.asarray(coords, dtype=np.int64)]
        for _ in range(self.config.hyper_scale):
            pyramid.append(downsample_coords(pyramid[-1]))
        return pyramid


# ---------------------------------------------------------------------------
# spec-level pipeline operations
# ---------------------------------------------------------------------------


def encode_analysis(model: CodecModel, cloud: VoxelCloud, qmap: QualityMap):
    """Single-pass analysis transform; returns (latent tensor, scale maps)."""
    if len(cloud) == 0:
        raise DomainError("cannot encode an empty cloud")
    if not np.array_equal(qmap.coords, cloud.coords):
        raise ContractError("quality map geometry differs from the cloud")
    qmaps = quality_pyramid(qmap, model.config.latent_scales)
    coords, y = model.analysis.apply(
        cloud.coords, ad.constant(cloud.attrs), [m.values for m in qmaps]
    )
    return SparseFeatureTensor(coords, y.data, model.config.latent_scales), qmaps


def hyper_path(model: CodecModel, latent: SparseFeatureTensor, mode, rng=None,
               resolution=None):
    """Hyper analysis, quantization and hyper synthesis.

    Returns a dict with the quantized hyper latent, the means/scales on
    exactly the latent geometry and the trunk features feeding the
    decoder-side quality estimate.
    """
    if resolution is None:
        resolution = 1 << 16
    z_coords, z = model.hyper_analysis.apply(latent.coords, ad.constant(latent.feats))
    z_q = quantize(z.data, mode, rng) if mode == "noise" else quantize(z.data, "round")
    mu, sigma, trunk = model.hyper_synthesis.apply(
        z_coords, ad.constant(z_q), latent.coords, resolution
    )
    return {
        "z_coords": z_coords,
        "z": z.data,
        "z_q": z_q,
        "mu": mu.data,
        "sigma": sigma.data,
        "trunk": trunk.data,
    }


def infer_surrogate_quality(model: CodecModel, latent_coords, trunk, y_hat) -> QualityMap:
    """Decoder-side (qg, qa) estimate on the latent geometry."""
    q = model.surrogate.apply(latent_coords, ad.constant(trunk), ad.constant(y_hat))
    return QualityMap(latent_coords, q.data[:, 0], q.data[:, 1])


def decode_synthesis(model: CodecModel, latent: SparseFeatureTensor,
                     qhat: QualityMap, kept_counts, resolution) -> VoxelCloud:
    """Run the decoder to a cloud with exactly n^(0) points."""
    try:
        coords, attrs, _ = model.synthesis.apply(
            latent.coords, ad.constant(latent.feats), qhat.values, resolution,
            kept_counts=kept_counts,
        )
    except DomainError as exc:
        raise CorruptStreamError(str(exc)) from exc
    return VoxelCloud(coords, np.clip(attrs.data, 0.0, 1.0), resolution)


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------


def _support_bounds(values):
    """Per-channel [min - 1, max + 1] of integer values."""
    values = np.asarray(values, dtype=np.int64)
    if values.size == 0:
        raise DomainError("empty latent")
    lo = values.min(axis=0) - 1
    hi = values.max(axis=0) + 1
    return np.stack([lo, hi], axis=1)


def _interleave_channel_rows(rows, n_points, channels):
    """Row list for scan order: canonical coordinates outer, channels inner."""
    return [rows[c] for _ in range(n_points) for c in range(channels)]


def encode(model: CodecModel, cloud: VoxelCloud, qmap: QualityMap) -> Bitstream:
    """Compress a cloud under a quality map into a self-contained stream."""
    cfg = model.config
    if len(cloud) == 0:
        raise DomainError("cannot encode an empty cloud")
    if cloud.resolution & (cloud.resolution - 1) or cloud.resolution <= 0:
        raise DomainError("resolution must be a power of two")
    pyramid = model.coordinate_pyramid(cloud.coords)
    latent, _ = encode_analysis(model, cloud, qmap)
    hyper = hyper_path(model, latent, mode="round", resolution=cloud.resolution)

    z_hat = hyper["z_q"].astype(np.int64)
    y_hat = quantize(latent.feats, "round").astype(np.int64)
    z_bounds = _support_bounds(z_hat)
    y_bounds = _support_bounds(y_hat)

    # base geometry
    k = cfg.latent_scales
    depth = depth_for_bound(scale_bound(cloud.resolution, k))
    geometry_payload = octree_encode(pyramid[k], depth)

    # hyper latent under the factorized prior
    z_rows = build_factorized_rows(model.prior, z_bounds)
    z_symbols = (z_hat - z_bounds[:, 0][None, :]).reshape(-1)
    z_row_seq = _interleave_channel_rows(z_rows, len(z_hat), cfg.z_channels)
    z_body = encode_symbols(z_symbols, z_row_seq)
    z_payload = pack_entropy_payload(len(z_symbols), TABLE_FACTORIZED, z_body)

    # main latent under the Gaussian conditional
    radius = int((y_bounds[:, 1] - y_bounds[:, 0]).max())
    table = build_gaussian_table(radius, cfg.sigma_min, cfg.sigma_max,
                                 cfg.sigma_levels, cfg.mu_buckets)
    lo = y_bounds[:, 0][None, :]
    hi = y_bounds[:, 1][None, :]
    anchor, bucket, level = gaussian_row_assignment(hyper["mu"], hyper["sigma"],
                                                    table, lo, hi)
    residuals = (y_hat - anchor).reshape(-1)
    y_body = encode_gaussian_residuals(residuals, bucket.reshape(-1),
                                       level.reshape(-1), table)
    y_payload = pack_entropy_payload(len(residuals), TABLE_GAUSSIAN, y_body)

    counts = tuple(len(pyramid[s]) for s in range(cfg.latent_scales - 1, -1, -1))
    stream = Bitstream(
        model_hash=model.hash,
        resolution=cloud.resolution,
        scale_count=cfg.latent_scales,
        kept_counts=counts,
        z_bounds=z_bounds,
        y_bounds=y_bounds,
        geometry_payload=geometry_payload,
        z_payload=z_payload,
        y_payload=y_payload,
    )
    # non-serialized diagnostics for rate bookkeeping
    z_lik = np.concatenate(
        [model.prior.likelihood(z_hat[:, c], c) for c in range(cfg.z_channels)]
    )
    params = GaussianParams(hyper["mu"], hyper["sigma"], cfg.sigma_min)
    y_lik = gaussian_likelihood(y_hat, params)
    stream.info = {
        "z_bits_estimate": float(-np.sum(np.log2(z_lik))),
        "y_bits_estimate": float(-np.sum(np.log2(y_lik))),
        "z_payload_bits": 8 * len(z_payload),
        "y_payload_bits": 8 * len(y_payload),
        "geometry_payload_bits": 8 * len(geometry_payload),
        "total_bits": 8 * len(stream.to_bytes()),
    }
    return stream


def decode(model: CodecModel, data) -> VoxelCloud:
    """Reconstruct a cloud from bytes or a parsed Bitstream."""
    cfg = model.config
    stream = data if isinstance(data, Bitstream) else Bitstream.from_bytes(data)
    stream.check_model(model.hash)
    k = cfg.latent_scales
    expected_depth = depth_for_bound(scale_bound(stream.resolution, k))
    if len(stream.geometry_payload) >= 1 and stream.geometry_payload[0] != expected_depth:
        raise CorruptStreamError("geometry payload depth mismatch")
    latent_coords = octree_decode(stream.geometry_payload)
    if len(latent_coords) == 0:
        raise CorruptStreamError("empty base geometry")

    z_coords = downsample_coords(downsample_coords(latent_coords))
    n_z = len(z_coords)
    count, table_id, z_body = unpack_entropy_payload(stream.z_payload)
    if table_id != TABLE_FACTORIZED or count != n_z * cfg.z_channels:
        raise CorruptStreamError("hyper payload header inconsistent")
    z_rows = build_factorized_rows(model.prior, stream.z_bounds)
    z_row_seq = _interleave_channel_rows(z_rows, n_z, cfg.z_channels)
    z_symbols = decode_symbols(z_body, z_row_seq, count)
    z_hat = z_symbols.reshape(n_z, cfg.z_channels) + stream.z_bounds[:, 0][None, :]

    mu, sigma, trunk = model.hyper_synthesis.apply(
        z_coords, ad.constant(z_hat.astype(np.float64)), latent_coords,
        stream.resolution,
    )
    radius = int((stream.y_bounds[:, 1] - stream.y_bounds[:, 0]).max())
    table = build_gaussian_table(radius, cfg.sigma_min, cfg.sigma_max,
                                 cfg.sigma_levels, cfg.mu_buckets)
    lo = stream.y_bounds[:, 0][None, :]
    hi = stream.y_bounds[:, 1][None, :]
    anchor, bucket, level = gaussian_row_assignment(mu.data, sigma.data, table, lo, hi)
    count, table_id, y_body = unpack_entropy_payload(stream.y_payload)
    if table_id != TABLE_GAUSSIAN or count != len(latent_coords) * cfg.y_channels:
        raise CorruptStreamError("latent payload header inconsistent")
    residuals = decode_gaussian_residuals(y_body, bucket.reshape(-1),
                                          level.reshape(-1), table, count)
    y_hat = residuals.reshape(len(latent_coords), cfg.y_channels) + anchor

    qhat = infer_surrogate_quality(model, latent_coords, trunk.data,
                                   y_hat.astype(np.float64))
    latent = SparseFeatureTensor(latent_coords, y_hat.astype(np.float64), k)
    return decode_synthesis(model, latent, qhat, stream.kept_counts,
                            stream.resolution)

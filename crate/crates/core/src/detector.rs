//! End-to-end detector: toy backbone, attention banks, selective pooling,
//! low-capacity head, SGD training loop, inference with NMS, VOC-style mAP,
//! and checkpointing. Everything is deterministic given the config seed.

use std::fs;
use std::path::Path;

use crate::attention::{
    build_aspect_bank, build_subregion_bank, merge_backward, reduce_dim, selective_pool_backward,
    selective_roi_pool, subregion_offsets, AttentionBank, AttentionMap, SelectMode, ShiftDirection,
};
use crate::error::{Error, Result};
use crate::ops::{
    conv2d_backward, fully_connected, fully_connected_backward, max_pool2x2, max_pool2x2_backward,
    relu, relu_backward, relu_slice, relu_slice_backward, shifted_conv2d_backward, smooth_l1,
    smooth_l1_backward, softmax_cross_entropy, softmax_cross_entropy_backward, ConvParams,
    FcParams,
};
use crate::rng::Rng;
use crate::roi::{
    decode_delta, nms, roi_max_pool, roi_max_pool_backward, sample_rois, BoxDelta, LabeledRoi,
    Rect, RoI, SamplerConfig, SubRegionGrid,
};
use crate::synth::{generate_proposals, Scene};
use crate::tensor::{
    elementwise_add, elementwise_mul, elementwise_mul_backward, read_tensor, write_tensor, Scalar,
    Shape4, Tensor4,
};

const INIT_SALT: u64 = 0x494E_4954;
const TRAIN_SALT: u64 = 0x5452_4149_4E00;
const PROPOSAL_SALT: u64 = 0x5052_4F50;

/// Default width of the head's first fc layer: 500, or 100 when the RoI
/// features have a single channel.
pub fn default_head_width(selective_channels: usize) -> usize {
    if selective_channels == 1 {
        100
    } else {
        500
    }
}

/// All hyperparameters of the detector. `head_width` 0 means "auto", i.e.
/// follow `default_head_width`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub channels: usize,           // backbone output channels C
    pub selective_channels: usize, // C_s
    pub subregion: SubRegionGrid,  // N_sr grid
    pub aspect_groups: usize,      // N_ar (3, or 1 for the degenerate case)
    pub pool_h: usize,
    pub pool_w: usize,
    pub head_width: usize, // 0 = auto
    pub classes: usize,    // foreground classes
    pub aspect_thresholds: (f64, f64),
    pub shift_direction: ShiftDirection,
    pub spatial_stride: usize, // fixed at 4 by the backbone
    pub use_subregion: bool,
    pub use_aspect: bool,
    pub sigmoid_banks: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub seed: u64,
    pub images_per_batch: usize,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub proposals_per_image: usize,
    pub proposal_jitter: f64,
    pub nms_threshold: f64,
    pub bbox_stds: [f64; 4],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            channels: 64,
            selective_channels: 40,
            subregion: SubRegionGrid::default(),
            aspect_groups: 3,
            pool_h: 7,
            pool_w: 7,
            head_width: 0,
            classes: 3,
            aspect_thresholds: (0.75, 1.3),
            shift_direction: ShiftDirection::Center,
            spatial_stride: 4,
            use_subregion: true,
            use_aspect: true,
            sigmoid_banks: false,
            learning_rate: 1e-3,
            momentum: 0.9,
            iterations: 200,
            seed: 0,
            images_per_batch: 2,
            rois_per_image: 128,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            proposals_per_image: 300,
            proposal_jitter: 0.25,
            nms_threshold: 0.3,
            bbox_stds: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

impl DetectorConfig {
    pub fn resolved_head_width(&self) -> usize {
        if self.head_width == 0 {
            default_head_width(self.selective_channels)
        } else {
            self.head_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("selective_channels", self.selective_channels),
            ("pool_h", self.pool_h),
            ("pool_w", self.pool_w),
            ("classes", self.classes),
            ("images_per_batch", self.images_per_batch),
            ("rois_per_image", self.rois_per_image),
            ("proposals_per_image", self.proposals_per_image),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(
                    "DetectorConfig",
                    format!("{name} must be > 0"),
                ));
            }
        }
        if self.channels < 4 {
            return Err(Error::invalid("DetectorConfig", "channels must be >= 4"));
        }
        if self.aspect_groups != 1 && self.aspect_groups != 3 {
            return Err(Error::invalid(
                "DetectorConfig",
                "aspect_groups must be 1 or 3",
            ));
        }
        if self.spatial_stride != 4 {
            return Err(Error::invalid(
                "DetectorConfig",
                "spatial_stride is fixed at 4 by the backbone",
            ));
        }
        if self.aspect_thresholds.0 > self.aspect_thresholds.1 {
            return Err(Error::invalid(
                "DetectorConfig",
                "aspect thresholds out of order",
            ));
        }
        if self.learning_rate <= 0.0
            || self.learning_rate.is_nan()
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::invalid("DetectorConfig", "bad optimizer settings"));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) || !(0.0..=1.0).contains(&self.fg_iou) {
            return Err(Error::invalid("DetectorConfig", "bad sampler settings"));
        }
        Ok(())
    }

    /// Stable key=value rendering; the CLI echoes it and checkpoints embed it.
    pub fn canonical_text(&self) -> String {
        format!(
            "channels={}\nselective_channels={}\nsubregion_rows={}\nsubregion_cols={}\n\
             aspect_groups={}\npool_h={}\npool_w={}\nhead_width={}\nclasses={}\n\
             aspect_lo={}\naspect_hi={}\nshift_direction={}\nspatial_stride={}\n\
             use_subregion={}\nuse_aspect={}\nsigmoid_banks={}\nlearning_rate={}\n\
             momentum={}\niterations={}\nseed={}\nimages_per_batch={}\nrois_per_image={}\n\
             fg_fraction={}\nfg_iou={}\nproposals_per_image={}\nproposal_jitter={}\n\
             nms_threshold={}\nbbox_stds={},{},{},{}\n",
            self.channels,
            self.selective_channels,
            self.subregion.rows,
            self.subregion.cols,
            self.aspect_groups,
            self.pool_h,
            self.pool_w,
            self.resolved_head_width(),
            self.classes,
            self.aspect_thresholds.0,
            self.aspect_thresholds.1,
            self.shift_direction.name(),
            self.spatial_stride,
            self.use_subregion,
            self.use_aspect,
            self.sigmoid_banks,
            self.learning_rate,
            self.momentum,
            self.iterations,
            self.seed,
            self.images_per_batch,
            self.rois_per_image,
            self.fg_fraction,
            self.fg_iou,
            self.proposals_per_image,
            self.proposal_jitter,
            self.nms_threshold,
            self.bbox_stds[0],
            self.bbox_stds[1],
            self.bbox_stds[2],
            self.bbox_stds[3],
        )
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }

    /// Apply one key=value pair. Ok(false) means the key is not a detector
    /// key (the CLI layers its own keys on top); malformed values error.
    pub fn try_set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Format(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "channels" => self.channels = parse(key, value)?,
            "selective_channels" => self.selective_channels = parse(key, value)?,
            "subregion_rows" => self.subregion.rows = parse(key, value)?,
            "subregion_cols" => self.subregion.cols = parse(key, value)?,
            "aspect_groups" => self.aspect_groups = parse(key, value)?,
            "pool_h" => self.pool_h = parse(key, value)?,
            "pool_w" => self.pool_w = parse(key, value)?,
            "head_width" => {
                self.head_width = if value == "auto" {
                    0
                } else {
                    parse(key, value)?
                }
            }
            "classes" => self.classes = parse(key, value)?,
            "aspect_lo" => self.aspect_thresholds.0 = parse(key, value)?,
            "aspect_hi" => self.aspect_thresholds.1 = parse(key, value)?,
            "shift_direction" => self.shift_direction = ShiftDirection::parse(value)?,
            "spatial_stride" => self.spatial_stride = parse(key, value)?,
            "use_subregion" => self.use_subregion = parse(key, value)?,
            "use_aspect" => self.use_aspect = parse(key, value)?,
            "sigmoid_banks" => self.sigmoid_banks = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "images_per_batch" => self.images_per_batch = parse(key, value)?,
            "rois_per_image" => self.rois_per_image = parse(key, value)?,
            "fg_fraction" => self.fg_fraction = parse(key, value)?,
            "fg_iou" => self.fg_iou = parse(key, value)?,
            "proposals_per_image" => self.proposals_per_image = parse(key, value)?,
            "proposal_jitter" => self.proposal_jitter = parse(key, value)?,
            "nms_threshold" => self.nms_threshold = parse(key, value)?,
            "bbox_stds" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 4 {
                    return Err(Error::Format(
                        "bbox_stds needs 4 comma-separated values".into(),
                    ));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.bbox_stds[i] = parse(key, p)?;
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn backbone_plan(c: usize) -> [usize; 4] {
    [(c / 4).max(1), (c / 2).max(1), c, c]
}

/// The full model: 4-conv stride-4 backbone, 1x1 reduction, sub-region and
/// aspect-ratio attention banks, and the two-output detection head.
#[derive(Clone)]
pub struct Detector<T: Scalar> {
    pub cfg: DetectorConfig,
    backbone: Vec<ConvParams<T>>,
    reduce: ConvParams<T>,
    subregion: Vec<ConvParams<T>>, // empty when use_subregion is off
    aspect: Option<ConvParams<T>>,
    fc1: FcParams<T>,
    fc_cls: FcParams<T>,
    fc_reg: FcParams<T>,
    offsets: Vec<(i32, i32)>,
}

fn gaussian_tensor<T: Scalar>(shape: Shape4, std: f64, rng: &mut Rng) -> Tensor4<T> {
    let data = (0..shape.len())
        .map(|_| T::from_f64(rng.normal() * std))
        .collect();
    Tensor4::from_vec(shape, data).expect("shape/data agree")
}

impl<T: Scalar> Detector<T> {
    pub fn new(cfg: DetectorConfig) -> Result<Detector<T>> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed).derive(INIT_SALT);
        let plan = backbone_plan(cfg.channels);
        let mut backbone = Vec::new();
        let mut c_in = 3;
        for &c_out in &plan {
            // He init for the backbone
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let kernel = gaussian_tensor(Shape4::new(c_out, c_in, 3, 3), std, &mut rng);
            backbone.push(ConvParams::new(kernel, vec![T::ZERO; c_out])?);
            c_in = c_out;
        }

        let c = cfg.channels;
        let c_s = cfg.selective_channels;
        // the scale-carrying layers (reduction, fc1) get He-style init so the
        // feature pathway keeps unit variance when training from scratch
        let reduce = ConvParams::new(
            gaussian_tensor(Shape4::new(c_s, c, 1, 1), (2.0 / c as f64).sqrt(), &mut rng),
            vec![T::ZERO; c_s],
        )?;

        // attention biases set so the merged attention starts near 1
        let bank_bias = if cfg.use_subregion && cfg.use_aspect {
            0.5
        } else {
            1.0
        };
        let offsets = subregion_offsets(cfg.shift_direction, cfg.subregion, cfg.seed);
        let mut subregion = Vec::new();
        if cfg.use_subregion {
            for &off in &offsets {
                let kernel = gaussian_tensor(Shape4::new(c_s, c, 3, 3), 0.01, &mut rng);
                subregion.push(ConvParams::with_offset(
                    kernel,
                    vec![T::from_f64(bank_bias); c_s],
                    off,
                )?);
            }
        }
        let aspect = if cfg.use_aspect {
            let out = cfg.aspect_groups * c_s;
            Some(ConvParams::new(
                gaussian_tensor(Shape4::new(out, c, 1, 1), 0.01, &mut rng),
                vec![T::from_f64(bank_bias); out],
            )?)
        } else {
            None
        };

        let d_in = cfg.pool_h * cfg.pool_w * c_s;
        let width = cfg.resolved_head_width();
        let fc1 = FcParams::new(
            gaussian_tensor(
                Shape4::new(width, d_in, 1, 1),
                (2.0 / d_in as f64).sqrt(),
                &mut rng,
            ),
            vec![T::ZERO; width],
        )?;
        let fc_cls = FcParams::new(
            gaussian_tensor(Shape4::new(cfg.classes + 1, width, 1, 1), 0.01, &mut rng),
            vec![T::ZERO; cfg.classes + 1],
        )?;
        let fc_reg = FcParams::new(
            gaussian_tensor(Shape4::new(4, width, 1, 1), 0.01, &mut rng),
            vec![T::ZERO; 4],
        )?;

        Ok(Detector {
            cfg,
            backbone,
            reduce,
            subregion,
            aspect,
            fc1,
            fc_cls,
            fc_reg,
            offsets,
        })
    }

    /// Visit every parameter tensor in a fixed order (kernel before bias).
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(String, &mut Tensor4<T>)) {
        for (i, conv) in self.backbone.iter_mut().enumerate() {
            f(format!("backbone{}.kernel", i + 1), &mut conv.kernel);
            f(format!("backbone{}.bias", i + 1), &mut conv.bias);
        }
        f("reduce.kernel".to_string(), &mut self.reduce.kernel);
        f("reduce.bias".to_string(), &mut self.reduce.bias);
        for (k, conv) in self.subregion.iter_mut().enumerate() {
            f(format!("subregion{}.kernel", k + 1), &mut conv.kernel);
            f(format!("subregion{}.bias", k + 1), &mut conv.bias);
        }
        if let Some(aspect) = self.aspect.as_mut() {
            f("aspect.kernel".to_string(), &mut aspect.kernel);
            f("aspect.bias".to_string(), &mut aspect.bias);
        }
        f("fc1.weight".to_string(), &mut self.fc1.weight);
        f("fc1.bias".to_string(), &mut self.fc1.bias);
        f("cls.weight".to_string(), &mut self.fc_cls.weight);
        f("cls.bias".to_string(), &mut self.fc_cls.bias);
        f("reg.weight".to_string(), &mut self.fc_reg.weight);
        f("reg.bias".to_string(), &mut self.fc_reg.bias);
    }

    pub fn param_names_and_shapes(&mut self) -> Vec<(String, Shape4)> {
        let mut out = Vec::new();
        self.visit_params_mut(|name, t| out.push((name, t.shape())));
        out
    }

    /// Total number of scalar parameters, counted from the live tensors.
    pub fn parameter_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params_mut(|_, t| total += t.len());
        total
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(|_, t| {
            t.ensure_grad();
            t.zero_grad();
        });
    }

    /// Backbone: conv-relu, 2x2 pool, conv-relu, 2x2 pool, conv-relu,
    /// conv-relu. Spatial stride 4 overall.
    pub fn backbone_forward(&self, image: &Tensor4<T>) -> Result<BackboneCache<T>> {
        let is = image.shape();
        if is.c != 3 {
            return Err(Error::shape("backbone", "(n, 3, H, W)", is));
        }
        if is.h % self.cfg.spatial_stride != 0 || is.w % self.cfg.spatial_stride != 0 {
            return Err(Error::invalid(
                "backbone",
                format!(
                    "spatial dims {}x{} must be multiples of stride {}",
                    is.h, is.w, self.cfg.spatial_stride
                ),
            ));
        }
        let pre1 = crate::ops::conv2d(image, &self.backbone[0])?;
        let post1 = relu(&pre1);
        let (pool1, prov1) = max_pool2x2(&post1)?;
        let pre2 = crate::ops::conv2d(&pool1, &self.backbone[1])?;
        let post2 = relu(&pre2);
        let (pool2, prov2) = max_pool2x2(&post2)?;
        let pre3 = crate::ops::conv2d(&pool2, &self.backbone[2])?;
        let post3 = relu(&pre3);
        let pre4 = crate::ops::conv2d(&post3, &self.backbone[3])?;
        let post4 = relu(&pre4);
        post4.assert_finite("backbone output")?;
        Ok(BackboneCache {
            image: image.clone(),
            pre: [pre1, pre2, pre3, pre4],
            post: [post1, post2, post3, post4],
            pooled: [pool1, pool2],
            pool_prov: [prov1, prov2],
        })
    }

    pub(crate) fn backbone_backward(
        &mut self,
        cache: &BackboneCache<T>,
        feat_grad: Tensor4<T>,
    ) -> Result<()> {
        let g = relu_backward(&cache.pre[3], &feat_grad)?;
        let g = conv2d_backward(&cache.post[2], &mut self.backbone[3], &g)?;
        let g = relu_backward(&cache.pre[2], &g)?;
        let g = conv2d_backward(&cache.pooled[1], &mut self.backbone[2], &g)?;
        let mut gpost2 = Tensor4::zeros(cache.post[1].shape());
        max_pool2x2_backward(&g, &cache.pool_prov[1], gpost2.data_mut())?;
        let g = relu_backward(&cache.pre[1], &gpost2)?;
        let g = conv2d_backward(&cache.pooled[0], &mut self.backbone[1], &g)?;
        let mut gpost1 = Tensor4::zeros(cache.post[0].shape());
        max_pool2x2_backward(&g, &cache.pool_prov[0], gpost1.data_mut())?;
        let g = relu_backward(&cache.pre[0], &gpost1)?;
        conv2d_backward(&cache.image, &mut self.backbone[0], &g)?;
        Ok(())
    }

    /// Per-image forward through backbone, reduction, and both banks.
    pub fn image_forward(&self, image: &Tensor4<T>) -> Result<ImageForward<T>> {
        let bb = self.backbone_forward(image)?;
        let feat = bb.post[3].clone();
        self.banks_forward(feat, Some(bb))
    }

    /// Forward from an externally supplied feature map, skipping the
    /// backbone; gradient checks drive the attention/head composition alone
    /// through this entry point.
    pub fn forward_from_features(&self, feat: &Tensor4<T>) -> Result<ImageForward<T>> {
        self.banks_forward(feat.clone(), None)
    }

    fn banks_forward(
        &self,
        feat: Tensor4<T>,
        bb: Option<BackboneCache<T>>,
    ) -> Result<ImageForward<T>> {
        let reduced = reduce_dim(&feat, &self.reduce)?;
        let sr_bank = if self.cfg.use_subregion {
            let mut bank = build_subregion_bank(&feat, &self.subregion, &self.offsets)?;
            if self.cfg.sigmoid_banks {
                bank.values = sigmoid(&bank.values);
            }
            Some(bank)
        } else {
            None
        };
        let ar_bank = if let Some(aspect) = &self.aspect {
            let mut bank = build_aspect_bank(&feat, aspect, self.cfg.aspect_groups)?;
            if self.cfg.sigmoid_banks {
                bank.values = sigmoid(&bank.values);
            }
            Some(bank)
        } else {
            None
        };
        Ok(ImageForward {
            bb,
            feat,
            reduced,
            sr_bank,
            ar_bank,
        })
    }

    /// Per-RoI forward from a prepared image context. The RoI must already
    /// be rebased to image_index 0.
    pub fn roi_forward(&self, img: &ImageForward<T>, roi: &RoI) -> Result<RoiForward<T>> {
        let cfg = &self.cfg;
        let (f, f_prov) = roi_max_pool(
            &img.reduced,
            roi,
            cfg.pool_h,
            cfg.pool_w,
            cfg.spatial_stride,
        )?;
        let m_sr = match &img.sr_bank {
            Some(bank) => Some(selective_roi_pool(
                bank,
                roi,
                cfg.pool_h,
                cfg.pool_w,
                cfg.spatial_stride,
                SelectMode::SubRegion(cfg.subregion),
            )?),
            None => None,
        };
        let m_ar = match &img.ar_bank {
            Some(bank) => Some(selective_roi_pool(
                bank,
                roi,
                cfg.pool_h,
                cfg.pool_w,
                cfg.spatial_stride,
                SelectMode::Aspect {
                    thresholds: cfg.aspect_thresholds,
                },
            )?),
            None => None,
        };
        let f_hat = match (&m_sr, &m_ar) {
            (Some(sr), Some(ar)) => {
                let summed = elementwise_add(&sr.values, &ar.values)?;
                elementwise_mul(&f, &summed)?
            }
            (Some(sr), None) => elementwise_mul(&f, &sr.values)?,
            (None, Some(ar)) => elementwise_mul(&f, &ar.values)?,
            (None, None) => f.clone(),
        };
        let flat = f_hat.data().to_vec();
        let fc1_pre = fully_connected(&flat, &self.fc1)?;
        let fc1_post = relu_slice(&fc1_pre);
        let logits = fully_connected(&fc1_post, &self.fc_cls)?;
        let deltas = fully_connected(&fc1_post, &self.fc_reg)?;
        Ok(RoiForward {
            roi: *roi,
            f,
            f_prov,
            m_sr,
            m_ar,
            f_hat,
            flat,
            fc1_pre,
            fc1_post,
            logits,
            deltas,
        })
    }

    /// Classification and (for foreground) regression loss of one RoI.
    pub fn roi_losses(&self, rf: &RoiForward<T>, label: &LabeledRoi) -> Result<(T, T)> {
        let (cls_loss, _) = softmax_cross_entropy(&rf.logits, label.class)?;
        let reg_loss = match &label.delta {
            Some(delta) => smooth_l1(&rf.deltas, &self.normalized_target(delta))?,
            None => T::ZERO,
        };
        Ok((cls_loss, reg_loss))
    }

    pub(crate) fn normalized_target(&self, delta: &BoxDelta) -> [T; 4] {
        let s = &self.cfg.bbox_stds;
        [
            T::from_f64(delta.tx / s[0]),
            T::from_f64(delta.ty / s[1]),
            T::from_f64(delta.tw / s[2]),
            T::from_f64(delta.th / s[3]),
        ]
    }

    /// Backward for one RoI: head parameter grads accumulate in place,
    /// pooled-feature gradients scatter into the per-image accumulators.
    pub(crate) fn roi_backward(
        &mut self,
        rf: &RoiForward<T>,
        label: &LabeledRoi,
        scale: T,
        grads: &mut ImageGrads<T>,
    ) -> Result<()> {
        let (_, probs) = softmax_cross_entropy(&rf.logits, label.class)?;
        let grad_logits = softmax_cross_entropy_backward(&probs, label.class, scale);
        let grad_deltas = match &label.delta {
            Some(delta) => smooth_l1_backward(&rf.deltas, &self.normalized_target(delta), scale)?,
            None => vec![T::ZERO; 4],
        };
        let g_cls = fully_connected_backward(&rf.fc1_post, &mut self.fc_cls, &grad_logits)?;
        let g_reg = fully_connected_backward(&rf.fc1_post, &mut self.fc_reg, &grad_deltas)?;
        let g_post: Vec<T> = g_cls.iter().zip(&g_reg).map(|(&a, &b)| a + b).collect();
        let g_pre = relu_slice_backward(&rf.fc1_pre, &g_post);
        let g_flat = fully_connected_backward(&rf.flat, &mut self.fc1, &g_pre)?;
        let g_hat = Tensor4::from_vec(rf.f_hat.shape(), g_flat)?;

        match (&rf.m_sr, &rf.m_ar) {
            (Some(sr), Some(ar)) => {
                let (g_f, g_sr, g_ar) = merge_backward(&g_hat, &rf.f, &sr.values, &ar.values)?;
                roi_max_pool_backward(&g_f, &rf.f_prov, &mut grads.reduced)?;
                selective_pool_backward(&g_sr, sr, grads.sr_bank.as_mut().unwrap())?;
                selective_pool_backward(&g_ar, ar, grads.ar_bank.as_mut().unwrap())?;
            }
            (Some(sr), None) => {
                let (g_f, g_sr) = elementwise_mul_backward(&g_hat, &rf.f, &sr.values)?;
                roi_max_pool_backward(&g_f, &rf.f_prov, &mut grads.reduced)?;
                selective_pool_backward(&g_sr, sr, grads.sr_bank.as_mut().unwrap())?;
            }
            (None, Some(ar)) => {
                let (g_f, g_ar) = elementwise_mul_backward(&g_hat, &rf.f, &ar.values)?;
                roi_max_pool_backward(&g_f, &rf.f_prov, &mut grads.reduced)?;
                selective_pool_backward(&g_ar, ar, grads.ar_bank.as_mut().unwrap())?;
            }
            (None, None) => {
                roi_max_pool_backward(&g_hat, &rf.f_prov, &mut grads.reduced)?;
            }
        }
        Ok(())
    }

    /// Backward from the accumulated bank/reduction gradients through the
    /// attention convolutions and the backbone.
    pub(crate) fn image_backward(
        &mut self,
        img: &ImageForward<T>,
        grads: ImageGrads<T>,
    ) -> Result<()> {
        let fs = img.feat.shape();
        let mut feat_grad = Tensor4::zeros(fs);

        if let (Some(bank), Some(mut bank_grad)) = (&img.sr_bank, grads.sr_bank) {
            if self.cfg.sigmoid_banks {
                sigmoid_backward_from_output(&bank.values, &mut bank_grad);
            }
            let c_s = bank.c_s;
            let hw = fs.h * fs.w;
            for k in 0..self.subregion.len() {
                let mut slice_grad = Tensor4::zeros(Shape4::new(1, c_s, fs.h, fs.w));
                slice_grad
                    .data_mut()
                    .copy_from_slice(&bank_grad[k * c_s * hw..(k + 1) * c_s * hw]);
                let g = shifted_conv2d_backward(&img.feat, &mut self.subregion[k], &slice_grad)?;
                add_assign(feat_grad.data_mut(), g.data());
            }
        }
        if let (Some(bank), Some(aspect), Some(mut bank_grad)) =
            (&img.ar_bank, self.aspect.as_mut(), grads.ar_bank)
        {
            if self.cfg.sigmoid_banks {
                sigmoid_backward_from_output(&bank.values, &mut bank_grad);
            }
            let grad_tensor = Tensor4::from_vec(bank.values.shape(), bank_grad)?;
            let g = conv2d_backward(&img.feat, aspect, &grad_tensor)?;
            add_assign(feat_grad.data_mut(), g.data());
        }
        let reduced_grad = Tensor4::from_vec(img.reduced.shape(), grads.reduced)?;
        let g = conv2d_backward(&img.feat, &mut self.reduce, &reduced_grad)?;
        add_assign(feat_grad.data_mut(), g.data());

        match &img.bb {
            Some(bb) => self.backbone_backward(bb, feat_grad),
            None => Ok(()),
        }
    }

    /// One SGD step over a minibatch of (image tensor, ground truths,
    /// proposals). Returns per-RoI mean losses. Regression loss is exactly 0
    /// when no foreground RoI was sampled.
    pub fn train_step(
        &mut self,
        batch: &[(&Tensor4<T>, &[(usize, Rect)], &[RoI])],
        opt: &mut SgdMomentum<T>,
        rng: &mut Rng,
    ) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        self.zero_grads();
        let total_rois = batch.len() * self.cfg.rois_per_image;
        let scale = T::from_f64(1.0 / total_rois as f64);
        let sampler = SamplerConfig {
            batch_size: self.cfg.rois_per_image,
            fg_fraction: self.cfg.fg_fraction,
            fg_iou: self.cfg.fg_iou,
        };
        let mut cls_sum = 0.0;
        let mut reg_sum = 0.0;
        for (image, gts, proposals) in batch {
            let img = self.image_forward(image)?;
            let mut grads = ImageGrads::new(&img);
            let labeled = sample_rois(proposals, gts, &sampler, rng)?;
            for label in &labeled {
                let roi = label.roi.with_image_index(0);
                let rf = self.roi_forward(&img, &roi)?;
                let (cls_loss, reg_loss) = self.roi_losses(&rf, label)?;
                cls_sum += cls_loss.to_f64();
                reg_sum += reg_loss.to_f64();
                self.roi_backward(&rf, label, scale, &mut grads)?;
            }
            self.image_backward(&img, grads)?;
        }
        opt.step(self);
        Ok(StepLosses {
            cls: cls_sum / total_rois as f64,
            reg: reg_sum / total_rois as f64,
        })
    }

    /// Score proposals on one image: per-proposal class scores and decoded
    /// boxes, background-argmax proposals dropped, per-class NMS, survivors
    /// sorted by descending score.
    pub fn infer(&self, image: &Tensor4<T>, proposals: &[RoI]) -> Result<Vec<Detection>> {
        let img = self.image_forward(image)?;
        let (img_h, img_w) = (image.shape().h as f64, image.shape().w as f64);
        let mut per_class: Vec<Vec<(Rect, f64)>> = vec![Vec::new(); self.cfg.classes + 1];
        for p in proposals {
            let roi = p.with_image_index(0);
            let rf = self.roi_forward(&img, &roi)?;
            let probs = crate::ops::softmax(&rf.logits);
            let (mut best_class, mut best_score) = (0usize, probs[0].to_f64());
            for (c, &p) in probs.iter().enumerate() {
                if p.to_f64() > best_score {
                    best_score = p.to_f64();
                    best_class = c;
                }
            }
            if best_class == 0 {
                continue;
            }
            let s = &self.cfg.bbox_stds;
            let delta = BoxDelta {
                tx: rf.deltas[0].to_f64() * s[0],
                ty: rf.deltas[1].to_f64() * s[1],
                tw: rf.deltas[2].to_f64() * s[2],
                th: rf.deltas[3].to_f64() * s[3],
            };
            let rect = decode_delta(&delta, &roi.rect).clip(img_w, img_h);
            if rect.is_valid() {
                per_class[best_class].push((rect, best_score));
            }
        }
        let mut detections = Vec::new();
        for (class, dets) in per_class.iter().enumerate().skip(1) {
            for &idx in &nms(dets, self.cfg.nms_threshold) {
                detections.push(Detection {
                    class,
                    score: dets[idx].1,
                    rect: dets[idx].0,
                });
            }
        }
        detections.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ok(detections)
    }
}

/// Saved activations of one backbone pass, for the backward sweep.
pub struct BackboneCache<T: Scalar> {
    pub(crate) image: Tensor4<T>,
    pub(crate) pre: [Tensor4<T>; 4],
    pub(crate) post: [Tensor4<T>; 4],
    pub(crate) pooled: [Tensor4<T>; 2],
    pub(crate) pool_prov: [Vec<usize>; 2],
}

impl<T: Scalar> BackboneCache<T> {
    pub fn output(&self) -> &Tensor4<T> {
        &self.post[3]
    }
}

/// Per-image forward state shared by all of that image's RoIs. `bb` is None
/// when the pipeline was entered at the feature level.
pub struct ImageForward<T: Scalar> {
    bb: Option<BackboneCache<T>>,
    pub feat: Tensor4<T>,
    pub reduced: Tensor4<T>,
    pub sr_bank: Option<AttentionBank<T>>,
    pub ar_bank: Option<AttentionBank<T>>,
}

/// Per-RoI forward state kept for the backward pass.
pub struct RoiForward<T: Scalar> {
    pub roi: RoI,
    pub f: Tensor4<T>,
    pub f_prov: Vec<usize>,
    pub m_sr: Option<AttentionMap<T>>,
    pub m_ar: Option<AttentionMap<T>>,
    pub f_hat: Tensor4<T>,
    pub flat: Vec<T>,
    pub fc1_pre: Vec<T>,
    pub fc1_post: Vec<T>,
    pub logits: Vec<T>,
    pub deltas: Vec<T>,
}

pub(crate) struct ImageGrads<T: Scalar> {
    reduced: Vec<T>,
    sr_bank: Option<Vec<T>>,
    ar_bank: Option<Vec<T>>,
}

impl<T: Scalar> ImageGrads<T> {
    pub(crate) fn new(img: &ImageForward<T>) -> ImageGrads<T> {
        ImageGrads {
            reduced: vec![T::ZERO; img.reduced.len()],
            sr_bank: img.sr_bank.as_ref().map(|b| vec![T::ZERO; b.values.len()]),
            ar_bank: img.ar_bank.as_ref().map(|b| vec![T::ZERO; b.values.len()]),
        }
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::ONE / (T::ONE + (-v).exp()))
}

fn sigmoid_backward_from_output<T: Scalar>(output: &Tensor4<T>, grad: &mut [T]) {
    for (g, &y) in grad.iter_mut().zip(output.data()) {
        *g = *g * y * (T::ONE - y);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub cls: f64,
    pub reg: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Plain SGD with momentum; velocity buffers are keyed by visit order.
pub struct SgdMomentum<T: Scalar> {
    lr: T,
    momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64) -> SgdMomentum<T> {
        SgdMomentum {
            lr: T::from_f64(lr),
            momentum: T::from_f64(momentum),
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Detector<T>) {
        let mut idx = 0;
        let (lr, mu) = (self.lr, self.momentum);
        let velocity = &mut self.velocity;
        model.visit_params_mut(|_, t| {
            if velocity.len() == idx {
                velocity.push(vec![T::ZERO; t.len()]);
            }
            let v = &mut velocity[idx];
            let (data, grad) = t.data_and_grad_mut();
            // v = mu*v + g; p -= lr*v (applied below via split borrow)
            for i in 0..data.len() {
                v[i] = mu * v[i] + grad[i];
            }
            idx += 1;
        });
        // second pass applies the update; separate so the borrow above stays simple
        let mut idx2 = 0;
        let velocity = &self.velocity;
        model.visit_params_mut(|_, t| {
            let v = &velocity[idx2];
            for (p, &vi) in t.data_mut().iter_mut().zip(v) {
                *p = *p - lr * vi;
            }
            idx2 += 1;
        });
    }
}

/// Deterministic proposals for a scene under this config.
pub fn scene_proposals(scene: &Scene, cfg: &DetectorConfig) -> Vec<RoI> {
    generate_proposals(
        scene,
        cfg.proposals_per_image,
        cfg.proposal_jitter,
        cfg.seed ^ PROPOSAL_SALT,
    )
}

/// Full training loop: fixed proposals per scene, minibatches of
/// `images_per_batch` scenes drawn per step, `iterations` SGD steps.
pub fn train_detector<T: Scalar>(
    model: &mut Detector<T>,
    scenes: &[Scene],
    mut on_step: impl FnMut(usize, &StepLosses),
) -> Result<Vec<StepLosses>> {
    if scenes.is_empty() {
        return Err(Error::invalid("train_detector", "no scenes"));
    }
    let cfg = model.cfg.clone();
    let images: Vec<Tensor4<T>> = scenes.iter().map(|s| s.image_tensor()).collect();
    let proposals: Vec<Vec<RoI>> = scenes.iter().map(|s| scene_proposals(s, &cfg)).collect();
    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum);
    let mut rng = Rng::new(cfg.seed).derive(TRAIN_SALT);
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.images_per_batch);
        for _ in 0..cfg.images_per_batch {
            let i = rng.below(scenes.len());
            batch.push((
                &images[i],
                scenes[i].annotations.as_slice(),
                proposals[i].as_slice(),
            ));
        }
        let losses = model.train_step(&batch, &mut opt, &mut rng)?;
        on_step(step, &losses);
        log.push(losses);
    }
    Ok(log)
}

/// One detection: class id, softmax score, box in image pixels.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub rect: Rect,
}

/// Run inference over whole scenes with their deterministic proposals.
pub fn detect_scenes<T: Scalar>(
    model: &Detector<T>,
    scenes: &[Scene],
) -> Result<Vec<Vec<Detection>>> {
    scenes
        .iter()
        .map(|scene| {
            let image: Tensor4<T> = scene.image_tensor();
            let proposals = scene_proposals(scene, &model.cfg);
            model.infer(&image, &proposals)
        })
        .collect()
}

/// VOC-style average precision, integrated over the full PR curve with the
/// precision envelope. Greedy matching at `iou_thr`, each ground truth
/// matched at most once. Classes absent from the ground truth have no AP and
/// are excluded from the mean.
pub fn evaluate_map(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<(usize, Rect)>],
    iou_thr: f64,
    classes: usize,
) -> (Vec<Option<f64>>, f64) {
    let mut aps: Vec<Option<f64>> = Vec::with_capacity(classes);
    for class in 1..=classes {
        let npos: usize = gts_per_image
            .iter()
            .map(|gts| gts.iter().filter(|(c, _)| *c == class).count())
            .sum();
        if npos == 0 {
            aps.push(None);
            continue;
        }
        // gather this class's detections across images, score-descending,
        // ties broken by (image, insertion) order for permutation stability
        let mut dets: Vec<(usize, usize, f64, Rect)> = Vec::new();
        for (img, ds) in dets_per_image.iter().enumerate() {
            for (i, d) in ds.iter().enumerate() {
                if d.class == class {
                    dets.push((img, i, d.score, d.rect));
                }
            }
        }
        dets.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });

        let mut matched: Vec<Vec<bool>> = gts_per_image
            .iter()
            .map(|gts| vec![false; gts.len()])
            .collect();
        let mut tp = vec![0.0f64; dets.len()];
        let mut fp = vec![0.0f64; dets.len()];
        for (di, &(img, _, _, rect)) in dets.iter().enumerate() {
            let mut best_iou = 0.0;
            let mut best_gt = None;
            for (gi, (gc, gbox)) in gts_per_image[img].iter().enumerate() {
                if *gc != class || matched[img][gi] {
                    continue;
                }
                let v = crate::roi::iou(&rect, gbox);
                if v > best_iou {
                    best_iou = v;
                    best_gt = Some(gi);
                }
            }
            match best_gt {
                Some(gi) if best_iou >= iou_thr => {
                    matched[img][gi] = true;
                    tp[di] = 1.0;
                }
                _ => fp[di] = 1.0,
            }
        }
        let mut prec = Vec::with_capacity(dets.len());
        let mut rec = Vec::with_capacity(dets.len());
        let (mut tps, mut fps) = (0.0, 0.0);
        for i in 0..dets.len() {
            tps += tp[i];
            fps += fp[i];
            prec.push(tps / (tps + fps));
            rec.push(tps / npos as f64);
        }
        // precision envelope, then integrate over recall steps
        for i in (0..prec.len().saturating_sub(1)).rev() {
            if prec[i] < prec[i + 1] {
                prec[i] = prec[i + 1];
            }
        }
        let mut ap = 0.0;
        let mut prev_rec = 0.0;
        for i in 0..prec.len() {
            ap += (rec[i] - prev_rec) * prec[i];
            prev_rec = rec[i];
        }
        aps.push(Some(ap));
    }
    let defined: Vec<f64> = aps.iter().filter_map(|a| *a).collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    (aps, map)
}

/// Evaluate a model on scenes: per-class AP plus mAP at the given IoU.
pub fn evaluate_detector<T: Scalar>(
    model: &Detector<T>,
    scenes: &[Scene],
    iou_thr: f64,
) -> Result<(Vec<Option<f64>>, f64)> {
    let dets = detect_scenes(model, scenes)?;
    let gts: Vec<Vec<(usize, Rect)>> = scenes.iter().map(|s| s.annotations.clone()).collect();
    Ok(evaluate_map(&dets, &gts, iou_thr, model.cfg.classes))
}

// ---- closed-form parameter accounting ---------------------------------

/// Parameters of the head's first fc layer: pool_h*pool_w*C_s*width + width.
pub fn head_first_fc_params(cfg: &DetectorConfig) -> usize {
    let d_in = cfg.pool_h * cfg.pool_w * cfg.selective_channels;
    let width = cfg.resolved_head_width();
    d_in * width + width
}

/// Closed-form total parameter count; must agree with
/// `Detector::parameter_count` for every configuration.
pub fn closed_form_param_count(cfg: &DetectorConfig) -> usize {
    let plan = backbone_plan(cfg.channels);
    let mut total = 0;
    let mut c_in = 3;
    for &c_out in &plan {
        total += c_out * c_in * 9 + c_out;
        c_in = c_out;
    }
    let (c, c_s) = (cfg.channels, cfg.selective_channels);
    total += c_s * c + c_s; // reduction
    if cfg.use_subregion {
        total += cfg.subregion.count() * (c_s * c * 9 + c_s);
    }
    if cfg.use_aspect {
        total += cfg.aspect_groups * c_s * c + cfg.aspect_groups * c_s;
    }
    let width = cfg.resolved_head_width();
    total += head_first_fc_params(cfg);
    total += width * (cfg.classes + 1) + cfg.classes + 1;
    total += width * 4 + 4;
    total
}

/// Head and attention parameters of the classical two-4096-fc classifier on
/// the same flattened input, for the parameter-size comparison.
pub fn two_fc4096_head_params(cfg: &DetectorConfig) -> usize {
    let d_in = cfg.pool_h * cfg.pool_w * cfg.selective_channels;
    d_in * 4096 + 4096 + 4096 * 4096 + 4096
}

/// Head + attention-conv parameter total of this detector (excludes the
/// backbone, which any head variant shares).
pub fn head_and_attention_params(cfg: &DetectorConfig) -> usize {
    let (c, c_s) = (cfg.channels, cfg.selective_channels);
    let mut total = c_s * c + c_s;
    if cfg.use_subregion {
        total += cfg.subregion.count() * (c_s * c * 9 + c_s);
    }
    if cfg.use_aspect {
        total += cfg.aspect_groups * c_s * c + cfg.aspect_groups * c_s;
    }
    let width = cfg.resolved_head_width();
    total += head_first_fc_params(cfg);
    total += width * (cfg.classes + 1) + cfg.classes + 1;
    total += width * 4 + 4;
    total
}

// ---- checkpointing ------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "FSNCKPT 1";

/// Write the model as a text manifest (config + parameter table) followed by
/// the concatenated serialized tensors in manifest order.
pub fn save_checkpoint<T: Scalar>(model: &mut Detector<T>, path: &Path) -> Result<()> {
    let cfg_text = model.cfg.canonical_text();
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("hash {:016x}\n", model.cfg.config_hash()));
    header.push_str(&format!("config_lines {}\n", cfg_text.lines().count()));
    header.push_str(&cfg_text);
    let entries = model.param_names_and_shapes();
    header.push_str(&format!("params {}\n", entries.len()));
    for (name, shape) in &entries {
        header.push_str(&format!(
            "{name} {} {} {} {}\n",
            shape.n, shape.c, shape.h, shape.w
        ));
    }
    header.push_str("DATA\n");

    let mut bytes = header.into_bytes();
    let mut failed = None;
    model.visit_params_mut(|_, t| {
        if failed.is_none() {
            if let Err(e) = write_tensor(t, &mut bytes) {
                failed = Some(e);
            }
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Load a checkpoint written by `save_checkpoint`. The embedded config is
/// validated against its recorded hash and the parameter table must match
/// the freshly constructed model exactly.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Detector<T>> {
    let raw = fs::read(path)?;
    let marker = b"DATA\n";
    let data_at = raw
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Format("checkpoint missing DATA marker".into()))?;
    let header = std::str::from_utf8(&raw[..data_at])
        .map_err(|_| Error::Format("checkpoint header is not utf-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let hash_line = lines
        .next()
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let stored_hash = hash_line
        .strip_prefix("hash ")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| Error::Format("bad hash line".into()))?;
    let n_cfg: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("config_lines "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("bad config_lines line".into()))?;

    let mut cfg = DetectorConfig::default();
    for _ in 0..n_cfg {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format("truncated config block".into()))?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config line '{line}'")))?;
        if !cfg.try_set(key, value)? {
            return Err(Error::Format(format!("unknown config key '{key}'")));
        }
    }
    if cfg.config_hash() != stored_hash {
        return Err(Error::Format(
            "config hash mismatch: checkpoint corrupted or edited".into(),
        ));
    }

    let n_params: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("bad params line".into()))?;
    let mut manifest = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format("truncated parameter table".into()))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(Error::Format(format!("bad parameter line '{line}'")));
        }
        let dims: Vec<usize> = parts[1..]
            .iter()
            .map(|p| p.parse().map_err(|_| Error::Format("bad dim".into())))
            .collect::<Result<_>>()?;
        manifest.push((
            parts[0].to_string(),
            Shape4::new(dims[0], dims[1], dims[2], dims[3]),
        ));
    }

    let mut model: Detector<T> = Detector::new(cfg)?;
    let expected = model.param_names_and_shapes();
    if expected.len() != manifest.len() {
        return Err(Error::Format(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            expected.len(),
            manifest.len()
        )));
    }
    for ((en, es), (mn, ms)) in expected.iter().zip(&manifest) {
        if en != mn || es != ms {
            return Err(Error::Format(format!(
                "parameter mismatch: model {en} {es}, checkpoint {mn} {ms}"
            )));
        }
    }

    let mut cursor = &raw[data_at + marker.len()..];
    let mut failed = None;
    model.visit_params_mut(|name, t| {
        if failed.is_some() {
            return;
        }
        match read_tensor::<T, _>(&mut cursor) {
            Ok(loaded) => {
                if loaded.shape() != t.shape() {
                    failed = Some(Error::shape("load_checkpoint", t.shape(), loaded.shape()));
                } else {
                    t.data_mut().copy_from_slice(loaded.data());
                }
            }
            Err(e) => failed = Some(Error::Format(format!("reading tensor {name}: {e}"))),
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DatasetParams};

    /// Small config that trains in well under a second per step.
    fn tiny_cfg() -> DetectorConfig {
        DetectorConfig {
            channels: 8,
            selective_channels: 4,
            head_width: 32,
            iterations: 2,
            rois_per_image: 16,
            proposals_per_image: 40,
            ..Default::default()
        }
    }

    fn tiny_scenes(n: usize, seed: u64) -> Vec<Scene> {
        generate_dataset(&DatasetParams {
            n_scenes: n,
            width: 64,
            height: 64,
            seed,
        })
    }

    #[test]
    fn config_round_trips_through_canonical_text() {
        let cfg = DetectorConfig {
            seed: 99,
            shift_direction: ShiftDirection::Outside,
            use_aspect: false,
            ..Default::default()
        };
        let text = cfg.canonical_text();
        let mut back = DetectorConfig::default();
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.try_set(k, v).unwrap(), "key {k} not recognized");
        }
        // head_width resolves to an explicit value in the canonical text
        assert_eq!(back.resolved_head_width(), cfg.resolved_head_width());
        assert_eq!(back.canonical_text(), text);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn head_width_rule() {
        let mut cfg = DetectorConfig::default();
        assert_eq!(cfg.resolved_head_width(), 500);
        cfg.selective_channels = 1;
        assert_eq!(cfg.resolved_head_width(), 100);
        cfg.head_width = 64;
        assert_eq!(cfg.resolved_head_width(), 64);
    }

    #[test]
    fn unknown_config_key_is_reported() {
        let mut cfg = DetectorConfig::default();
        assert!(!cfg.try_set("no_such_key", "1").unwrap());
        assert!(cfg.try_set("momentum", "not a number").is_err());
    }

    #[test]
    fn first_fc_parameter_count_is_980500_with_defaults() {
        let cfg = DetectorConfig::default();
        assert_eq!(head_first_fc_params(&cfg), 980_500);
        // 7 * 7 * 40 * 500 + 500, spelled out
        assert_eq!(head_first_fc_params(&cfg), 7 * 7 * 40 * 500 + 500);
    }

    #[test]
    fn closed_form_count_matches_live_model() {
        for cfg in [
            DetectorConfig::default(),
            DetectorConfig {
                use_subregion: false,
                ..Default::default()
            },
            DetectorConfig {
                use_aspect: false,
                ..Default::default()
            },
            DetectorConfig {
                use_subregion: false,
                use_aspect: false,
                ..Default::default()
            },
            tiny_cfg(),
            DetectorConfig {
                selective_channels: 1,
                ..Default::default()
            },
        ] {
            let mut model: Detector<f32> = Detector::new(cfg.clone()).unwrap();
            assert_eq!(
                model.parameter_count(),
                closed_form_param_count(&cfg),
                "mismatch for {cfg:?}"
            );
        }
    }

    #[test]
    fn head_is_far_smaller_than_two_fc4096_head() {
        let cfg = DetectorConfig::default();
        assert!(head_and_attention_params(&cfg) < two_fc4096_head_params(&cfg));
    }

    #[test]
    fn backbone_shapes_and_zero_case() {
        let model: Detector<f32> = Detector::new(tiny_cfg()).unwrap();
        let image = Tensor4::zeros(Shape4::new(1, 3, 64, 48));
        let cache = model.backbone_forward(&image).unwrap();
        let out = cache.output().shape();
        assert_eq!((out.h, out.w), (16, 12)); // input / 4
        assert_eq!(out.c, 8);
        // zero image and zero biases give a zero feature map
        assert!(cache.output().data().iter().all(|&v| v == 0.0));

        // non-multiple-of-stride dims are rejected
        let bad = Tensor4::<f32>::zeros(Shape4::new(1, 3, 30, 64));
        assert!(model.backbone_forward(&bad).is_err());
    }

    #[test]
    fn zero_head_weights_give_uniform_scores() {
        let mut model: Detector<f32> = Detector::new(tiny_cfg()).unwrap();
        model
            .fc_cls
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        model
            .fc_cls
            .bias
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let scenes = tiny_scenes(1, 0);
        let image: Tensor4<f32> = scenes[0].image_tensor();
        let img = model.image_forward(&image).unwrap();
        let roi = RoI::new(0, Rect::new(4.0, 4.0, 40.0, 40.0)).unwrap();
        let rf = model.roi_forward(&img, &roi).unwrap();
        let probs = crate::ops::softmax(&rf.logits);
        for &p in &probs {
            assert!((p - 0.25).abs() < 1e-6, "probs {probs:?}");
        }
    }

    #[test]
    fn train_step_is_deterministic_and_loss_finite() {
        let scenes = tiny_scenes(4, 3);
        let run = || -> Vec<(f64, f64)> {
            let mut model: Detector<f32> = Detector::new(tiny_cfg()).unwrap();
            let log = train_detector(&mut model, &scenes, |_, _| {}).unwrap();
            log.iter().map(|l| (l.cls, l.reg)).collect()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "two identical runs must agree bit-exactly");
        for (cls, reg) in a {
            assert!(cls.is_finite() && reg.is_finite());
            assert!(cls > 0.0);
        }
    }

    #[test]
    fn all_background_batch_has_zero_regression_loss() {
        let scenes = tiny_scenes(1, 5);
        let mut model: Detector<f32> = Detector::new(tiny_cfg()).unwrap();
        let image: Tensor4<f32> = scenes[0].image_tensor();
        // a proposal far from every object stays background
        let far = vec![RoI::new(0, Rect::new(0.5, 0.5, 3.5, 3.5)).unwrap()];
        let mut opt = SgdMomentum::new(1e-3, 0.9);
        let mut rng = Rng::new(0);
        let losses = model
            .train_step(
                &[(&image, scenes[0].annotations.as_slice(), far.as_slice())],
                &mut opt,
                &mut rng,
            )
            .unwrap();
        assert_eq!(losses.reg, 0.0);
        assert!(losses.cls > 0.0);
    }

    #[test]
    fn untrained_model_scores_near_uniform_and_nms_dedups() {
        let mut cfg = tiny_cfg();
        cfg.seed = 11;
        let model: Detector<f32> = Detector::new(cfg).unwrap();
        let scenes = tiny_scenes(1, 2);
        let image: Tensor4<f32> = scenes[0].image_tensor();
        let p = RoI::new(0, Rect::new(8.0, 8.0, 40.0, 36.0)).unwrap();
        // duplicated proposals: NMS must keep at most one per class cluster
        let detections = model.infer(&image, &[p, p, p]).unwrap();
        let mut per_class = std::collections::HashMap::new();
        for d in &detections {
            *per_class.entry(d.class).or_insert(0usize) += 1;
            // near-uniform scores from a fresh head
            assert!((d.score - 0.25).abs() < 0.05, "score {}", d.score);
        }
        for (_, count) in per_class {
            assert_eq!(count, 1);
        }
    }

    #[test]
    fn map_edge_cases_and_hand_computed_pr() {
        let gt = vec![vec![
            (1usize, Rect::new(0.0, 0.0, 10.0, 10.0)),
            (1usize, Rect::new(30.0, 30.0, 40.0, 40.0)),
        ]];
        // perfect detections
        let perfect = vec![vec![
            Detection {
                class: 1,
                score: 0.9,
                rect: Rect::new(0.0, 0.0, 10.0, 10.0),
            },
            Detection {
                class: 1,
                score: 0.8,
                rect: Rect::new(30.0, 30.0, 40.0, 40.0),
            },
        ]];
        let (_, map) = evaluate_map(&perfect, &gt, 0.5, 3);
        assert_eq!(map, 1.0);

        // no detections at all
        let (_, map) = evaluate_map(&[Vec::new()], &gt, 0.5, 3);
        assert_eq!(map, 0.0);

        // TP(0.9), FP(0.8), TP(0.7) over 2 ground truths:
        // AP = 0.5 * 1 + 0.5 * (2/3) = 5/6
        let mixed = vec![vec![
            Detection {
                class: 1,
                score: 0.9,
                rect: Rect::new(0.0, 0.0, 10.0, 10.0),
            },
            Detection {
                class: 1,
                score: 0.8,
                rect: Rect::new(60.0, 60.0, 70.0, 70.0),
            },
            Detection {
                class: 1,
                score: 0.7,
                rect: Rect::new(30.0, 30.0, 40.0, 40.0),
            },
        ]];
        let (aps, map) = evaluate_map(&mixed, &gt, 0.5, 3);
        assert!((map - 5.0 / 6.0).abs() < 1e-12);
        assert!((aps[0].unwrap() - 5.0 / 6.0).abs() < 1e-12);
        // classes 2 and 3 absent from gt: excluded, not zero
        assert!(aps[1].is_none() && aps[2].is_none());
    }

    #[test]
    fn map_invariant_to_order_of_equal_scores() {
        let gt = vec![vec![
            (1usize, Rect::new(0.0, 0.0, 10.0, 10.0)),
            (1usize, Rect::new(30.0, 30.0, 40.0, 40.0)),
        ]];
        let d1 = Detection {
            class: 1,
            score: 0.5,
            rect: Rect::new(0.0, 0.0, 10.0, 10.0),
        };
        let d2 = Detection {
            class: 1,
            score: 0.5,
            rect: Rect::new(30.0, 30.0, 40.0, 40.0),
        };
        let (_, map_a) = evaluate_map(&[vec![d1, d2]], &gt, 0.5, 1);
        let (_, map_b) = evaluate_map(&[vec![d2, d1]], &gt, 0.5, 1);
        assert_eq!(map_a, map_b);
    }

    #[test]
    fn checkpoint_round_trip_preserves_every_parameter() {
        let dir = std::env::temp_dir().join(format!("fsn_ckpt_test_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.fsn");

        let scenes = tiny_scenes(2, 7);
        let mut model: Detector<f32> = Detector::new(tiny_cfg()).unwrap();
        train_detector(&mut model, &scenes, |_, _| {}).unwrap();
        save_checkpoint(&mut model, &path).unwrap();
        let mut loaded: Detector<f32> = load_checkpoint(&path).unwrap();

        let mut originals = Vec::new();
        model.visit_params_mut(|name, t| originals.push((name, t.data().to_vec())));
        let mut idx = 0;
        loaded.visit_params_mut(|name, t| {
            assert_eq!(name, originals[idx].0);
            assert_eq!(t.data(), originals[idx].1.as_slice(), "param {name}");
            idx += 1;
        });
        assert_eq!(
            loaded.parameter_count(),
            closed_form_param_count(&loaded.cfg)
        );

        // tampering with the embedded config is caught by the hash
        let mut bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..200]).to_string();
        let needle = "momentum=0.9";
        let at = text.find(needle);
        if let Some(at) = at {
            bytes[at + needle.len() - 1] = b'8';
            let tampered = dir.join("tampered.fsn");
            fs::write(&tampered, &bytes).unwrap();
            assert!(load_checkpoint::<f32>(&tampered).is_err());
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn loss_decreases_on_single_separable_scene() {
        // one easy scene, repeated steps: classification loss must fall
        let scenes = tiny_scenes(1, 9);
        let mut cfg = tiny_cfg();
        cfg.iterations = 60;
        cfg.rois_per_image = 32;
        let mut model: Detector<f32> = Detector::new(cfg).unwrap();
        let log = train_detector(&mut model, &scenes, |_, _| {}).unwrap();
        let first = log[0].cls;
        let last = log.last().unwrap().cls;
        assert!(
            last < 0.5 * first,
            "cls loss did not halve: {first} -> {last}"
        );
    }
}

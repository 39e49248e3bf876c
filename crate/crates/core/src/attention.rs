//! Attention banks and selective RoI pooling.
//!
//! A bank stores, at every spatial position of the image feature map, the
//! candidate attention vectors for all possible sub-region (or aspect-group)
//! memberships, concatenated channel-wise: group k owns the channel slice
//! [(k-1)*C_s, k*C_s). Selective RoI pooling reads only the slice selected
//! by each pooling bin's index and max-pools it into a per-RoI h x w x C_s
//! attention map, recording argmax provenance for the backward scatter.

use crate::error::{Error, Result};
use crate::ops::{conv2d, shifted_conv2d, ConvParams};
use crate::rng::Rng;
use crate::roi::{
    aspect_group, bin_cell_range, bin_subregion_index, project_roi, RoI, SubRegionGrid,
};
use crate::tensor::{
    elementwise_add, elementwise_mul, elementwise_mul_backward, Scalar, Shape4, Tensor4,
};

/// Which way the sub-region attention convolutions shift their sampling
/// grids. `Center` points each sub-region's grid toward the RoI center,
/// `Outside` negates that, `Random` permutes the center table per seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDirection {
    Center,
    Outside,
    Random,
}

impl ShiftDirection {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftDirection::Center => "center",
            ShiftDirection::Outside => "outside",
            ShiftDirection::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<ShiftDirection> {
        match s {
            "center" => Ok(ShiftDirection::Center),
            "outside" => Ok(ShiftDirection::Outside),
            "random" => Ok(ShiftDirection::Random),
            other => Err(Error::invalid(
                "shift_direction",
                format!("unknown value '{other}' (expected center|outside|random)"),
            )),
        }
    }
}

/// Per-axis shift component pointing from slot `i` of `count` toward the
/// middle slot: +1 below center, 0 at center, -1 above.
fn toward_center(i: usize, count: usize) -> i32 {
    match (2 * i + 1).cmp(&count) {
        std::cmp::Ordering::Less => 1,
        std::cmp::Ordering::Equal => 0,
        std::cmp::Ordering::Greater => -1,
    }
}

/// The (row, col) sampling offsets of the sub-region attention convolutions,
/// in sub-region row-major order k = 1..N_sr. For the default 3x3 grid with
/// `Center` this is ((1,1), (1,0), (1,-1), (0,1), (0,0), (0,-1), (-1,1),
/// (-1,0), (-1,-1)): each grid is displaced toward where the RoI center
/// would sit relative to that sub-region.
pub fn subregion_offsets(
    direction: ShiftDirection,
    grid: SubRegionGrid,
    seed: u64,
) -> Vec<(i32, i32)> {
    let mut offsets: Vec<(i32, i32)> = Vec::with_capacity(grid.count());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            offsets.push((toward_center(r, grid.rows), toward_center(c, grid.cols)));
        }
    }
    match direction {
        ShiftDirection::Center => offsets,
        ShiftDirection::Outside => offsets.iter().map(|&(r, c)| (-r, -c)).collect(),
        ShiftDirection::Random => {
            let mut rng = Rng::new(seed ^ 0x5348_4946_5444_4952);
            rng.shuffle(&mut offsets);
            offsets
        }
    }
}

/// Full-image tensor of candidate attention vectors, `groups * c_s` channels.
#[derive(Clone, Debug)]
pub struct AttentionBank<T: Scalar> {
    pub values: Tensor4<T>, // (1, groups * c_s, H, W)
    pub groups: usize,
    pub c_s: usize,
}

impl<T: Scalar> AttentionBank<T> {
    pub fn new(values: Tensor4<T>, groups: usize, c_s: usize) -> Result<AttentionBank<T>> {
        let vs = values.shape();
        if vs.n != 1 {
            return Err(Error::shape("AttentionBank", "batch of 1", vs));
        }
        if vs.c != groups * c_s {
            return Err(Error::shape(
                "AttentionBank",
                format!("{} channels ({groups} groups x {c_s})", groups * c_s),
                vs,
            ));
        }
        Ok(AttentionBank {
            values,
            groups,
            c_s,
        })
    }

    /// Channel range owned by group k (1-indexed): [(k-1)*c_s, k*c_s).
    pub fn group_slice(&self, k: usize) -> std::ops::Range<usize> {
        (k - 1) * self.c_s..k * self.c_s
    }
}

/// Where one pooled value came from: absolute bank channel plus spatial cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSource {
    pub bank_channel: u32,
    pub row: u32,
    pub col: u32,
}

/// Per-RoI pooled attention map with argmax provenance. `values` element
/// (0, c, m, n) corresponds to `provenance[(c*h + m)*w + n]`.
#[derive(Clone, Debug)]
pub struct AttentionMap<T: Scalar> {
    pub values: Tensor4<T>, // (1, c_s, h, w)
    pub provenance: Vec<PoolSource>,
    pub bank_shape: Shape4,
}

/// How selective pooling picks the group index k for each pooling bin.
#[derive(Clone, Copy, Debug)]
pub enum SelectMode {
    /// k varies per bin: the sub-region owning most of the bin's area.
    SubRegion(SubRegionGrid),
    /// One k for all bins of the RoI, from its aspect ratio. Banks with a
    /// single group always select k = 1.
    Aspect { thresholds: (f64, f64) },
}

/// 1x1 convolution compacting the feature map from C to C_s channels; the
/// compacted RoI features are `roi_max_pool` over this output.
pub fn reduce_dim<T: Scalar>(feat: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    if p.kernel_size() != 1 {
        return Err(Error::invalid("reduce_dim", "kernel must be 1x1"));
    }
    conv2d(feat, p)
}

/// Run the N_sr shifted convolutions over the full-channel feature map and
/// concatenate their outputs channel-wise in sub-region row-major order.
/// The convolutions' offsets must match `offsets` exactly.
pub fn build_subregion_bank<T: Scalar>(
    feat: &Tensor4<T>,
    convs: &[ConvParams<T>],
    offsets: &[(i32, i32)],
) -> Result<AttentionBank<T>> {
    if convs.is_empty() || convs.len() != offsets.len() {
        return Err(Error::LengthMismatch {
            context: "build_subregion_bank offsets",
            expected: offsets.len(),
            got: convs.len(),
        });
    }
    let c_s = convs[0].out_channels();
    for (k, (conv, &off)) in convs.iter().zip(offsets).enumerate() {
        if conv.offset() != off {
            return Err(Error::invalid(
                "build_subregion_bank",
                format!(
                    "conv {} has offset {:?}, offset table says {:?}",
                    k + 1,
                    conv.offset(),
                    off
                ),
            ));
        }
        if conv.out_channels() != c_s {
            return Err(Error::invalid(
                "build_subregion_bank",
                format!(
                    "conv {} emits {} channels, expected {c_s}",
                    k + 1,
                    conv.out_channels()
                ),
            ));
        }
    }
    let fs = feat.shape();
    if fs.n != 1 {
        return Err(Error::shape("build_subregion_bank", "batch of 1", fs));
    }
    let groups = convs.len();
    let mut bank = Tensor4::zeros(Shape4::new(1, groups * c_s, fs.h, fs.w));
    for (k, conv) in convs.iter().enumerate() {
        let out = shifted_conv2d(feat, conv)?;
        for c in 0..c_s {
            bank.plane_mut(0, k * c_s + c)
                .copy_from_slice(out.plane(0, c));
        }
    }
    AttentionBank::new(bank, groups, c_s)
}

/// Single 1x1 convolution C -> groups*C_s; the output is the bank directly.
pub fn build_aspect_bank<T: Scalar>(
    feat: &Tensor4<T>,
    conv: &ConvParams<T>,
    groups: usize,
) -> Result<AttentionBank<T>> {
    if conv.kernel_size() != 1 {
        return Err(Error::invalid("build_aspect_bank", "kernel must be 1x1"));
    }
    if groups == 0 || conv.out_channels() % groups != 0 {
        return Err(Error::invalid(
            "build_aspect_bank",
            format!(
                "{} output channels not divisible into {groups} groups",
                conv.out_channels()
            ),
        ));
    }
    let fs = feat.shape();
    if fs.n != 1 {
        return Err(Error::shape("build_aspect_bank", "batch of 1", fs));
    }
    let values = conv2d(feat, conv)?;
    AttentionBank::new(values, groups, conv.out_channels() / groups)
}

/// Core selective pooling: `k_of_bin(m, n)` supplies the 1-indexed group for
/// each 0-indexed bin. Exposed so index-consistency tests can permute group
/// assignments explicitly.
pub fn selective_pool_with<T: Scalar, F>(
    bank: &AttentionBank<T>,
    roi: &RoI,
    h: usize,
    w: usize,
    spatial_stride: usize,
    k_of_bin: F,
) -> Result<AttentionMap<T>>
where
    F: Fn(usize, usize) -> usize,
{
    if roi.image_index != 0 {
        return Err(Error::invalid(
            "selective_roi_pool",
            "banks are per-image; rebase the RoI to image_index 0",
        ));
    }
    let bs = bank.values.shape();
    let proj = project_roi(roi, spatial_stride, bs.h, bs.w);
    let mut values = Tensor4::zeros(Shape4::new(1, bank.c_s, h, w));
    let mut provenance = vec![
        PoolSource {
            bank_channel: 0,
            row: 0,
            col: 0
        };
        bank.c_s * h * w
    ];
    for m in 0..h {
        let (rlo, rhi) = bin_cell_range(proj.row0, proj.rows(), h, m);
        for n in 0..w {
            let (clo, chi) = bin_cell_range(proj.col0, proj.cols(), w, n);
            let k = k_of_bin(m, n);
            if k < 1 || k > bank.groups {
                return Err(Error::invalid(
                    "selective_roi_pool",
                    format!("group index {k} outside 1..={}", bank.groups),
                ));
            }
            let base = (k - 1) * bank.c_s;
            for c in 0..bank.c_s {
                let plane = bank.values.plane(0, base + c);
                let mut best_row = rlo;
                let mut best_col = clo;
                let mut best = plane[rlo * bs.w + clo];
                for i in rlo..rhi {
                    for j in clo..chi {
                        let v = plane[i * bs.w + j];
                        if v > best {
                            best = v;
                            best_row = i;
                            best_col = j;
                        }
                    }
                }
                let out_idx = (c * h + m) * w + n;
                values.data_mut()[out_idx] = best;
                provenance[out_idx] = PoolSource {
                    bank_channel: (base + c) as u32,
                    row: best_row as u32,
                    col: best_col as u32,
                };
            }
        }
    }
    Ok(AttentionMap {
        values,
        provenance,
        bank_shape: bs,
    })
}

/// Selective RoI pooling: max-pool, per bin, the channel slice of the bank
/// selected by that bin's sub-region index (sub-region mode) or by the RoI's
/// aspect group (aspect mode, one k shared by all bins).
pub fn selective_roi_pool<T: Scalar>(
    bank: &AttentionBank<T>,
    roi: &RoI,
    h: usize,
    w: usize,
    spatial_stride: usize,
    mode: SelectMode,
) -> Result<AttentionMap<T>> {
    match mode {
        SelectMode::SubRegion(grid) => {
            if grid.count() != bank.groups {
                return Err(Error::invalid(
                    "selective_roi_pool",
                    format!(
                        "grid has {} sub-regions but bank has {} groups",
                        grid.count(),
                        bank.groups
                    ),
                ));
            }
            selective_pool_with(bank, roi, h, w, spatial_stride, |m, n| {
                bin_subregion_index(m + 1, n + 1, h, w, grid)
            })
        }
        SelectMode::Aspect { thresholds } => {
            let k = if bank.groups == 1 {
                1
            } else if bank.groups == 3 {
                aspect_group(roi, thresholds)
            } else {
                return Err(Error::invalid(
                    "selective_roi_pool",
                    format!("aspect mode needs 1 or 3 groups, bank has {}", bank.groups),
                ));
            };
            selective_pool_with(bank, roi, h, w, spatial_stride, |_, _| k)
        }
    }
}

/// Backward of selective pooling: each map-cell gradient is added at its
/// recorded (position, channel) in the bank gradient; everything else gets 0.
pub fn selective_pool_backward<T: Scalar>(
    map_grad: &Tensor4<T>,
    map: &AttentionMap<T>,
    bank_grad: &mut [T],
) -> Result<()> {
    if map_grad.shape() != map.values.shape() {
        return Err(Error::shape(
            "selective_pool_backward",
            map.values.shape(),
            map_grad.shape(),
        ));
    }
    if map.provenance.len() != map.values.len() {
        return Err(Error::invalid(
            "selective_pool_backward",
            "missing provenance: map was not produced by selective_roi_pool",
        ));
    }
    if bank_grad.len() != map.bank_shape.len() {
        return Err(Error::LengthMismatch {
            context: "selective_pool_backward bank_grad",
            expected: map.bank_shape.len(),
            got: bank_grad.len(),
        });
    }
    let bw = map.bank_shape.w;
    let bh = map.bank_shape.h;
    for (&g, src) in map_grad.data().iter().zip(&map.provenance) {
        let idx = (src.bank_channel as usize * bh + src.row as usize) * bw + src.col as usize;
        bank_grad[idx] += g;
    }
    Ok(())
}

/// f_hat = f (.) (M_sr + M_ar): the translation-variant attention map
/// reweights the compacted RoI features elementwise.
pub fn merge_selected_features<T: Scalar>(
    f: &Tensor4<T>,
    m_sr: &Tensor4<T>,
    m_ar: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let summed = elementwise_add(m_sr, m_ar)?;
    elementwise_mul(f, &summed)
}

/// Gradients of the merge with respect to (f, M_sr, M_ar).
pub fn merge_backward<T: Scalar>(
    upstream: &Tensor4<T>,
    f: &Tensor4<T>,
    m_sr: &Tensor4<T>,
    m_ar: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    let summed = elementwise_add(m_sr, m_ar)?;
    let (grad_f, grad_sum) = elementwise_mul_backward(upstream, f, &summed)?;
    Ok((grad_f, grad_sum.clone(), grad_sum))
}

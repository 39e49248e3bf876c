//! RoI representation and geometry: aspect-ratio grouping, pooling-bin to
//! sub-region assignment, classical RoI max pooling, IoU, NMS, box-delta
//! encoding, and the foreground/background RoI sampler.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Axis-aligned box, x2 > x1 and y2 > y1, in input-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Rect {
        Rect { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clip to an image of the given pixel size.
    pub fn clip(&self, img_w: f64, img_h: f64) -> Rect {
        Rect {
            x1: self.x1.clamp(0.0, img_w),
            y1: self.y1.clamp(0.0, img_h),
            x2: self.x2.clamp(0.0, img_w),
            y2: self.y2.clamp(0.0, img_h),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 > self.x1
            && self.y2 > self.y1
    }
}

/// A region of interest: which image in the batch it belongs to plus its box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoI {
    pub image_index: usize,
    pub rect: Rect,
}

impl RoI {
    pub fn new(image_index: usize, rect: Rect) -> Result<RoI> {
        if !rect.is_valid() {
            return Err(Error::invalid(
                "RoI",
                format!("degenerate box {rect:?}; need x2 > x1 and y2 > y1"),
            ));
        }
        Ok(RoI { image_index, rect })
    }

    /// Same box, different batch slot; used when rebasing RoIs onto
    /// per-image tensors.
    pub fn with_image_index(&self, image_index: usize) -> RoI {
        RoI {
            image_index,
            rect: self.rect,
        }
    }

    /// width / height; wide boxes have ratio > 1.
    pub fn aspect_ratio(&self) -> f64 {
        self.rect.width() / self.rect.height()
    }
}

/// The rows x cols partition of an RoI into sub-regions. The default 3x3
/// tiles the RoI exactly: no overlap, no gap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubRegionGrid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for SubRegionGrid {
    fn default() -> Self {
        SubRegionGrid { rows: 3, cols: 3 }
    }
}

impl SubRegionGrid {
    pub fn new(rows: usize, cols: usize) -> Result<SubRegionGrid> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("SubRegionGrid", "rows and cols must be > 0"));
        }
        Ok(SubRegionGrid { rows, cols })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Aspect-ratio group of an RoI: 1 if ratio < lo (tall), 3 if ratio > hi
/// (wide), else 2. Boundary ratios fall in the middle group.
pub fn aspect_group(roi: &RoI, thresholds: (f64, f64)) -> usize {
    let ratio = roi.aspect_ratio();
    if ratio < thresholds.0 {
        1
    } else if ratio > thresholds.1 {
        3
    } else {
        2
    }
}

/// Per-axis sub-region assignment: which of `regions` equal slices of the
/// unit interval has maximal overlap with bin `bin` (1-indexed) of `bins`
/// equal slices. Integer arithmetic over the common denominator bins*regions
/// keeps comparisons exact; ties break toward the smaller index.
fn axis_region(bin: usize, bins: usize, regions: usize) -> usize {
    debug_assert!(bin >= 1 && bin <= bins);
    let mut best_region = 1usize;
    let mut best_overlap = i64::MIN;
    for r in 1..=regions {
        // overlap of [ (bin-1)/bins, bin/bins ) with [ (r-1)/regions, r/regions )
        // in units of 1/(bins*regions)
        let lo = ((bin - 1) * regions).max((r - 1) * bins) as i64;
        let hi = ((bin * regions).min(r * bins)) as i64;
        let overlap = (hi - lo).max(0);
        if overlap > best_overlap {
            best_overlap = overlap;
            best_region = r;
        }
    }
    best_region
}

/// Sub-region index k (1-indexed, row-major over the grid) owning pooling
/// bin (m, n) of an h x w bin layout; the owner is the sub-region holding
/// most of the bin's area.
pub fn bin_subregion_index(m: usize, n: usize, h: usize, w: usize, grid: SubRegionGrid) -> usize {
    let row = axis_region(m, h, grid.rows);
    let col = axis_region(n, w, grid.cols);
    (row - 1) * grid.cols + col
}

/// RoI projected onto feature-map cells: half-open ranges, floor(start) /
/// ceil(end), clamped so at least one cell survives. Degenerate RoIs clamp
/// to a single cell rather than failing.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedRoi {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl ProjectedRoi {
    pub fn rows(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn cols(&self) -> usize {
        self.col1 - self.col0
    }
}

pub fn project_roi(roi: &RoI, spatial_stride: usize, feat_h: usize, feat_w: usize) -> ProjectedRoi {
    let s = spatial_stride as f64;
    let clamp_axis = |lo: f64, hi: f64, cells: usize| -> (usize, usize) {
        let mut c0 = (lo / s).floor() as isize;
        let mut c1 = (hi / s).ceil() as isize;
        c0 = c0.clamp(0, cells as isize - 1);
        c1 = c1.clamp(c0 + 1, cells as isize);
        (c0 as usize, c1 as usize)
    };
    let (row0, row1) = clamp_axis(roi.rect.y1, roi.rect.y2, feat_h);
    let (col0, col1) = clamp_axis(roi.rect.x1, roi.rect.x2, feat_w);
    ProjectedRoi {
        row0,
        row1,
        col0,
        col1,
    }
}

/// Half-open cell range of bin `bin` (0-indexed) out of `bins` along an axis
/// spanning `extent` cells from `start`. floor/ceil split; never empty.
#[inline]
pub fn bin_cell_range(start: usize, extent: usize, bins: usize, bin: usize) -> (usize, usize) {
    let lo = start + bin * extent / bins;
    let hi = start + ((bin + 1) * extent).div_ceil(bins);
    (lo, hi)
}

/// Classical RoI max pooling into an h x w grid per channel. Returns the
/// pooled (1, C, h, w) map and, per output element, the flat index of its
/// argmax in `feat`'s data (scan order; first maximum wins ties).
pub fn roi_max_pool<T: Scalar>(
    feat: &Tensor4<T>,
    roi: &RoI,
    h: usize,
    w: usize,
    spatial_stride: usize,
) -> Result<(Tensor4<T>, Vec<usize>)> {
    let fs = feat.shape();
    if roi.image_index >= fs.n {
        return Err(Error::invalid(
            "roi_max_pool",
            format!("image_index {} out of batch {}", roi.image_index, fs.n),
        ));
    }
    let proj = project_roi(roi, spatial_stride, fs.h, fs.w);
    let mut out = Tensor4::zeros(Shape4::new(1, fs.c, h, w));
    let mut prov = vec![0usize; fs.c * h * w];
    let hw = fs.h * fs.w;
    for c in 0..fs.c {
        let plane = feat.plane(roi.image_index, c);
        let plane_base = (roi.image_index * fs.c + c) * hw;
        let out_plane = out.plane_mut(0, c);
        for m in 0..h {
            let (rlo, rhi) = bin_cell_range(proj.row0, proj.rows(), h, m);
            for n in 0..w {
                let (clo, chi) = bin_cell_range(proj.col0, proj.cols(), w, n);
                let mut best_idx = rlo * fs.w + clo;
                let mut best = plane[best_idx];
                for i in rlo..rhi {
                    for j in clo..chi {
                        let idx = i * fs.w + j;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out_plane[m * w + n] = best;
                prov[(c * h + m) * w + n] = plane_base + best_idx;
            }
        }
    }
    Ok((out, prov))
}

/// Backward of `roi_max_pool`: each upstream gradient is added at its argmax
/// location; gradient mass is conserved.
pub fn roi_max_pool_backward<T: Scalar>(
    grad_map: &Tensor4<T>,
    prov: &[usize],
    feat_grad: &mut [T],
) -> Result<()> {
    if grad_map.len() != prov.len() {
        return Err(Error::LengthMismatch {
            context: "roi_max_pool_backward",
            expected: prov.len(),
            got: grad_map.len(),
        });
    }
    for (&g, &src) in grad_map.data().iter().zip(prov) {
        feat_grad[src] += g;
    }
    Ok(())
}

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy non-maximum suppression. Keeps the highest-scored box, suppresses
/// boxes with IoU > threshold against any kept box. Returns kept indices in
/// descending score order; equal scores break toward the lower index.
pub fn nms(dets: &[(Rect, f64)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .1
            .partial_cmp(&dets[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept
            .iter()
            .all(|&k| iou(&dets[k].0, &dets[i].0) <= threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Normalized center/size offsets from an anchor box to a target box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

pub fn encode_delta(gt: &Rect, anchor: &Rect) -> BoxDelta {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    BoxDelta {
        tx: (gcx - acx) / anchor.width(),
        ty: (gcy - acy) / anchor.height(),
        tw: (gt.width() / anchor.width()).ln(),
        th: (gt.height() / anchor.height()).ln(),
    }
}

pub fn decode_delta(delta: &BoxDelta, anchor: &Rect) -> Rect {
    let (acx, acy) = anchor.center();
    let cx = acx + delta.tx * anchor.width();
    let cy = acy + delta.ty * anchor.height();
    let w = anchor.width() * delta.tw.exp();
    let h = anchor.height() * delta.th.exp();
    Rect {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// An RoI labeled for training: class 0 is background; foreground RoIs carry
/// the encoded regression target toward their matched ground-truth box.
#[derive(Clone, Debug)]
pub struct LabeledRoi {
    pub roi: RoI,
    pub class: usize,
    pub delta: Option<BoxDelta>,
}

#[derive(Clone, Copy, Debug)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 256,
            fg_fraction: 0.25,
            fg_iou: 0.5,
        }
    }
}

/// Label proposals foreground (max IoU >= fg_iou, class of the argmax-IoU
/// ground truth) or background, then sample up to fg_fraction of the batch
/// from the foreground pool and fill the remainder with background.
/// Deterministic under the caller's RNG; short pools cycle.
pub fn sample_rois(
    proposals: &[RoI],
    gts: &[(usize, Rect)],
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<LabeledRoi>> {
    if proposals.is_empty() {
        return Err(Error::invalid("sample_rois", "need at least one proposal"));
    }
    let mut fg: Vec<(usize, usize)> = Vec::new(); // (proposal idx, gt idx)
    let mut bg: Vec<usize> = Vec::new();
    for (pi, p) in proposals.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = None;
        for (gi, (_, gbox)) in gts.iter().enumerate() {
            let v = iou(&p.rect, gbox);
            if v > best {
                best = v;
                best_gt = Some(gi);
            }
        }
        match best_gt {
            Some(gi) if best >= cfg.fg_iou => fg.push((pi, gi)),
            _ => bg.push(pi),
        }
    }

    let fg_target = (cfg.batch_size as f64 * cfg.fg_fraction).round() as usize;
    rng.shuffle(&mut fg);
    rng.shuffle(&mut bg);
    let n_fg = fg.len().min(fg_target);
    let n_bg = cfg.batch_size - n_fg;

    let mut batch = Vec::with_capacity(cfg.batch_size);
    for &(pi, gi) in fg.iter().take(n_fg) {
        let (class, gbox) = gts[gi];
        batch.push(LabeledRoi {
            roi: proposals[pi],
            class,
            delta: Some(encode_delta(&gbox, &proposals[pi].rect)),
        });
    }
    if !bg.is_empty() {
        for i in 0..n_bg {
            let pi = bg[i % bg.len()];
            batch.push(LabeledRoi {
                roi: proposals[pi],
                class: 0,
                delta: None,
            });
        }
    } else {
        // no background available at all: cycle foreground to fill
        for i in 0..n_bg {
            let (pi, gi) = fg[i % fg.len()];
            let (class, gbox) = gts[gi];
            batch.push(LabeledRoi {
                roi: proposals[pi],
                class,
                delta: Some(encode_delta(&gbox, &proposals[pi].rect)),
            });
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roi(x1: f64, y1: f64, x2: f64, y2: f64) -> RoI {
        RoI::new(0, Rect::new(x1, y1, x2, y2)).unwrap()
    }

    #[test]
    fn roi_rejects_degenerate_boxes() {
        assert!(RoI::new(0, Rect::new(10.0, 0.0, 10.0, 5.0)).is_err());
        assert!(RoI::new(0, Rect::new(0.0, 8.0, 5.0, 2.0)).is_err());
        assert!(RoI::new(0, Rect::new(0.0, f64::NAN, 5.0, 2.0)).is_err());
    }

    #[test]
    fn aspect_groups_follow_thresholds() {
        let t = (0.75, 1.3);
        assert_eq!(aspect_group(&roi(0.0, 0.0, 50.0, 100.0), t), 1); // ratio 0.5
        assert_eq!(aspect_group(&roi(0.0, 0.0, 100.0, 100.0), t), 2); // square
        assert_eq!(aspect_group(&roi(0.0, 0.0, 260.0, 100.0), t), 3); // ratio 2.6
                                                                      // boundary ratios land in the middle group
        assert_eq!(aspect_group(&roi(0.0, 0.0, 75.0, 100.0), t), 2);
        assert_eq!(aspect_group(&roi(0.0, 0.0, 130.0, 100.0), t), 2);
    }

    #[test]
    fn bin_subregion_aligned_partition_is_identity() {
        let g = SubRegionGrid::default();
        for m in 1..=3 {
            for n in 1..=3 {
                assert_eq!(bin_subregion_index(m, n, 3, 3, g), (m - 1) * 3 + n);
            }
        }
    }

    #[test]
    fn bin_subregion_frozen_examples() {
        let g = SubRegionGrid::default();
        // 7 bins over 3 regions: boundaries at 7/3 and 14/3
        let rows7: Vec<usize> = (1..=7).map(|m| axis_region(m, 7, 3)).collect();
        assert_eq!(rows7, vec![1, 1, 2, 2, 2, 3, 3]);
        // 6 bins over 3 regions
        let rows6: Vec<usize> = (1..=6).map(|m| axis_region(m, 6, 3)).collect();
        assert_eq!(rows6, vec![1, 1, 2, 2, 3, 3]);
        // columns behave identically: bin (4, 6) sits in grid cell (2, 3)
        let (row, col) = (2, 3);
        assert_eq!(bin_subregion_index(4, 6, 7, 7, g), (row - 1) * 3 + col);
    }

    /// Independent continuous-geometry oracle: explicit fractions with
    /// cross-multiplied comparisons, ties toward the smaller index.
    fn axis_region_oracle(bin: usize, bins: usize, regions: usize) -> usize {
        #[derive(Clone, Copy)]
        struct Frac(i64, i64); // value = .0 / .1, .1 > 0
        fn sub(a: Frac, b: Frac) -> Frac {
            Frac(a.0 * b.1 - b.0 * a.1, a.1 * b.1)
        }
        fn min(a: Frac, b: Frac) -> Frac {
            if a.0 * b.1 <= b.0 * a.1 {
                a
            } else {
                b
            }
        }
        fn max(a: Frac, b: Frac) -> Frac {
            if a.0 * b.1 >= b.0 * a.1 {
                a
            } else {
                b
            }
        }
        fn gt(a: Frac, b: Frac) -> bool {
            a.0 * b.1 > b.0 * a.1
        }
        let zero = Frac(0, 1);
        let mut best = 1usize;
        let mut best_ov = Frac(-1, 1);
        for r in 1..=regions {
            let lo = max(
                Frac((bin - 1) as i64, bins as i64),
                Frac((r - 1) as i64, regions as i64),
            );
            let hi = min(
                Frac(bin as i64, bins as i64),
                Frac(r as i64, regions as i64),
            );
            let ov = max(sub(hi, lo), zero);
            if gt(ov, best_ov) {
                best_ov = ov;
                best = r;
            }
        }
        best
    }

    #[test]
    fn bin_subregion_matches_overlap_oracle_exhaustively() {
        for regions in 1..=4 {
            for bins in 1..=9 {
                for bin in 1..=bins {
                    assert_eq!(
                        axis_region(bin, bins, regions),
                        axis_region_oracle(bin, bins, regions),
                        "bin {bin} of {bins} over {regions} regions"
                    );
                }
            }
        }
    }

    #[test]
    fn bin_subregion_monotone_in_bin_index() {
        let g = SubRegionGrid::default();
        for h in 1..=9 {
            let mut prev = 0;
            for m in 1..=h {
                let k = bin_subregion_index(m, 1, h, 7, g);
                assert!(k >= prev, "row regression at h={h}, m={m}");
                prev = k;
            }
        }
    }

    #[test]
    fn subregion_axis_overlaps_partition_each_bin() {
        // overlaps per bin sum to the bin length in 1/(bins*regions) units:
        // the sub-region rectangles tile the RoI with no gap or overlap
        for bins in 1..=9usize {
            for bin in 1..=bins {
                let total: i64 = (1..=3usize)
                    .map(|r| {
                        let lo = ((bin - 1) * 3).max((r - 1) * bins) as i64;
                        let hi = ((bin * 3).min(r * bins)) as i64;
                        (hi - lo).max(0)
                    })
                    .sum();
                assert_eq!(total, 3, "axis cover at bins={bins}, bin={bin}");
            }
        }
    }

    fn random_feat(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut rng = Rng::new(seed);
        let data = (0..shape.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn pool_single_cell_roi_replicates_feature_vector() {
        let feat = random_feat(Shape4::new(1, 3, 8, 8), 0);
        // maps to exactly feature cell (1, 1) under stride 4
        let r = roi(4.5, 4.5, 7.5, 7.5);
        let (out, _) = roi_max_pool(&feat, &r, 7, 7, 4).unwrap();
        for c in 0..3 {
            for m in 0..7 {
                for n in 0..7 {
                    assert_eq!(out.at(0, c, m, n), feat.at(0, c, 1, 1));
                }
            }
        }
    }

    #[test]
    fn pool_constant_map_gives_constant_bins() {
        let feat = Tensor4::filled(Shape4::new(1, 2, 16, 16), 3.25f64);
        let r = roi(3.0, 5.0, 50.0, 61.0);
        let (out, _) = roi_max_pool(&feat, &r, 7, 7, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn pool_matches_brute_force_scan() {
        for seed in 0..10u64 {
            let feat = random_feat(Shape4::new(2, 4, 12, 16), seed);
            let mut rng = Rng::new(seed ^ 0xABCD);
            let x1 = rng.uniform(0.0, 40.0);
            let y1 = rng.uniform(0.0, 30.0);
            let r = RoI::new(
                (seed % 2) as usize,
                Rect::new(
                    x1,
                    y1,
                    x1 + rng.uniform(4.0, 24.0),
                    y1 + rng.uniform(4.0, 18.0),
                ),
            )
            .unwrap();
            let (out, prov) = roi_max_pool(&feat, &r, 7, 7, 4).unwrap();

            // brute-force per-bin scan straight from the definition
            let proj = project_roi(&r, 4, 12, 16);
            for c in 0..4 {
                for m in 0..7 {
                    for n in 0..7 {
                        let (rlo, rhi) = bin_cell_range(proj.row0, proj.rows(), 7, m);
                        let (clo, chi) = bin_cell_range(proj.col0, proj.cols(), 7, n);
                        let mut best = f64::NEG_INFINITY;
                        for i in rlo..rhi {
                            for j in clo..chi {
                                best = best.max(feat.at(r.image_index, c, i, j));
                            }
                        }
                        assert_eq!(out.at(0, c, m, n), best);
                        assert_eq!(feat.data()[prov[(c * 7 + m) * 7 + n]], best);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_degenerate_roi_clamps_to_single_cell() {
        let feat = random_feat(Shape4::new(1, 2, 8, 8), 5);
        // projects inside one cell; must not fail
        let r = roi(9.0, 9.0, 9.5, 9.5);
        let (out, _) = roi_max_pool(&feat, &r, 7, 7, 4).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
        // fully outside on the high side clamps to the last cell
        let r = roi(500.0, 500.0, 600.0, 600.0);
        let (out, _) = roi_max_pool(&feat, &r, 7, 7, 4).unwrap();
        for c in 0..2 {
            assert!(out.plane(0, c).iter().all(|&v| v == feat.at(0, c, 7, 7)));
        }
    }

    #[test]
    fn pool_backward_conserves_gradient_mass() {
        let feat = random_feat(Shape4::new(1, 3, 10, 10), 6);
        let r = roi(2.0, 3.0, 30.0, 33.0);
        let (_, prov) = roi_max_pool(&feat, &r, 7, 7, 4).unwrap();
        let grad_map = random_feat(Shape4::new(1, 3, 7, 7), 7);
        let mut feat_grad = vec![0.0f64; feat.len()];
        roi_max_pool_backward(&grad_map, &prov, &mut feat_grad).unwrap();
        let up: f64 = grad_map.data().iter().sum();
        let down: f64 = feat_grad.iter().sum();
        assert!((up - down).abs() < 1e-12);
    }

    #[test]
    fn iou_edge_cases() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = Rect::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b), 0.0);
        let c = Rect::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &c) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_one_of_identical_pair() {
        let b = Rect::new(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[(b, 0.9), (b, 0.8)], 0.3);
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn nms_empty_input() {
        assert!(nms(&[], 0.3).is_empty());
    }

    /// Suppression-matrix reference: mark every pair with IoU > thr, then
    /// sweep scores descending.
    fn nms_oracle(dets: &[(Rect, f64)], thr: f64) -> Vec<usize> {
        let n = dets.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap().then(a.cmp(&b)));
        let mut suppressed = vec![false; n];
        let mut kept = Vec::new();
        for pos in 0..n {
            let i = order[pos];
            if suppressed[i] {
                continue;
            }
            kept.push(i);
            for &j in &order[pos + 1..] {
                if !suppressed[j] && iou(&dets[i].0, &dets[j].0) > thr {
                    suppressed[j] = true;
                }
            }
        }
        kept
    }

    #[test]
    fn nms_matches_quadratic_oracle() {
        let mut rng = Rng::new(17);
        let dets: Vec<(Rect, f64)> = (0..50)
            .map(|_| {
                let x1 = rng.uniform(0.0, 80.0);
                let y1 = rng.uniform(0.0, 80.0);
                (
                    Rect::new(
                        x1,
                        y1,
                        x1 + rng.uniform(5.0, 40.0),
                        y1 + rng.uniform(5.0, 40.0),
                    ),
                    rng.next_f64(),
                )
            })
            .collect();
        assert_eq!(nms(&dets, 0.3), nms_oracle(&dets, 0.3));
    }

    #[test]
    fn nms_output_is_antichain() {
        let mut rng = Rng::new(23);
        let dets: Vec<(Rect, f64)> = (0..60)
            .map(|_| {
                let x1 = rng.uniform(0.0, 60.0);
                let y1 = rng.uniform(0.0, 60.0);
                (
                    Rect::new(
                        x1,
                        y1,
                        x1 + rng.uniform(5.0, 50.0),
                        y1 + rng.uniform(5.0, 50.0),
                    ),
                    rng.next_f64(),
                )
            })
            .collect();
        let kept = nms(&dets, 0.3);
        for (ai, &a) in kept.iter().enumerate() {
            for &b in &kept[ai + 1..] {
                assert!(iou(&dets[a].0, &dets[b].0) <= 0.3);
            }
        }
    }

    #[test]
    fn delta_encode_decode_round_trip() {
        let mut rng = Rng::new(31);
        for _ in 0..100 {
            let ax1 = rng.uniform(0.0, 50.0);
            let ay1 = rng.uniform(0.0, 50.0);
            let anchor = Rect::new(
                ax1,
                ay1,
                ax1 + rng.uniform(4.0, 40.0),
                ay1 + rng.uniform(4.0, 40.0),
            );
            let gx1 = rng.uniform(0.0, 50.0);
            let gy1 = rng.uniform(0.0, 50.0);
            let gt = Rect::new(
                gx1,
                gy1,
                gx1 + rng.uniform(4.0, 40.0),
                gy1 + rng.uniform(4.0, 40.0),
            );
            let back = decode_delta(&encode_delta(&gt, &anchor), &anchor);
            for (a, b) in [
                (back.x1, gt.x1),
                (back.y1, gt.y1),
                (back.x2, gt.x2),
                (back.y2, gt.y2),
            ] {
                assert!((a - b).abs() / b.abs().max(1.0) < 1e-6);
            }
        }
    }

    #[test]
    fn sampler_labels_gt_box_as_foreground() {
        let gt = Rect::new(10.0, 10.0, 30.0, 40.0);
        let proposals = vec![RoI::new(0, gt).unwrap()];
        let cfg = SamplerConfig {
            batch_size: 4,
            ..Default::default()
        };
        let batch = sample_rois(&proposals, &[(2, gt)], &cfg, &mut Rng::new(0)).unwrap();
        assert!(batch.iter().any(|l| l.class == 2 && l.delta.is_some()));
    }

    #[test]
    fn sampler_low_iou_is_background() {
        let gt = Rect::new(0.0, 0.0, 20.0, 20.0);
        let p = RoI::new(0, Rect::new(10.0, 10.0, 50.0, 25.0)).unwrap();
        assert!(iou(&p.rect, &gt) < 0.5 && iou(&p.rect, &gt) > 0.1);
        let cfg = SamplerConfig {
            batch_size: 2,
            ..Default::default()
        };
        let batch = sample_rois(&[p], &[(1, gt)], &cfg, &mut Rng::new(0)).unwrap();
        assert!(batch.iter().all(|l| l.class == 0 && l.delta.is_none()));
    }

    #[test]
    fn sampler_counts_match_availability() {
        // 400 proposals, exactly 20 foreground-eligible -> 20 fg + 236 bg
        let gt = Rect::new(40.0, 40.0, 80.0, 80.0);
        let mut proposals = Vec::new();
        for i in 0..20 {
            let off = i as f64 * 0.1;
            proposals.push(RoI::new(0, Rect::new(40.0 + off, 40.0, 80.0 + off, 80.0)).unwrap());
        }
        for i in 0..380 {
            let x = 100.0 + (i % 20) as f64;
            let y = 100.0 + (i / 20) as f64;
            proposals.push(RoI::new(0, Rect::new(x, y, x + 10.0, y + 10.0)).unwrap());
        }
        let cfg = SamplerConfig::default();
        let batch = sample_rois(&proposals, &[(1, gt)], &cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(batch.len(), 256);
        assert_eq!(batch.iter().filter(|l| l.class != 0).count(), 20);
        assert_eq!(batch.iter().filter(|l| l.class == 0).count(), 236);
    }

    #[test]
    fn sampler_all_background_batch_is_legal() {
        let gt = Rect::new(0.0, 0.0, 10.0, 10.0);
        let p = RoI::new(0, Rect::new(50.0, 50.0, 60.0, 60.0)).unwrap();
        let cfg = SamplerConfig {
            batch_size: 8,
            ..Default::default()
        };
        let batch = sample_rois(&[p], &[(1, gt)], &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(batch.len(), 8);
        assert!(batch.iter().all(|l| l.class == 0));
    }

    #[test]
    fn sampler_deterministic_under_seed() {
        let gt = Rect::new(10.0, 10.0, 40.0, 40.0);
        let mut rng = Rng::new(77);
        let proposals: Vec<RoI> = (0..50)
            .map(|_| {
                let x1 = rng.uniform(0.0, 60.0);
                let y1 = rng.uniform(0.0, 60.0);
                RoI::new(
                    0,
                    Rect::new(
                        x1,
                        y1,
                        x1 + rng.uniform(5.0, 40.0),
                        y1 + rng.uniform(5.0, 40.0),
                    ),
                )
                .unwrap()
            })
            .collect();
        let cfg = SamplerConfig {
            batch_size: 16,
            ..Default::default()
        };
        let a = sample_rois(&proposals, &[(1, gt)], &cfg, &mut Rng::new(5)).unwrap();
        let b = sample_rois(&proposals, &[(1, gt)], &cfg, &mut Rng::new(5)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.roi, y.roi);
            assert_eq!(x.class, y.class);
        }
    }
}

//! Appearance descriptors for cross-agent overlap detection.
//!
//! A keyframe is summarized as a grayscale image area-averaged to 16x16,
//! mean-centered, and L2-normalized; similarity is the dot product. That
//! makes the score invariant to global affine intensity changes, which is
//! all a desk-scale scene needs. Anything scoring above the threshold
//! becomes a loop candidate, thinned so a burst of near-identical frames
//! yields one candidate instead of dozens.

use thiserror::Error;

use crate::frame::RgbImage;

pub const DESCRIPTOR_SIDE: usize = 16;
pub const DESCRIPTOR_DIM: usize = DESCRIPTOR_SIDE * DESCRIPTOR_SIDE;

/// Similarity threshold for loop detection.
pub const DEFAULT_SIMILARITY_TAU: f64 = 0.8;

/// Candidates closer than this many frames on both sides count as duplicates.
pub const DEDUP_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("image is constant; descriptor undefined after mean subtraction")]
    DegenerateImage,
}

/// Unit-norm appearance vector for one keyframe.
#[derive(Debug, Clone)]
pub struct Descriptor {
    pub vector: Vec<f64>,
    /// `(agent_id, frame_index)` the descriptor was computed from.
    pub source: (u32, usize),
}

/// One detected cross-agent overlap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopCandidate {
    pub a: (u32, usize),
    pub b: (u32, usize),
    pub similarity: f64,
}

/// Area-average resampling of one scanline: destination cell `i` covers the
/// real interval `[i*n/m, (i+1)*n/m)` of the source and averages values by
/// exact overlap length, so means are preserved for any size pair.
pub(crate) fn area_resample_1d(src: &[f64], dst_len: usize) -> Vec<f64> {
    let n = src.len() as f64;
    let m = dst_len as f64;
    let cell = n / m;
    (0..dst_len)
        .map(|i| {
            let lo = i as f64 * cell;
            let hi = (i + 1) as f64 * cell;
            let mut acc = 0.0;
            let first = lo.floor() as usize;
            let last = ((hi.ceil() as usize).max(first + 1)).min(src.len());
            for (x, v) in src.iter().enumerate().take(last).skip(first) {
                let overlap = (hi.min(x as f64 + 1.0) - lo.max(x as f64)).max(0.0);
                acc += overlap * v;
            }
            acc / cell
        })
        .collect()
}

fn downsample_grid(values: &[f64], width: usize, height: usize, side: usize) -> Vec<f64> {
    // Separable: rows first, then columns of the row-reduced grid.
    let mut rows = Vec::with_capacity(height * side);
    for y in 0..height {
        rows.extend(area_resample_1d(&values[y * width..(y + 1) * width], side));
    }
    let mut out = vec![0.0; side * side];
    let mut column = vec![0.0; height];
    for x in 0..side {
        for y in 0..height {
            column[y] = rows[y * side + x];
        }
        for (y, v) in area_resample_1d(&column, side).into_iter().enumerate() {
            out[y * side + x] = v;
        }
    }
    out
}

/// Grayscale, 16x16 area-average, mean-subtract, L2-normalize, flatten
/// row-major. Errors on constant images, whose centered vector is zero.
pub fn compute_descriptor(
    rgb: &RgbImage,
    source: (u32, usize),
) -> Result<Descriptor, DescriptorError> {
    let gray = rgb.luminance();
    let mut v = downsample_grid(&gray, rgb.width, rgb.height, DESCRIPTOR_SIDE);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(DescriptorError::DegenerateImage);
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(Descriptor { vector: v, source })
}

/// Dot product of two descriptors; in `[-1, 1]` for unit vectors.
pub fn similarity(a: &Descriptor, b: &Descriptor) -> f64 {
    a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum()
}

/// Finds all cross-agent pairs scoring above `tau`, keeps only the best
/// candidate among those within [`DEDUP_WINDOW`] frames on both sides, and
/// returns them sorted by similarity descending. Candidates are normalized
/// so the lower agent id comes first; same-agent pairs are ignored.
pub fn detect_loops(
    descriptors_a: &[Descriptor],
    descriptors_b: &[Descriptor],
    tau: f64,
) -> Vec<LoopCandidate> {
    let mut raw = Vec::new();
    for da in descriptors_a {
        for db in descriptors_b {
            if da.source.0 == db.source.0 {
                continue;
            }
            let s = similarity(da, db);
            if s > tau {
                let (a, b) = if da.source.0 < db.source.0 {
                    (da.source, db.source)
                } else {
                    (db.source, da.source)
                };
                raw.push(LoopCandidate { a, b, similarity: s });
            }
        }
    }
    // Greedy best-first thinning; the frame tiebreak keeps exact-similarity
    // ties deterministic.
    raw.sort_by(|p, q| {
        q.similarity
            .partial_cmp(&p.similarity)
            .unwrap()
            .then(p.a.1.cmp(&q.a.1))
            .then(p.b.1.cmp(&q.b.1))
    });
    let mut kept: Vec<LoopCandidate> = Vec::new();
    for cand in raw {
        let duplicate = kept.iter().any(|k| {
            k.a.0 == cand.a.0
                && k.b.0 == cand.b.0
                && k.a.1.abs_diff(cand.a.1) <= DEDUP_WINDOW
                && k.b.1.abs_diff(cand.b.1) <= DEDUP_WINDOW
        });
        if !duplicate {
            kept.push(cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn scanline_resampling_matches_hand_computed_overlaps() {
        // Three source pixels onto two cells of width 1.5:
        // cell 0 = (1.0*a + 0.5*b)/1.5, cell 1 = (0.5*b + 1.0*c)/1.5.
        let out = area_resample_1d(&[6.0, 3.0, 9.0], 2);
        assert_relative_eq!(out[0], (6.0 + 1.5) / 1.5, epsilon = 1e-12);
        assert_relative_eq!(out[1], (1.5 + 9.0) / 1.5, epsilon = 1e-12);
        // Upsampling a single value is constant.
        let up = area_resample_1d(&[2.5], 4);
        assert!(up.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        // Means survive resampling for awkward lengths.
        let src: Vec<f64> = (0..23).map(|i| (i * i % 7) as f64).collect();
        let dst = area_resample_1d(&src, 16);
        let src_mean = src.iter().sum::<f64>() / 23.0;
        let dst_mean = dst.iter().sum::<f64>() / 16.0;
        assert_relative_eq!(src_mean, dst_mean, epsilon = 1e-12);
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let img = random_image(&mut rng, 64, 48);
        let d1 = compute_descriptor(&img, (0, 0)).unwrap();
        let d2 = compute_descriptor(&img, (1, 5)).unwrap();
        assert_eq!(d1.vector.len(), DESCRIPTOR_DIM);
        assert_relative_eq!(similarity(&d1, &d2), 1.0, epsilon = 1e-6);
        assert_relative_eq!(
            d1.vector.iter().map(|x| x * x).sum::<f64>().sqrt(),
            1.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn photometric_negative_scores_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = random_image(&mut rng, 32, 32);
        let mut neg = img.clone();
        for v in neg.data.iter_mut() {
            *v = 1.0 - *v;
        }
        let d = compute_descriptor(&img, (0, 0)).unwrap();
        let dn = compute_descriptor(&neg, (1, 0)).unwrap();
        assert_relative_eq!(similarity(&d, &dn), -1.0, epsilon = 1e-6);
    }

    #[test]
    fn affine_intensity_changes_do_not_move_the_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = random_image(&mut rng, 40, 40);
        let mut scaled = img.clone();
        for v in scaled.data.iter_mut() {
            *v = 0.5 * *v;
        }
        let mut affine = img.clone();
        for v in affine.data.iter_mut() {
            *v = 0.3 * *v + 0.2;
        }
        let d = compute_descriptor(&img, (0, 0)).unwrap();
        assert_relative_eq!(
            similarity(&d, &compute_descriptor(&scaled, (1, 0)).unwrap()),
            1.0,
            epsilon = 1e-6
        );
        assert_relative_eq!(
            similarity(&d, &compute_descriptor(&affine, (1, 0)).unwrap()),
            1.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn constant_image_is_degenerate() {
        let mut img = RgbImage::new(16, 16);
        img.data.fill(0.7);
        assert!(matches!(
            compute_descriptor(&img, (0, 0)),
            Err(DescriptorError::DegenerateImage)
        ));
    }

    #[test]
    fn block_doubled_image_has_identical_descriptor() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = random_image(&mut rng, 16, 16);
        let mut doubled = RgbImage::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                doubled.set(x, y, img.get(x / 2, y / 2));
            }
        }
        let d = compute_descriptor(&img, (0, 0)).unwrap();
        let dd = compute_descriptor(&doubled, (1, 0)).unwrap();
        for (a, b) in d.vector.iter().zip(&dd.vector) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    fn descriptor_of(img: &RgbImage, agent: u32, frame: usize) -> Descriptor {
        compute_descriptor(img, (agent, frame)).unwrap()
    }

    #[test]
    fn shared_view_is_detected_and_bursts_are_thinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let shared = random_image(&mut rng, 32, 32);
        let a: Vec<Descriptor> = (0..6).map(|f| descriptor_of(&shared, 0, f)).collect();
        let b: Vec<Descriptor> = (0..6).map(|f| descriptor_of(&shared, 1, f)).collect();
        let loops = detect_loops(&a, &b, DEFAULT_SIMILARITY_TAU);
        // 36 perfect pairs, all inside one +-10 window on both sides.
        assert_eq!(loops.len(), 1);
        assert!(loops[0].similarity > 0.999);
        assert_eq!(loops[0].a.0, 0);
        assert_eq!(loops[0].b.0, 1);
    }

    #[test]
    fn far_apart_revisits_stay_separate_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let shared = random_image(&mut rng, 32, 32);
        let a = vec![descriptor_of(&shared, 0, 0), descriptor_of(&shared, 0, 100)];
        let b = vec![descriptor_of(&shared, 1, 0)];
        let loops = detect_loops(&a, &b, DEFAULT_SIMILARITY_TAU);
        assert_eq!(loops.len(), 2);
    }

    #[test]
    fn disjoint_views_yield_no_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let a: Vec<Descriptor> = (0..8)
            .map(|f| descriptor_of(&random_image(&mut rng, 32, 32), 0, f))
            .collect();
        let b: Vec<Descriptor> = (0..8)
            .map(|f| descriptor_of(&random_image(&mut rng, 32, 32), 1, f))
            .collect();
        assert!(detect_loops(&a, &b, DEFAULT_SIMILARITY_TAU).is_empty());
    }

    #[test]
    fn detection_is_symmetric_in_agent_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let shared = random_image(&mut rng, 32, 32);
        let mut near = shared.clone();
        for v in near.data.iter_mut() {
            *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
        }
        let a = vec![descriptor_of(&shared, 0, 3), descriptor_of(&near, 0, 40)];
        let b = vec![descriptor_of(&shared, 1, 7), descriptor_of(&near, 1, 90)];
        let ab = detect_loops(&a, &b, 0.5);
        let ba = detect_loops(&b, &a, 0.5);
        assert_eq!(ab.len(), ba.len());
        for (x, y) in ab.iter().zip(&ba) {
            assert_eq!(x.a, y.a);
            assert_eq!(x.b, y.b);
            assert_relative_eq!(x.similarity, y.similarity, epsilon = 1e-12);
        }
        // Candidates always lead with the lower agent id.
        assert!(ab.iter().all(|c| c.a.0 < c.b.0));
    }

    #[test]
    fn same_agent_pairs_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let img = random_image(&mut rng, 32, 32);
        let a = vec![descriptor_of(&img, 0, 0)];
        let also_a = vec![descriptor_of(&img, 0, 50)];
        assert!(detect_loops(&a, &also_a, 0.5).is_empty());
    }
}

//! Segmentation scoring: Dice overlap, average symmetric surface
//! distance, and the fold-level aggregation that the results tables
//! report.
//!
//! Conventions, fixed here and mirrored by the test oracles: a voxel is
//! positive when its value exceeds 0.5; a positive voxel is surface when
//! any of its six axis neighbors is background or outside the volume;
//! the surface distance is the pooled mean of nearest-surface distances
//! taken in both directions, in millimeters via the voxel spacing.

use crate::error::{Error, Result};
use crate::phantom::Volume;

fn positives(v: &Volume) -> impl Iterator<Item = [usize; 3]> + '_ {
    let [d0, d1, d2] = v.dims;
    (0..d0).flat_map(move |i| {
        (0..d1).flat_map(move |j| {
            (0..d2).filter_map(move |k| (v.at(i, j, k) > 0.5).then_some([i, j, k]))
        })
    })
}

/// Dice similarity 2|A∩B| / (|A| + |B|); two empty masks count as a
/// perfect 1.0.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Invalid(format!(
            "dice dims differ: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let (mut na, mut nb, mut overlap) = (0u64, 0u64, 0u64);
    for (&va, &vb) in a.values.iter().zip(&b.values) {
        let pa = va > 0.5;
        let pb = vb > 0.5;
        na += pa as u64;
        nb += pb as u64;
        overlap += (pa && pb) as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap as f64 / (na + nb) as f64)
}

/// Positive voxels with at least one 6-connected background neighbor;
/// voxels beyond the volume border count as background, so border
/// positives are surface.
pub fn surface_voxels(v: &Volume) -> Vec<[usize; 3]> {
    let [d0, d1, d2] = v.dims;
    let dims = [d0 as i64, d1 as i64, d2 as i64];
    let is_pos = |i: i64, j: i64, k: i64| -> bool {
        if i < 0 || j < 0 || k < 0 || i >= dims[0] || j >= dims[1] || k >= dims[2] {
            return false;
        }
        v.at(i as usize, j as usize, k as usize) > 0.5
    };
    let mut out = Vec::new();
    for p in positives(v) {
        let [i, j, k] = [p[0] as i64, p[1] as i64, p[2] as i64];
        let exposed = !is_pos(i - 1, j, k)
            || !is_pos(i + 1, j, k)
            || !is_pos(i, j - 1, k)
            || !is_pos(i, j + 1, k)
            || !is_pos(i, j, k - 1)
            || !is_pos(i, j, k + 1);
        if exposed {
            out.push(p);
        }
    }
    out
}

fn nearest_mm(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f32; 3]) -> f64 {
    let mut total = 0.0f64;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let mut d2 = 0.0f64;
            for ax in 0..3 {
                let d = (a[ax] as f64 - b[ax] as f64) * spacing[ax] as f64;
                d2 += d * d;
            }
            if d2 < best {
                best = d2;
            }
        }
        total += best.sqrt();
    }
    total
}

/// Average symmetric surface distance in millimeters: pooled mean over
/// both directions of each surface voxel's distance to the other mask's
/// nearest surface voxel. One empty mask scores the volume diagonal as a
/// total-miss penalty; two empty masks score 0.
pub fn mean_surface_distance(a: &Volume, b: &Volume, spacing: [f32; 3]) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Invalid(format!(
            "surface distance dims differ: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => {
            let mut diag = 0.0f64;
            for ax in 0..3 {
                let e = a.dims[ax] as f64 * spacing[ax] as f64;
                diag += e * e;
            }
            Ok(diag.sqrt())
        }
        (false, false) => {
            let total = nearest_mm(&sa, &sb, spacing) + nearest_mm(&sb, &sa, spacing);
            Ok(total / (sa.len() + sb.len()) as f64)
        }
    }
}

/// One volume's scores within one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMetrics {
    pub volume_id: String,
    pub fold: usize,
    pub dice: f64,
    pub msd_mm: f64,
}

/// One method's aggregate row: mean and sample std of the fold-level
/// mean Dice, and the median of all per-volume surface distances.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub median_msd: f64,
}

fn sample_std(xs: &[f64], mean: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Median with the even-count convention of averaging the middle two.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Aggregate per-volume rows of one method across folds.
pub fn summarize(method: &str, rows: &[VolumeMetrics]) -> Result<MethodSummary> {
    if rows.is_empty() {
        return Err(Error::Invalid(format!("no rows to summarize for method {method}")));
    }
    let mut folds: Vec<usize> = rows.iter().map(|r| r.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    let fold_means: Vec<f64> = folds
        .iter()
        .map(|&f| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.fold == f).map(|r| r.dice).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let mean_dice = fold_means.iter().sum::<f64>() / fold_means.len() as f64;
    let std_dice = sample_std(&fold_means, mean_dice);
    let msds: Vec<f64> = rows.iter().map(|r| r.msd_mm).collect();
    Ok(MethodSummary {
        method: method.to_string(),
        mean_dice,
        std_dice,
        median_msd: median(&msds),
    })
}

/// Display name used in the rendered table.
pub fn display_name(method: &str) -> &str {
    match method {
        "tfg" => "Ours",
        "cam" => "CAM",
        "gradcam" => "Grad-CAM",
        other => other,
    }
}

/// Render the comparison table, one method per row, ordered by mean Dice
/// descending. Dice is shown as a percentage.
pub fn render_table(summaries: &[MethodSummary]) -> String {
    let mut rows = summaries.to_vec();
    rows.sort_by(|a, b| b.mean_dice.partial_cmp(&a.mean_dice).expect("finite dice"));
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>13} {:>15}\n",
        "Method", "Mean DSC (%)", "Median MSD (mm)"
    ));
    for s in &rows {
        out.push_str(&format!(
            "{:<10} {:>7.2}\u{b1}{:<5.2} {:>15.2}\n",
            display_name(&s.method),
            100.0 * s.mean_dice,
            100.0 * s.std_dice,
            s.median_msd
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn vol(dims: [usize; 3], positives: &[[usize; 3]]) -> Volume {
        let mut v = Volume::zeros(dims, [1.0; 3]);
        let mut vals = v.values.clone();
        for p in positives {
            vals[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = 1.0;
        }
        v.values = vals;
        v
    }

    #[test]
    fn dice_matches_hand_arithmetic() {
        let a = vol([4, 4, 4], &[[0, 0, 0], [1, 1, 1]]);
        let b = vol([4, 4, 4], &[[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]]);
        // |A|=2, |B|=4, overlap 2: 2*2/6.
        assert!((dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let disjoint = vol([4, 4, 4], &[[3, 0, 0]]);
        assert_eq!(dice(&a, &disjoint).unwrap(), 0.0);
        let empty = Volume::zeros([4, 4, 4], [1.0; 3]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
        let other = Volume::zeros([4, 4, 2], [1.0; 3]);
        assert!(dice(&a, &other).is_err());
    }

    #[test]
    fn dice_is_symmetric_and_bounded() {
        let mut r = rng::substream(1, "t");
        for _ in 0..20 {
            let n: usize = r.gen_range(0..20);
            let m: usize = r.gen_range(0..20);
            let pa: Vec<[usize; 3]> = (0..n)
                .map(|_| [r.gen_range(0..6), r.gen_range(0..6), r.gen_range(0..6)])
                .collect();
            let pb: Vec<[usize; 3]> = (0..m)
                .map(|_| [r.gen_range(0..6), r.gen_range(0..6), r.gen_range(0..6)])
                .collect();
            let a = vol([6, 6, 6], &pa);
            let b = vol([6, 6, 6], &pb);
            let ab = dice(&a, &b).unwrap();
            let ba = dice(&b, &a).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn surfaces_of_solid_shapes() {
        // A single voxel is its own surface.
        let single = vol([5, 5, 5], &[[2, 2, 2]]);
        assert_eq!(surface_voxels(&single), vec![[2, 2, 2]]);
        // A solid 3x3x3 cube has 26 surface voxels; only the center is
        // interior.
        let mut cube_pos = Vec::new();
        for i in 1..4 {
            for j in 1..4 {
                for k in 1..4 {
                    cube_pos.push([i, j, k]);
                }
            }
        }
        let cube = vol([5, 5, 5], &cube_pos);
        let surf = surface_voxels(&cube);
        assert_eq!(surf.len(), 26);
        assert!(!surf.contains(&[2, 2, 2]));
        // A mask filling the whole volume is all surface at the border.
        let full = vol([2, 2, 2], &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1],
                                     [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]]);
        assert_eq!(surface_voxels(&full).len(), 8);
    }

    #[test]
    fn surface_distance_point_cases() {
        let a = vol([8, 8, 8], &[[2, 2, 2]]);
        let b = vol([8, 8, 8], &[[2, 2, 5]]);
        // Two single voxels three steps apart at 1 mm spacing.
        assert!((mean_surface_distance(&a, &b, [1.0; 3]).unwrap() - 3.0).abs() < 1e-9);
        assert_eq!(mean_surface_distance(&a, &a, [1.0; 3]).unwrap(), 0.0);
        // Spacing scales the answer per axis.
        assert!((mean_surface_distance(&a, &b, [1.0, 1.0, 2.0]).unwrap() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn surface_distance_between_parallel_plates() {
        // Two full-cross-section plates at k=1 and k=5: every surface
        // voxel's nearest counterpart sits straight across, distance 4.
        let dims = [6, 6, 8];
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                pa.push([i, j, 1]);
                pb.push([i, j, 5]);
            }
        }
        let a = vol(dims, &pa);
        let b = vol(dims, &pb);
        let d = mean_surface_distance(&a, &b, [1.0; 3]).unwrap();
        assert!((d - 4.0).abs() < 1e-9, "plate distance {d}");
    }

    #[test]
    fn empty_mask_penalties() {
        let dims = [4, 4, 4];
        let a = vol(dims, &[[1, 1, 1]]);
        let empty = Volume::zeros(dims, [1.0; 3]);
        let diag = (3.0f64 * 16.0).sqrt();
        assert!((mean_surface_distance(&a, &empty, [1.0; 3]).unwrap() - diag).abs() < 1e-9);
        assert!((mean_surface_distance(&empty, &a, [1.0; 3]).unwrap() - diag).abs() < 1e-9);
        assert_eq!(mean_surface_distance(&empty, &empty, [1.0; 3]).unwrap(), 0.0);
        assert!(mean_surface_distance(&a, &empty, [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn surface_distance_is_symmetric_and_translation_invariant() {
        let mut r = rng::substream(2, "t");
        for _ in 0..10 {
            let pa: Vec<[usize; 3]> = (0..r.gen_range(1..8usize))
                .map(|_| [r.gen_range(0..4), r.gen_range(0..4), r.gen_range(0..4)])
                .collect();
            let pb: Vec<[usize; 3]> = (0..r.gen_range(1..8usize))
                .map(|_| [r.gen_range(0..4), r.gen_range(0..4), r.gen_range(0..4)])
                .collect();
            let dims = [10, 10, 10];
            let a = vol(dims, &pa);
            let b = vol(dims, &pb);
            let ab = mean_surface_distance(&a, &b, [1.0, 1.5, 0.7]).unwrap();
            let ba = mean_surface_distance(&b, &a, [1.0, 1.5, 0.7]).unwrap();
            assert_eq!(ab, ba);
            // Shift both masks by the same offset.
            let shift = |ps: &[[usize; 3]]| -> Vec<[usize; 3]> {
                ps.iter().map(|p| [p[0] + 3, p[1] + 2, p[2] + 5]).collect()
            };
            let a2 = vol(dims, &shift(&pa));
            let b2 = vol(dims, &shift(&pb));
            let shifted = mean_surface_distance(&a2, &b2, [1.0, 1.5, 0.7]).unwrap();
            assert!((ab - shifted).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregation_single_volume() {
        let rows = vec![VolumeMetrics {
            volume_id: "v0".into(),
            fold: 0,
            dice: 0.75,
            msd_mm: 2.5,
        }];
        let s = summarize("tfg", &rows).unwrap();
        assert_eq!(s.mean_dice, 0.75);
        assert_eq!(s.std_dice, 0.0);
        assert_eq!(s.median_msd, 2.5);
        assert!(summarize("tfg", &[]).is_err());
    }

    #[test]
    fn aggregation_matches_a_one_pass_oracle() {
        let mut r = rng::substream(3, "t");
        let rows: Vec<VolumeMetrics> = (0..30)
            .map(|i| VolumeMetrics {
                volume_id: format!("v{i}"),
                fold: i % 3,
                dice: r.gen_range(0.0..1.0),
                msd_mm: r.gen_range(0.0..20.0),
            })
            .collect();
        let s = summarize("cam", &rows).unwrap();

        // Oracle: fold means, their mean/std, and a sorted-median, all
        // recomputed directly.
        let mut fold_means = Vec::new();
        for f in 0..3usize {
            let vals: Vec<f64> =
                rows.iter().filter(|r| r.fold == f).map(|r| r.dice).collect();
            fold_means.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        let mean = fold_means.iter().sum::<f64>() / 3.0;
        let var = fold_means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / 2.0;
        assert!((s.mean_dice - mean).abs() < 1e-12);
        assert!((s.std_dice - var.sqrt()).abs() < 1e-12);
        let mut msds: Vec<f64> = rows.iter().map(|r| r.msd_mm).collect();
        msds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = 0.5 * (msds[14] + msds[15]);
        assert!((s.median_msd - med).abs() < 1e-12);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[1.0, 2.0, 4.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
        assert_eq!(median(&[10.0, 1.0]), 5.5);
    }

    #[test]
    fn table_renders_the_reference_row_shape() {
        let summaries = vec![
            MethodSummary {
                method: "tfg".into(),
                mean_dice: 0.4205,
                std_dice: 0.0424,
                median_msd: 12.50,
            },
            MethodSummary {
                method: "cam".into(),
                mean_dice: 0.1522,
                std_dice: 0.0105,
                median_msd: 32.10,
            },
        ];
        let table = render_table(&summaries);
        assert!(table.contains("Ours"), "{table}");
        assert!(table.contains("42.05\u{b1}4.24"), "{table}");
        assert!(table.contains("12.50"), "{table}");
        // Rows are ordered by mean Dice, best first.
        let ours = table.find("Ours").unwrap();
        let cam = table.find("CAM").unwrap();
        assert!(ours < cam);
    }

    #[test]
    fn table_orders_rows_by_dice_descending() {
        let summaries = vec![
            MethodSummary { method: "cam".into(), mean_dice: 0.3, std_dice: 0.0, median_msd: 1.0 },
            MethodSummary { method: "tfg".into(), mean_dice: 0.6, std_dice: 0.0, median_msd: 1.0 },
            MethodSummary {
                method: "gradcam".into(),
                mean_dice: 0.4,
                std_dice: 0.0,
                median_msd: 1.0,
            },
        ];
        let table = render_table(&summaries);
        let pos = |m: &str| table.find(m).unwrap();
        // "CAM" also occurs inside "Grad-CAM", so anchor it to a line start.
        assert!(pos("Ours") < pos("Grad-CAM"));
        assert!(pos("Grad-CAM") < pos("\nCAM"));
    }
}

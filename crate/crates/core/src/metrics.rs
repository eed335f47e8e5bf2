//! Volume overlap and surface-distance metrics, aggregation across cases
//! and a paired sign-flip significance test.

use std::fmt::Write as _;

use ndarray::{Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

/// Foreground structures reported per case, in class-id order.
pub const STRUCTURES: [&str; NUM_CLASSES - 1] = [CLASS_NAMES[1], CLASS_NAMES[2], CLASS_NAMES[3]];

/// Seed and flip budget for the Monte-Carlo branch of [`paired_test`].
pub const PERMUTATION_SEED: u64 = 0x5eed;
pub const PERMUTATION_FLIPS: usize = 10_000;
pub const EXHAUSTIVE_MAX_N: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryVolume {
    pub mask: Array3<bool>,
    pub spacing: [f64; 3],
}

impl BinaryVolume {
    pub fn new(mask: Array3<bool>, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::validation(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(BinaryVolume { mask, spacing })
    }

    pub fn from_labels(labels: &Array3<u8>, class: u8, spacing: [f64; 3]) -> Result<Self> {
        BinaryVolume::new(labels.mapv(|v| v == class), spacing)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    /// Length of the volume diagonal in mm.
    pub fn diagonal_mm(&self) -> f64 {
        let (d, h, w) = self.mask.dim();
        let [sz, sy, sx] = self.spacing;
        ((d as f64 * sz).powi(2) + (h as f64 * sy).powi(2) + (w as f64 * sx).powi(2)).sqrt()
    }
}

fn check_pair(a: &BinaryVolume, b: &BinaryVolume) -> Result<()> {
    if a.mask.dim() != b.mask.dim() {
        return Err(Error::validation(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.mask.dim(),
            b.mask.dim()
        )));
    }
    if a.spacing != b.spacing {
        return Err(Error::validation(format!(
            "mask spacings differ: {:?} vs {:?}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

pub fn dsc3d(pred: &BinaryVolume, gt: &BinaryVolume) -> Result<f64> {
    if pred.mask.dim() != gt.mask.dim() {
        return Err(Error::validation(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.mask.dim(),
            gt.mask.dim()
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    Zip::from(&pred.mask).and(&gt.mask).for_each(|&p, &g| {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    });
    Ok(match total {
        0 => 1.0,
        _ => 2.0 * inter as f64 / total as f64,
    })
}

/// Foreground voxels with at least one background or out-of-bounds 6-neighbour,
/// in `[z, y, x]` raster order.
pub fn extract_surface(vol: &BinaryVolume) -> Vec<[usize; 3]> {
    let m = &vol.mask;
    let (d, h, w) = m.dim();
    let mut out = Vec::new();
    for ((z, y, x), &v) in m.indexed_iter() {
        if !v {
            continue;
        }
        let boundary = z == 0
            || y == 0
            || x == 0
            || z + 1 == d
            || y + 1 == h
            || x + 1 == w
            || !m[[z - 1, y, x]]
            || !m[[z + 1, y, x]]
            || !m[[z, y - 1, x]]
            || !m[[z, y + 1, x]]
            || !m[[z, y, x - 1]]
            || !m[[z, y, x + 1]];
        if boundary {
            out.push([z, y, x]);
        }
    }
    out
}

#[inline]
fn axis_sq(a: usize, b: usize, s: f64) -> f64 {
    let d = (a as f64 - b as f64) * s;
    d * d
}

/// Squared distance in mm; the summation order is part of the contract.
#[inline]
pub fn squared_distance_mm(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    axis_sq(a[0], b[0], spacing[0]) + axis_sq(a[1], b[1], spacing[1]) + axis_sq(a[2], b[2], spacing[2])
}

/// Nearest-point queries against a raster-ordered point set, pruned by slice and row.
struct SurfaceIndex<'a> {
    points: &'a [[usize; 3]],
    /// (z, start, end) for each occupied slice.
    slices: Vec<(usize, usize, usize)>,
    spacing: [f64; 3],
}

impl<'a> SurfaceIndex<'a> {
    fn new(points: &'a [[usize; 3]], spacing: [f64; 3]) -> Self {
        let mut slices: Vec<(usize, usize, usize)> = Vec::new();
        for (i, p) in points.iter().enumerate() {
            match slices.last_mut() {
                Some(last) if last.0 == p[0] => last.2 = i + 1,
                _ => slices.push((p[0], i, i + 1)),
            }
        }
        SurfaceIndex { points, slices, spacing }
    }

    fn nearest_sq(&self, q: [usize; 3]) -> f64 {
        let mut best = f64::INFINITY;
        let pivot = self.slices.partition_point(|s| s.0 < q[0]);
        let scan = |k: usize, best: &mut f64| -> bool {
            let (z, start, end) = self.slices[k];
            let dz = axis_sq(q[0], z, self.spacing[0]);
            if dz >= *best {
                return false;
            }
            let row = &self.points[start..end];
            let mid = row.partition_point(|p| p[1] < q[1]);
            for p in row[mid..].iter() {
                if dz + axis_sq(q[1], p[1], self.spacing[1]) >= *best {
                    break;
                }
                *best = best.min(squared_distance_mm(q, *p, self.spacing));
            }
            for p in row[..mid].iter().rev() {
                if dz + axis_sq(q[1], p[1], self.spacing[1]) >= *best {
                    break;
                }
                *best = best.min(squared_distance_mm(q, *p, self.spacing));
            }
            true
        };
        for k in pivot..self.slices.len() {
            if !scan(k, &mut best) {
                break;
            }
        }
        for k in (0..pivot).rev() {
            if !scan(k, &mut best) {
                break;
            }
        }
        best
    }
}

/// Linear interpolation between order statistics of a sorted sample.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hd95 {
    pub mm: f64,
    /// Set when exactly one mask is empty and `mm` is the diagonal sentinel.
    pub sentinel: bool,
}

pub fn hd95(pred: &BinaryVolume, gt: &BinaryVolume) -> Result<Hd95> {
    check_pair(pred, gt)?;
    let sp = extract_surface(pred);
    let sg = extract_surface(gt);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(Hd95 { mm: 0.0, sentinel: false }),
        (true, false) | (false, true) => {
            return Ok(Hd95 {
                mm: pred.diagonal_mm(),
                sentinel: true,
            })
        }
        _ => {}
    }
    let to_gt = SurfaceIndex::new(&sg, gt.spacing);
    let to_pred = SurfaceIndex::new(&sp, pred.spacing);
    let mut dists: Vec<f64> = sp.iter().map(|&a| to_gt.nearest_sq(a).sqrt()).collect();
    dists.extend(sg.iter().map(|&b| to_pred.nearest_sq(b).sqrt()));
    dists.sort_by(f64::total_cmp);
    Ok(Hd95 {
        mm: percentile_sorted(&dists, 95.0),
        sentinel: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub name: String,
    pub dsc: f64,
    pub hd95: f64,
    pub hd95_sentinel: bool,
    pub pred_empty: bool,
    pub gt_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub structures: Vec<StructureMetrics>,
}

impl CaseMetrics {
    pub fn mean_dsc(&self) -> f64 {
        self.structures.iter().map(|s| s.dsc).sum::<f64>() / self.structures.len() as f64
    }

    pub fn mean_hd95(&self) -> f64 {
        self.structures.iter().map(|s| s.hd95).sum::<f64>() / self.structures.len() as f64
    }
}

pub fn evaluate_case(
    case_id: impl Into<String>,
    pred: &Array3<u8>,
    gt: &Array3<u8>,
    spacing: [f64; 3],
) -> Result<CaseMetrics> {
    if pred.dim() != gt.dim() {
        return Err(Error::validation(format!(
            "prediction shape {:?} differs from label shape {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if let Some(v) = pred.iter().chain(gt.iter()).find(|&&v| v as usize >= NUM_CLASSES) {
        return Err(Error::validation(format!("label value {v} outside 0..{NUM_CLASSES}")));
    }
    let mut structures = Vec::with_capacity(STRUCTURES.len());
    for (k, name) in STRUCTURES.iter().enumerate() {
        let class = k as u8 + 1;
        let p = BinaryVolume::from_labels(pred, class, spacing)?;
        let g = BinaryVolume::from_labels(gt, class, spacing)?;
        let h = hd95(&p, &g)?;
        structures.push(StructureMetrics {
            name: name.to_string(),
            dsc: dsc3d(&p, &g)?,
            hd95: h.mm,
            hd95_sentinel: h.sentinel,
            pred_empty: p.count() == 0,
            gt_empty: g.count() == 0,
        });
    }
    Ok(CaseMetrics {
        case_id: case_id.into(),
        structures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Two-pass mean and population standard deviation.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }

    pub fn cell(&self, decimals: usize) -> String {
        format!("{:.*}({:.*})", decimals, self.mean, decimals, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub name: String,
    pub dsc: MeanStd,
    pub hd95: MeanStd,
    pub sentinel_cases: usize,
}

/// Columns RV, Myo, LV and Mean, where Mean summarizes per-case averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub n_cases: usize,
    pub columns: Vec<StructureSummary>,
}

impl AggregateTable {
    pub fn column(&self, name: &str) -> Option<&StructureSummary> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn mean_dsc(&self) -> f64 {
        self.column("Mean").map(|c| c.dsc.mean).unwrap_or(f64::NAN)
    }
}

pub fn aggregate(cases: &[CaseMetrics]) -> Result<AggregateTable> {
    if cases.is_empty() {
        return Err(Error::validation("cannot aggregate an empty list of cases"));
    }
    let mut columns = Vec::with_capacity(STRUCTURES.len() + 1);
    for (k, name) in STRUCTURES.iter().enumerate() {
        let mut dsc = Vec::with_capacity(cases.len());
        let mut hd = Vec::with_capacity(cases.len());
        let mut sentinel_cases = 0;
        for case in cases {
            let s = case.structures.get(k).filter(|s| s.name == *name).ok_or_else(|| {
                Error::validation(format!("case {} lacks structure {name}", case.case_id))
            })?;
            dsc.push(s.dsc);
            hd.push(s.hd95);
            sentinel_cases += s.hd95_sentinel as usize;
        }
        columns.push(StructureSummary {
            name: name.to_string(),
            dsc: MeanStd::of(&dsc),
            hd95: MeanStd::of(&hd),
            sentinel_cases,
        });
    }
    let dsc: Vec<f64> = cases.iter().map(CaseMetrics::mean_dsc).collect();
    let hd: Vec<f64> = cases.iter().map(CaseMetrics::mean_hd95).collect();
    columns.push(StructureSummary {
        name: "Mean".to_string(),
        dsc: MeanStd::of(&dsc),
        hd95: MeanStd::of(&hd),
        sentinel_cases: cases
            .iter()
            .filter(|c| c.structures.iter().any(|s| s.hd95_sentinel))
            .count(),
    });
    Ok(AggregateTable {
        n_cases: cases.len(),
        columns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    /// Paired t statistic; infinite when all differences are equal and nonzero.
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub exhaustive: bool,
}

pub fn paired_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::validation("paired test needs at least two cases"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let statistic = if mean == 0.0 {
        0.0
    } else if var == 0.0 {
        mean.signum() * f64::INFINITY
    } else {
        mean / (var / n as f64).sqrt()
    };

    let observed = d.iter().sum::<f64>().abs();
    let scale = d.iter().map(|v| v.abs()).sum::<f64>();
    let threshold = observed - 1e-12 * scale.max(f64::MIN_POSITIVE);
    let flipped_sum = |signs: &mut dyn FnMut(usize) -> bool| -> f64 {
        d.iter()
            .enumerate()
            .map(|(i, &v)| if signs(i) { -v } else { v })
            .sum::<f64>()
            .abs()
    };
    let (p_value, exhaustive) = if n <= EXHAUSTIVE_MAX_N {
        let total = 1usize << n;
        let hits = (0..total)
            .filter(|&mask| flipped_sum(&mut |i| mask >> i & 1 == 1) >= threshold)
            .count();
        (hits as f64 / total as f64, true)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(PERMUTATION_SEED);
        let mut hits = 0usize;
        for _ in 0..PERMUTATION_FLIPS {
            let signs: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            if flipped_sum(&mut |i| signs[i]) >= threshold {
                hits += 1;
            }
        }
        ((hits + 1) as f64 / (PERMUTATION_FLIPS + 1) as f64, false)
    };
    Ok(PairedTest {
        statistic,
        p_value,
        n,
        exhaustive,
    })
}

/// Header of the table export: method, then DSC and HD95 per column.
pub fn csv_header() -> String {
    let mut s = String::from("method");
    for name in STRUCTURES.iter().copied().chain(["Mean"]) {
        let _ = write!(s, ",{name} DSC,{name} HD95");
    }
    s
}

pub fn csv_row(method: &str, table: &AggregateTable) -> String {
    let mut s = method.to_string();
    for col in &table.columns {
        let _ = write!(s, ",{},{}", col.dsc.cell(3), col.hd95.cell(2));
    }
    s
}

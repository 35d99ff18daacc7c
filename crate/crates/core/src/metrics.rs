//! Overlap, surface-distance and landmark metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ndv, trilinear_stencil, DisplacementField};
use crate::scalar::Scalar;
use crate::volume::{LabelMap, LandmarkSet};

/// How discrete labels are resampled through a field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LabelInterp {
    #[default]
    Nearest,
    /// Trilinear interpolation of one-hot channels followed by argmax.
    Linear,
}

fn check_dims(a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("dims {a:?} vs {b:?}")));
    }
    Ok(())
}

fn displaced<T: Scalar>(u: &DisplacementField<T>, i: usize, pos: [usize; 3]) -> [f64; 3] {
    let n = u.voxels();
    let data = u.data();
    [0, 1, 2].map(|a| pos[a] as f64 + data[a * n + i].as_f64())
}

fn for_each_voxel(dims: [usize; 3], mut f: impl FnMut(usize, [usize; 3])) {
    let mut i = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                f(i, [d, h, w]);
                i += 1;
            }
        }
    }
}

/// `out(x) = labels(round(x + u(x)))`, clamped to the grid.
pub fn warp_labels<T: Scalar>(labels: &LabelMap, u: &DisplacementField<T>) -> Result<LabelMap> {
    let dims = labels.dims();
    check_dims(dims, u.dims())?;
    let mut out = vec![0; labels.data().len()];
    for_each_voxel(dims, |i, pos| {
        let p = displaced(u, i, pos);
        let q = [0, 1, 2].map(|a| (p[a].round().max(0.0) as usize).min(dims[a] - 1));
        out[i] = labels.get(q[0], q[1], q[2]);
    });
    LabelMap::new(dims, labels.spacing(), out)
}

/// One-hot trilinear resampling; ties go to the smaller label.
pub fn warp_labels_linear<T: Scalar>(labels: &LabelMap, u: &DisplacementField<T>) -> Result<LabelMap> {
    let dims = labels.dims();
    check_dims(dims, u.dims())?;
    let src = labels.data();
    let mut out = vec![0; src.len()];
    for_each_voxel(dims, |i, pos| {
        let (idx, wts) = trilinear_stencil(dims, displaced(u, i, pos));
        let mut acc: [(i32, f64); 8] = [(i32::MAX, 0.0); 8];
        let mut used = 0;
        for k in 0..8 {
            if wts[k] == 0.0 {
                continue;
            }
            let l = src[idx[k]];
            match acc[..used].iter_mut().find(|e| e.0 == l) {
                Some(e) => e.1 += wts[k],
                None => {
                    acc[used] = (l, wts[k]);
                    used += 1;
                }
            }
        }
        let mut best = (src[idx[0]], -1.0);
        for &(l, w) in &acc[..used] {
            if w > best.1 || (w == best.1 && l < best.0) {
                best = (l, w);
            }
        }
        out[i] = best.0;
    });
    LabelMap::new(dims, labels.spacing(), out)
}

pub fn warp_labels_with<T: Scalar>(labels: &LabelMap, u: &DisplacementField<T>, interp: LabelInterp) -> Result<LabelMap> {
    match interp {
        LabelInterp::Nearest => warp_labels(labels, u),
        LabelInterp::Linear => warp_labels_linear(labels, u),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: i32,
    /// `None` when the score is undefined for this class.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_class: Vec<ClassScore>,
    pub mean: Option<f64>,
}

fn mean_defined(scores: &[ClassScore]) -> Option<f64> {
    let vals: Vec<f64> = scores.iter().filter_map(|s| s.value).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn dice(a: &LabelMap, b: &LabelMap, classes: &[i32]) -> Result<DiceReport> {
    check_dims(a.dims(), b.dims())?;
    let per_class: Vec<ClassScore> = classes
        .iter()
        .map(|&c| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let (ia, ib) = (x == c, y == c);
                na += ia as usize;
                nb += ib as usize;
                both += (ia && ib) as usize;
            }
            let value = (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64);
            ClassScore { class: c, value }
        })
        .collect();
    let mean = mean_defined(&per_class);
    Ok(DiceReport { per_class, mean })
}

fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for_each_voxel(dims, |i, pos| {
        if !mask[i] {
            return;
        }
        let stride = [dims[1] * dims[2], dims[2], 1];
        out[i] = (0..3).any(|a| {
            let below = pos[a] == 0 || !mask[i - stride[a]];
            let above = pos[a] + 1 == dims[a] || !mask[i + stride[a]];
            below || above
        });
    });
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * step;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest `true` voxel.
fn squared_edt(seeds: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let stride = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for a in 0..3 {
        let n = dims[a];
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        let others: Vec<usize> = (0..3).filter(|&b| b != a).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * stride[others[0]] + j * stride[others[1]];
                for (k, l) in line.iter_mut().enumerate() {
                    *l = g[base + k * stride[a]];
                }
                edt_1d(&line, spacing[a], &mut res, &mut v, &mut z);
                for (k, r) in res.iter().enumerate() {
                    g[base + k * stride[a]] = *r;
                }
            }
        }
    }
    g
}

/// Linear-interpolated percentile of unsorted data, `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(values[lo] + (pos - lo as f64) * (values[hi] - values[lo]))
}

/// 95th percentile of the pooled surface-to-surface distances, in mm.
pub fn hd95(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::shape(format!("hd95: masks of {} and {} voxels for dims {dims:?}", a.len(), b.len())));
    }
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return Err(Error::invalid("hd95 of an empty mask"));
    }
    let sa = surface(a, dims);
    let sb = surface(b, dims);
    let da = squared_edt(&sa, dims, spacing);
    let db = squared_edt(&sb, dims, spacing);
    let mut dists: Vec<f64> = Vec::new();
    dists.extend(sa.iter().zip(&db).filter(|(s, _)| **s).map(|(_, d)| d.sqrt()));
    dists.extend(sb.iter().zip(&da).filter(|(s, _)| **s).map(|(_, d)| d.sqrt()));
    Ok(percentile(&mut dists, 95.0).expect("non-empty surfaces"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreReport {
    pub mean: f64,
    pub median: f64,
}

/// Landmark error after mapping fixed points through `x + u(x)`, in mm.
pub fn tre<T: Scalar>(landmarks: &LandmarkSet, u: &DisplacementField<T>, spacing: [f64; 3]) -> Result<TreReport> {
    if landmarks.is_empty() {
        return Err(Error::invalid("tre of an empty landmark set"));
    }
    let dims = u.dims();
    let mut errs = Vec::with_capacity(landmarks.len());
    for (p, q) in landmarks.moving().iter().zip(landmarks.fixed()) {
        let qv = [0, 1, 2].map(|a| q[a] / spacing[a]);
        if (0..3).any(|a| qv[a] < 0.0 || qv[a] > (dims[a] - 1) as f64) {
            return Err(Error::invalid(format!("landmark {q:?} mm lies outside the grid {dims:?}")));
        }
        let d = u.sample(qv);
        let sq: f64 = (0..3).map(|a| ((qv[a] + d[a]) * spacing[a] - p[a]).powi(2)).sum();
        errs.push(sq.sqrt());
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let median = percentile(&mut errs, 50.0).expect("non-empty");
    Ok(TreReport { mean, median })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pair: String,
    pub dice: Option<DiceReport>,
    pub hd95: Option<Vec<ClassScore>>,
    pub hd95_mean: Option<f64>,
    pub tre: Option<TreReport>,
    pub ndv: f64,
}

pub const CSV_HEADER: &str = "pair,dice_mean,hd95_mean,tre_mean,tre_median,ndv";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6}",
            self.pair,
            opt(self.dice.as_ref().and_then(|d| d.mean)),
            opt(self.hd95_mean),
            opt(self.tre.map(|t| t.mean)),
            opt(self.tre.map(|t| t.median)),
            self.ndv
        )
    }

    fn columns(&self) -> [Option<f64>; 5] {
        [self.dice.as_ref().and_then(|d| d.mean), self.hd95_mean, self.tre.map(|t| t.mean), self.tre.map(|t| t.median), Some(self.ndv)]
    }
}

/// `mean ± std` with four decimals (sample standard deviation).
pub fn format_mean_std(values: &[f64]) -> String {
    if values.is_empty() {
        return String::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    format!("{mean:.4} ± {:.4}", var.sqrt())
}

/// Aggregate CSV row over a batch of reports.
pub fn aggregate_row(reports: &[MetricReport]) -> String {
    let mut cells = vec!["aggregate".to_string()];
    for col in 0..5 {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.columns()[col]).collect();
        cells.push(format_mean_std(&vals));
    }
    cells.join(",")
}

/// Everything needed to score one registration.
pub struct EvalInputs<'a, T> {
    pub pair: String,
    pub field: &'a DisplacementField<T>,
    pub labels: Option<(&'a LabelMap, &'a LabelMap)>,
    pub landmarks: Option<&'a LandmarkSet>,
    pub spacing: [f64; 3],
    pub interp: LabelInterp,
}

pub fn evaluate<T: Scalar>(inputs: &EvalInputs<'_, T>) -> Result<MetricReport> {
    let u = inputs.field;
    let (mut dice_rep, mut hd, mut hd_mean) = (None, None, None);
    if let Some((moving, fixed)) = inputs.labels {
        check_dims(moving.dims(), u.dims())?;
        let warped = warp_labels_with(moving, u, inputs.interp)?;
        let mut classes = moving.classes();
        classes.extend(fixed.classes());
        classes.sort_unstable();
        classes.dedup();
        dice_rep = Some(dice(&warped, fixed, &classes)?);
        let scores: Vec<ClassScore> = classes
            .iter()
            .map(|&c| {
                let value = hd95(&warped.mask(c), &fixed.mask(c), u.dims(), inputs.spacing).ok();
                ClassScore { class: c, value }
            })
            .collect();
        hd_mean = mean_defined(&scores);
        hd = Some(scores);
    }
    let tre_rep = inputs.landmarks.map(|l| tre(l, u, inputs.spacing)).transpose()?;
    Ok(MetricReport { pair: inputs.pair.clone(), dice: dice_rep, hd95: hd, hd95_mean: hd_mean, tre: tre_rep, ndv: ndv(u)? })
}

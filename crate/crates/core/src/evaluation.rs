//! Overlap and surface-distance metrics, the 15-subset missing-modality
//! protocol, and report files.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::{center_crop, derive_region_masks, MultimodalCase, Region};
use crate::error::{Error, Result};
use crate::masking::{delta_names, protocol_subsets, Delta};

pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!("dsc: {} vs {} voxels", pred.len(), gt.len())));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// How the 95th percentile is read off the sorted distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Linear between the two neighbouring order statistics.
    #[default]
    Linear,
    Lower,
    Higher,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub percentile: f64,
    pub interpolation: Interpolation,
    /// Above this many surface-voxel pairs the distance transform replaces brute force.
    pub brute_force_limit: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            percentile: 95.0,
            interpolation: Interpolation::Linear,
            brute_force_limit: 1 << 22,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::config("eval.percentile must lie in [0,100]"));
        }
        Ok(())
    }
}

/// Percentile of unsorted values (which get sorted in place).
pub fn percentile(values: &mut [f64], pct: f64, interp: Interpolation) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (values.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    match interp {
        Interpolation::Linear => values[lo] + (values[hi] - values[lo]) * (pos - lo as f64),
        Interpolation::Lower => values[lo],
        Interpolation::Higher => values[hi],
        Interpolation::Nearest => values[pos.round() as usize],
    }
}

/// Mask voxels with a 6-neighbour outside the mask or outside the volume.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<usize> {
    let [d, h, w] = dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if edge
                    || !mask[i - h * w]
                    || !mask[i + h * w]
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - 1]
                    || !mask[i + 1]
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

fn coords(i: usize, dims: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    let [_, h, w] = dims;
    [
        (i / (h * w)) as f64 * spacing[0],
        ((i / w) % h) as f64 * spacing[1],
        (i % w) as f64 * spacing[2],
    ]
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Lower envelope of parabolas: `out[x] = min_q w·(x−q)² + f[q]`.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let pf = p as f64;
            let s = ((f[q] + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (x, o) in out.iter_mut().enumerate() {
        let xf = x as f64;
        while z[j + 1] < xf {
            j += 1;
        }
        let d = xf - v[j] as f64;
        *o = w * d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance to the nearest `true` voxel.
pub fn squared_distance_transform(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let wsq = spacing[axis] * spacing[axis];
        let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
        for start in 0..d * h * w {
            // visit each line once, from its first voxel
            if (start / stride) % n != 0 {
                continue;
            }
            for (t, l) in line.iter_mut().enumerate() {
                *l = g[start + t * stride];
            }
            edt_1d(&line, wsq, &mut out);
            for (t, &o) in out.iter().enumerate() {
                g[start + t * stride] = o;
            }
        }
    }
    g
}

fn directed(from: &[usize], to: &[usize], dims: [usize; 3], spacing: [f64; 3], brute: bool) -> Vec<f64> {
    if brute {
        let targets: Vec<[f64; 3]> = to.iter().map(|&j| coords(j, dims, spacing)).collect();
        from.iter()
            .map(|&i| {
                let a = coords(i, dims, spacing);
                targets.iter().map(|&b| dist_sq(a, b)).fold(f64::INFINITY, f64::min).sqrt()
            })
            .collect()
    } else {
        let mut target = vec![false; dims.iter().product()];
        for &j in to {
            target[j] = true;
        }
        let dt = squared_distance_transform(&target, dims, spacing);
        from.iter().map(|&i| dt[i].sqrt()).collect()
    }
}

/// Diagonal of the volume in mm, voxel centre to voxel centre.
pub fn volume_diagonal(dims: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|k| (dims[k].saturating_sub(1) as f64 * spacing[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// 95th-percentile symmetric surface distance in mm.
pub fn hd95(pred: &[bool], gt: &[bool], dims: [usize; 3], spacing: [f64; 3], cfg: &EvalConfig) -> Result<f64> {
    let n: usize = dims.iter().product();
    if pred.len() != n || gt.len() != n {
        return Err(Error::contract(format!(
            "hd95: masks of {} and {} voxels for dims {dims:?}",
            pred.len(),
            gt.len()
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::contract(format!("hd95: spacing {spacing:?} must be positive")));
    }
    let (sp, sg) = (surface(pred, dims), surface(gt, dims));
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(volume_diagonal(dims, spacing)),
        _ => {}
    }
    let brute = sp.len().saturating_mul(sg.len()) <= cfg.brute_force_limit;
    let mut all = directed(&sp, &sg, dims, spacing, brute);
    all.extend(directed(&sg, &sp, dims, spacing, brute));
    Ok(percentile(&mut all, cfg.percentile, cfg.interpolation))
}

/// Something that labels a case given which modalities are available.
pub trait Segmenter: Sync {
    /// Spatial size the model consumes; cases are centre-cropped to it.
    fn input_dims(&self) -> Option<[usize; 3]>;
    fn predict(&self, case: &MultimodalCase, delta: Delta) -> Result<Vec<u8>>;
}

/// Returns the ground truth regardless of availability.
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn input_dims(&self) -> Option<[usize; 3]> {
        None
    }

    fn predict(&self, case: &MultimodalCase, _delta: Delta) -> Result<Vec<u8>> {
        Ok(case.labels.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionMetric {
    /// Percent.
    pub dsc: f64,
    /// Millimetres.
    pub hd95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub delta: Delta,
    /// WT, TC, ET.
    pub metrics: [RegionMetric; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub rows: Vec<ProtocolRow>,
    /// Per-region mean over the rows.
    pub average: [RegionMetric; 3],
}

impl ProtocolReport {
    pub fn from_rows(rows: Vec<ProtocolRow>) -> Result<Self> {
        if rows.len() != 15 {
            return Err(Error::protocol(format!("a protocol report has 15 rows, got {}", rows.len())));
        }
        let mut average = [RegionMetric::default(); 3];
        for (r, avg) in average.iter_mut().enumerate() {
            avg.dsc = rows.iter().map(|row| row.metrics[r].dsc).sum::<f64>() / rows.len() as f64;
            avg.hd95 = rows.iter().map(|row| row.metrics[r].hd95).sum::<f64>() / rows.len() as f64;
        }
        Ok(ProtocolReport { rows, average })
    }

    /// Mean DSC over regions and subsets, percent.
    pub fn mean_dsc(&self) -> f64 {
        self.average.iter().map(|m| m.dsc).sum::<f64>() / 3.0
    }
}

/// Metrics for one case under one subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub subset: Vec<String>,
    pub wt: RegionMetric,
    pub tc: RegionMetric,
    pub et: RegionMetric,
}

/// Per-region metrics of a predicted label map against the ground truth.
pub fn case_metrics(pred: &[u8], case: &MultimodalCase, cfg: &EvalConfig) -> Result<[RegionMetric; 3]> {
    let p = derive_region_masks(pred)?;
    let g = derive_region_masks(&case.labels)?;
    let mut out = [RegionMetric::default(); 3];
    for (o, region) in out.iter_mut().zip(Region::ALL) {
        o.dsc = 100.0 * dsc(p.get(region), g.get(region))?;
        o.hd95 = hd95(p.get(region), g.get(region), case.dims, case.spacing, cfg)?;
    }
    Ok(out)
}

fn prepare(seg: &dyn Segmenter, case: &MultimodalCase) -> Result<MultimodalCase> {
    match seg.input_dims() {
        Some(dims) if dims != case.dims => center_crop(case, dims),
        _ => Ok(case.clone()),
    }
}

/// Mean per-region DSC (fractions) over `cases` with a fixed availability.
pub fn mean_region_dsc(seg: &dyn Segmenter, cases: &[MultimodalCase], delta: Delta) -> Result<[f64; 3]> {
    let per_case: Vec<Result<[f64; 3]>> = cases
        .par_iter()
        .map(|case| {
            let case = prepare(seg, case)?;
            let pred = seg.predict(&case, delta)?;
            let p = derive_region_masks(&pred)?;
            let g = derive_region_masks(&case.labels)?;
            let mut out = [0.0; 3];
            for (o, region) in out.iter_mut().zip(Region::ALL) {
                *o = dsc(p.get(region), g.get(region))?;
            }
            Ok(out)
        })
        .collect();
    let mut sum = [0.0; 3];
    for r in per_case {
        let r = r?;
        for k in 0..3 {
            sum[k] += r[k];
        }
    }
    Ok(sum.map(|s| s / cases.len().max(1) as f64))
}

/// All 15 subsets × all cases. Returns the report and per-case records in
/// subset-major order.
pub fn evaluate_protocol(
    seg: &dyn Segmenter,
    cases: &[MultimodalCase],
    cfg: &EvalConfig,
) -> Result<(ProtocolReport, Vec<CaseRecord>)> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::protocol("evaluation needs at least one test case"));
    }
    let prepared = cases.iter().map(|c| prepare(seg, c)).collect::<Result<Vec<_>>>()?;
    let subsets = protocol_subsets();
    let jobs: Vec<(usize, usize)> = (0..subsets.len())
        .flat_map(|s| (0..prepared.len()).map(move |c| (s, c)))
        .collect();
    let results: Vec<Result<[RegionMetric; 3]>> = jobs
        .par_iter()
        .map(|&(s, c)| {
            let pred = seg.predict(&prepared[c], subsets[s])?;
            case_metrics(&pred, &prepared[c], cfg)
        })
        .collect();
    let mut rows = Vec::with_capacity(subsets.len());
    let mut records = Vec::with_capacity(jobs.len());
    let mut results = results.into_iter();
    for delta in subsets {
        let mut sum = [RegionMetric::default(); 3];
        for case in &prepared {
            let m = results.next().expect("one result per job")?;
            for r in 0..3 {
                sum[r].dsc += m[r].dsc;
                sum[r].hd95 += m[r].hd95;
            }
            records.push(CaseRecord {
                case_id: case.case_id.clone(),
                subset: delta_names(&delta).into_iter().map(String::from).collect(),
                wt: m[0],
                tc: m[1],
                et: m[2],
            });
        }
        let n = prepared.len() as f64;
        let metrics = sum.map(|m| RegionMetric {
            dsc: m.dsc / n,
            hd95: m.hd95 / n,
        });
        rows.push(ProtocolRow { delta, metrics });
    }
    Ok((ProtocolReport::from_rows(rows)?, records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::config(format!("unknown report format {other:?} (csv, markdown)"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

pub const CSV_HEADER: &str = "flair,t1,t1ce,t2,region,dsc,hd95";

/// One region block of 15 rows after another.
pub fn to_csv(report: &ProtocolReport) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for (r, region) in Region::ALL.iter().enumerate() {
        for row in &report.rows {
            let flags: Vec<&str> = row.delta.iter().map(|&d| if d { "1" } else { "0" }).collect();
            let m = row.metrics[r];
            writeln!(s, "{},{},{},{}", flags.join(","), region.name(), m.dsc, m.hd95).unwrap();
        }
    }
    s
}

pub fn parse_csv(text: &str) -> Result<ProtocolReport> {
    let bad = |msg: String| Error::format("report.csv", msg);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut rows: Vec<ProtocolRow> = Vec::new();
    for (n, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("line {}: expected 7 fields", n + 2)));
        }
        let mut delta = [false; 4];
        for (d, v) in delta.iter_mut().zip(&f[..4]) {
            *d = match *v {
                "1" => true,
                "0" => false,
                _ => return Err(bad(format!("line {}: availability flag {v:?}", n + 2))),
            };
        }
        let region = Region::parse(f[4]).ok_or_else(|| bad(format!("line {}: region {:?}", n + 2, f[4])))?;
        let num = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 2)));
        let metric = RegionMetric {
            dsc: num(f[5])?,
            hd95: num(f[6])?,
        };
        let r = Region::ALL.iter().position(|&x| x == region).unwrap();
        let row = match rows.iter_mut().position(|row| row.delta == delta) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(ProtocolRow {
                    delta,
                    metrics: [RegionMetric::default(); 3],
                });
                rows.last_mut().unwrap()
            }
        };
        row.metrics[r] = metric;
    }
    ProtocolReport::from_rows(rows)
}

pub fn to_markdown(report: &ProtocolReport) -> String {
    let mut s = String::new();
    s.push_str("| FLAIR | T1 | T1ce | T2 | DSC WT | DSC TC | DSC ET | HD95 WT | HD95 TC | HD95 ET |\n");
    s.push_str("|:-:|:-:|:-:|:-:|--:|--:|--:|--:|--:|--:|\n");
    let fmt = |m: &[RegionMetric; 3]| {
        let d: Vec<String> = m.iter().map(|x| format!("{:.2}", x.dsc)).collect();
        let h: Vec<String> = m.iter().map(|x| format!("{:.2}", x.hd95)).collect();
        format!("{} | {}", d.join(" | "), h.join(" | "))
    };
    for row in &report.rows {
        let glyphs: Vec<&str> = row.delta.iter().map(|&d| if d { "●" } else { "○" }).collect();
        writeln!(s, "| {} | {} |", glyphs.join(" | "), fmt(&row.metrics)).unwrap();
    }
    writeln!(s, "| Avg. | | | | {} |", fmt(&report.average)).unwrap();
    s
}

pub fn write_report(report: &ProtocolReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => to_csv(report),
        ReportFormat::Markdown => to_markdown(report),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl(records: &[CaseRecord], path: &Path) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("serializable record"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_case, PhantomParams};

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Vec<bool> {
        let mut m = vec![false; dims.iter().product()];
        for p in on {
            m[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = true;
        }
        m
    }

    #[test]
    fn dsc_examples() {
        let d = [3; 3];
        let a = mask(d, &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [1, 1, 1]]);
        let b = mask(d, &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [2, 2, 2], [2, 2, 1], [2, 1, 2]]);
        assert!((dsc(&a, &b).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(dsc(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(dsc(&[true], &[true, false]).is_err());
    }

    #[test]
    fn hd95_examples() {
        let cfg = EvalConfig::default();
        let d = [16; 3];
        let a = mask(d, &[[3, 3, 3]]);
        let b = mask(d, &[[3, 3, 8]]);
        assert_eq!(hd95(&a, &b, d, [1.0; 3], &cfg).unwrap(), 5.0);
        assert_eq!(hd95(&a, &a, d, [1.0; 3], &cfg).unwrap(), 0.0);
        let empty = vec![false; 4096];
        assert!((hd95(&empty, &a, d, [1.0; 3], &cfg).unwrap() - 25.98).abs() < 5e-3);
        assert_eq!(hd95(&empty, &empty, d, [1.0; 3], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let d = [5, 6, 7];
        let sp = [1.0, 2.0, 0.5];
        let pts = [[0, 1, 2], [4, 5, 6], [2, 0, 3]];
        let m = mask(d, &pts);
        let dt = squared_distance_transform(&m, d, sp);
        for (i, &v) in dt.iter().enumerate() {
            let c = coords(i, d, sp);
            let want = pts
                .iter()
                .map(|p| dist_sq(c, [p[0] as f64 * sp[0], p[1] as f64 * sp[1], p[2] as f64 * sp[2]]))
                .fold(f64::INFINITY, f64::min);
            assert!((v - want).abs() < 1e-12, "{i}: {v} vs {want}");
        }
    }

    #[test]
    fn percentile_conventions() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0, 0.0];
        assert_eq!(percentile(&mut v, 50.0, Interpolation::Linear), 2.0);
        assert!((percentile(&mut v, 95.0, Interpolation::Linear) - 3.8).abs() < 1e-12);
        assert_eq!(percentile(&mut v, 95.0, Interpolation::Lower), 3.0);
        assert_eq!(percentile(&mut v, 95.0, Interpolation::Higher), 4.0);
    }

    #[test]
    fn oracle_protocol_is_perfect_and_round_trips() {
        let cases: Vec<_> = (0..2)
            .map(|s| generate_case(s, [16; 3], &PhantomParams::default(), 8).unwrap())
            .collect();
        let (report, records) = evaluate_protocol(&OracleSegmenter, &cases, &EvalConfig::default()).unwrap();
        assert_eq!(report.rows.len(), 15);
        assert_eq!(records.len(), 30);
        for row in &report.rows {
            for m in row.metrics {
                assert_eq!(m, RegionMetric { dsc: 100.0, hd95: 0.0 });
            }
        }
        let csv = to_csv(&report);
        assert_eq!(csv.lines().count(), 46);
        assert_eq!(parse_csv(&csv).unwrap(), report);
    }

    #[test]
    fn markdown_glyphs_follow_column_order() {
        let rows = protocol_subsets()
            .into_iter()
            .map(|delta| ProtocolRow {
                delta,
                metrics: [RegionMetric::default(); 3],
            })
            .collect();
        let md = to_markdown(&ProtocolReport::from_rows(rows).unwrap());
        assert!(md.lines().any(|l| l.starts_with("| ○ | ○ | ○ | ● |")));
        assert!(md.lines().last().unwrap().starts_with("| Avg."));
        assert!(ReportFormat::parse("pdf").is_err());
    }

    #[test]
    fn empty_test_split_is_a_protocol_error() {
        assert!(matches!(
            evaluate_protocol(&OracleSegmenter, &[], &EvalConfig::default()),
            Err(Error::Protocol(_))
        ));
    }
}

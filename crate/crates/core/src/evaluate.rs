//! Pixel-level ROC analysis, operating points, stratified reporting, volumetry and
//! latency measurement.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UadError};
use crate::resvae::ResVae;
use crate::volume::{CaseMetadata, SegmentationMask, Slice2D, UterineFlexion, UterineVersion};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC over every distinct score (equal scores form one step), AUC by trapezoid.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(UadError::shape("roc input", &[scores.len()], &[labels.len()]));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(UadError::invalid("roc scores", format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(UadError::invalid("roc input", format!("AUC undefined with {pos} positives and {neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let p = RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold: s };
        let last = points.last().expect("seeded");
        auc += (p.fpr - last.fpr) * (p.tpr + last.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// Youden-optimal point; among equal J the one with the lowest FPR wins.
pub fn choose_threshold(c: &RocCurve) -> RocPoint {
    let mut best = c.points[0];
    for p in &c.points[1..] {
        let (j, jb) = (p.tpr - p.fpr, best.tpr - best.fpr);
        if j > jb || (j == jb && p.fpr < best.fpr) {
            best = *p;
        }
    }
    best
}

/// Keeps at most `max` points, always including both ends and the Youden point.
pub fn thin_curve(c: &RocCurve, max: usize) -> Vec<RocPoint> {
    let n = c.points.len();
    if n <= max || max < 3 {
        return c.points.clone();
    }
    let best = choose_threshold(c);
    let step = (n - 1) as f64 / (max - 2) as f64;
    let mut idx: BTreeSet<usize> = (0..max - 1).map(|k| ((k as f64 * step).round() as usize).min(n - 1)).collect();
    idx.insert(n - 1);
    let mut out: Vec<RocPoint> = idx.into_iter().map(|i| c.points[i]).collect();
    if !out.contains(&best) {
        out.push(best);
        out.sort_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.tpr.total_cmp(&b.tpr)));
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Confusion {
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.fp + self.tn + self.fn_)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stratum: String,
    pub cases: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub threshold: f64,
    /// Absent for rows that average other rows.
    pub counts: Option<Confusion>,
}

/// Pooled voxel scores with binary ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredVoxels {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredVoxels {
    pub fn extend(&mut self, other: &ScoredVoxels) {
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn confusion(&self, threshold: f64) -> Confusion {
        let mut c = Confusion::default();
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

/// Pairs a heatmap volume (x-fastest, same grid as the mask) with GT positives.
pub fn score_voxels(heatmap: &[f32], gt: &SegmentationMask, positive: &BTreeSet<u16>) -> Result<ScoredVoxels> {
    if heatmap.len() != gt.labels().len() {
        return Err(UadError::shape("heatmap vs mask", &gt.shape(), &[heatmap.len()]));
    }
    Ok(ScoredVoxels {
        scores: heatmap.iter().map(|&v| v as f64).collect(),
        labels: gt.labels().iter().map(|l| positive.contains(l)).collect(),
    })
}

fn report_at(stratum: &str, cases: usize, v: &ScoredVoxels, threshold: f64, auc: f64) -> MetricsReport {
    let c = v.confusion(threshold);
    MetricsReport {
        stratum: stratum.to_string(),
        cases,
        accuracy: c.accuracy(),
        precision: c.precision(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        auc,
        threshold,
        counts: Some(c),
    }
}

/// Metrics at a fixed threshold, with the threshold-free AUC attached.
pub fn pixel_metrics(heatmap: &[f32], gt: &SegmentationMask, pathology: &BTreeSet<u16>, threshold: f64) -> Result<MetricsReport> {
    let v = score_voxels(heatmap, gt, pathology)?;
    if v.positives() == 0 {
        return Err(UadError::invalid("pixel metrics", format!("no voxels labelled {pathology:?}")));
    }
    let auc = roc_auc(&v.scores, &v.labels)?.auc;
    Ok(report_at("pixels", 1, &v, threshold, auc))
}

/// ROC, Youden threshold and metrics for a pooled stratum.
pub fn evaluate_pooled(stratum: &str, cases: usize, v: &ScoredVoxels) -> Result<(MetricsReport, RocCurve)> {
    let curve = roc_auc(&v.scores, &v.labels)?;
    let op = choose_threshold(&curve);
    Ok((report_at(stratum, cases, v, op.threshold, curve.auc), curve))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Unweighted,
    /// Weights are the strata's case counts.
    Weighted,
}

/// Mean of the metric columns of `rows` (counts are not carried over).
pub fn average_rows(name: &str, rows: &[&MetricsReport], mode: Averaging) -> Option<MetricsReport> {
    let weights: Vec<f64> = rows.iter().map(|r| if mode == Averaging::Weighted { r.cases as f64 } else { 1.0 }).collect();
    let total: f64 = weights.iter().sum();
    if rows.is_empty() || total == 0.0 {
        return None;
    }
    let avg = |f: fn(&MetricsReport) -> f64| rows.iter().zip(&weights).map(|(r, w)| w * f(r)).sum::<f64>() / total;
    Some(MetricsReport {
        stratum: name.to_string(),
        cases: rows.iter().map(|r| r.cases).sum(),
        accuracy: avg(|r| r.accuracy),
        precision: avg(|r| r.precision),
        sensitivity: avg(|r| r.sensitivity),
        specificity: avg(|r| r.specificity),
        auc: avg(|r| r.auc),
        threshold: avg(|r| r.threshold),
        counts: None,
    })
}

/// One case ready for scoring: its heatmap volume, every annotator's mask and metadata.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub case_id: String,
    pub heatmap: Vec<f32>,
    pub masks: Vec<SegmentationMask>,
    pub metadata: CaseMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyBy {
    Pathology,
    Position,
    Annotator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Pathology name -> label ids counted as positive.
    pub pathologies: BTreeMap<String, BTreeSet<u16>>,
    /// Annotator whose masks define GT outside annotator stratification.
    pub reference_annotator: String,
    /// Annotators averaged into the "experienced mean" row.
    pub expert_annotators: Vec<String>,
    pub averaging: Averaging,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            pathologies: BTreeMap::from([
                ("disc".to_string(), BTreeSet::from([4])),
                ("diffuse".to_string(), BTreeSet::from([5])),
            ]),
            reference_annotator: "reference".into(),
            expert_annotators: Vec::new(),
            averaging: Averaging::Unweighted,
        }
    }
}

impl EvalSpec {
    pub fn all_pathology_ids(&self) -> BTreeSet<u16> {
        self.pathologies.values().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedReport {
    pub rows: Vec<MetricsReport>,
    pub curves: Vec<(String, RocCurve)>,
    pub notes: Vec<String>,
}

fn reference_mask<'a>(c: &'a EvalCase, spec: &EvalSpec) -> Option<&'a SegmentationMask> {
    c.masks.iter().find(|m| m.annotator() == spec.reference_annotator).or(c.masks.first())
}

/// Per-stratum reports (strata in sorted order) plus an overall average row.
pub fn stratify(cases: &[EvalCase], by: StratifyBy, spec: &EvalSpec) -> Result<StratifiedReport> {
    let mut pools: BTreeMap<String, (usize, ScoredVoxels)> = BTreeMap::new();
    let mut notes = Vec::new();
    let any = spec.all_pathology_ids();
    let mut add = |key: String, v: ScoredVoxels| {
        let e = pools.entry(key).or_default();
        e.0 += 1;
        e.1.extend(&v);
    };
    for c in cases {
        match by {
            StratifyBy::Pathology => {
                let Some(m) = reference_mask(c, spec) else {
                    notes.push(format!("{}: no mask, skipped", c.case_id));
                    continue;
                };
                for (name, ids) in &spec.pathologies {
                    if m.count_any(ids) > 0 {
                        add(name.clone(), score_voxels(&c.heatmap, m, ids)?);
                    }
                }
            }
            StratifyBy::Position => {
                let Some(m) = reference_mask(c, spec) else {
                    notes.push(format!("{}: no mask, skipped", c.case_id));
                    continue;
                };
                let v = score_voxels(&c.heatmap, m, &any)?;
                let mut placed = false;
                if c.metadata.uterine_version != UterineVersion::Unknown {
                    add(format!("version={}", serde_plain(&c.metadata.uterine_version)), v.clone());
                    placed = true;
                }
                if c.metadata.uterine_flexion != UterineFlexion::Unknown {
                    add(format!("flexion={}", serde_plain(&c.metadata.uterine_flexion)), v);
                    placed = true;
                }
                if !placed {
                    notes.push(format!("{}: no uterine position metadata, skipped", c.case_id));
                }
            }
            StratifyBy::Annotator => {
                for m in &c.masks {
                    add(format!("annotator={}", m.annotator()), score_voxels(&c.heatmap, m, &any)?);
                }
            }
        }
    }
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (name, (n, v)) in &pools {
        if v.positives() == 0 || v.positives() == v.labels.len() {
            notes.push(format!("{name}: single-class stratum skipped"));
            continue;
        }
        let (r, c) = evaluate_pooled(name, *n, v)?;
        rows.push(r);
        curves.push((name.clone(), c));
    }
    if by == StratifyBy::Annotator && !spec.expert_annotators.is_empty() {
        let names: BTreeSet<String> = spec.expert_annotators.iter().map(|a| format!("annotator={a}")).collect();
        let experts: Vec<&MetricsReport> = rows.iter().filter(|r| names.contains(&r.stratum)).collect();
        if let Some(r) = average_rows("experienced_mean", &experts, Averaging::Unweighted) {
            rows.push(r);
        } else {
            notes.push("no expert annotator rows to average".into());
        }
    }
    let strata: Vec<&MetricsReport> = rows.iter().filter(|r| r.counts.is_some()).collect();
    let label = match spec.averaging {
        Averaging::Unweighted => "overall_mean",
        Averaging::Weighted => "overall_weighted",
    };
    if let Some(r) = average_rows(label, &strata, spec.averaging) {
        rows.push(r);
    }
    Ok(StratifiedReport { rows, curves, notes })
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_string)).unwrap_or_default()
}

pub const METRIC_COLUMNS: [&str; 10] = ["accuracy", "precision", "sensitivity", "specificity", "auc", "threshold", "tp", "fp", "tn", "fn"];

/// Metric table: a `#` provenance line, then `stratum` plus the ten metric columns.
pub fn metrics_csv(rows: &[MetricsReport], provenance: &str) -> String {
    let mut s = format!("# {provenance}\nstratum,{}\n", METRIC_COLUMNS.join(","));
    for r in rows {
        let counts = match r.counts {
            Some(c) => format!("{},{},{},{}", c.tp, c.fp, c.tn, c.fn_),
            None => ",,,".into(),
        };
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e},{counts}",
            r.stratum, r.accuracy, r.precision, r.sensitivity, r.specificity, r.auc, r.threshold
        );
    }
    s
}

pub fn roc_points_csv(curves: &[(String, RocCurve)], max_points: usize) -> String {
    let mut s = String::from("stratum,fpr,tpr,threshold\n");
    for (name, c) in curves {
        for p in thin_curve(c, max_points) {
            let _ = writeln!(s, "{name},{:.6},{:.6},{:.6e}", p.fpr, p.tpr, p.threshold);
        }
    }
    s
}

/// ROC curves as a standalone SVG, one colour per stratum.
pub fn roc_svg(curves: &[(String, RocCurve)]) -> String {
    const COLORS: [&str; 8] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
    let (size, pad) = (400.0, 40.0);
    let map = |fpr: f64, tpr: f64| (pad + fpr * size, pad + (1.0 - tpr) * size);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect x=\"{pad}\" y=\"{pad}\" width=\"{size}\" height=\"{size}\" fill=\"white\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{b}\" y2=\"{pad}\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n\
         <text x=\"{cx}\" y=\"{lx}\" text-anchor=\"middle\">False positive rate</text>\n\
         <text x=\"12\" y=\"{cx}\" transform=\"rotate(-90 12 {cx})\" text-anchor=\"middle\">True positive rate</text>\n",
        w = size + 2.0 * pad,
        b = pad + size,
        cx = pad + size / 2.0,
        lx = size + 1.75 * pad,
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = thin_curve(c, 500).iter().map(|p| {
            let (x, y) = map(p.fpr, p.tpr);
            format!("{x:.1},{y:.1}")
        }).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name} (AUC {:.3})</text>",
            pad + size * 0.45,
            pad + size - 10.0 - 16.0 * i as f64,
            c.auc
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Lesion volume in mL (0 when the label is absent).
pub fn lesion_volume(m: &SegmentationMask, label: u16, spacing: [f32; 3]) -> f64 {
    let voxel_mm3 = spacing[0] as f64 * spacing[1] as f64 * spacing[2] as f64;
    m.count(label) as f64 * voxel_mm3 / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub ms_per_slice: f64,
    pub fps: f64,
    pub s_per_volume: f64,
    pub n_slices: usize,
    pub warmup: usize,
}

pub const REFERENCE_LATENCY_LINE: &str = "reference: 10.8 ms/slice, 92.6 FPS, 0.324 s per 30-slice volume";

impl LatencyReport {
    pub fn from_ms(ms: f64, n_slices: usize, warmup: usize) -> Self {
        Self { ms_per_slice: ms, fps: 1000.0 / ms, s_per_volume: 30.0 * ms / 1000.0, n_slices, warmup }
    }

    pub fn render(&self) -> String {
        format!(
            "ms_per_slice: {:.3}\nfps: {:.1}\ns_per_volume: {:.4}\nslices: {} (warmup {})\n{REFERENCE_LATENCY_LINE}\n",
            self.ms_per_slice, self.fps, self.s_per_volume, self.n_slices, self.warmup
        )
    }
}

/// Median single-slice reconstruction time after `warmup` discarded runs.
pub fn latency_bench(model: &ResVae<f32>, slices: &[Slice2D], n_slices: usize, warmup: usize) -> Result<LatencyReport> {
    if slices.is_empty() || n_slices == 0 {
        return Err(UadError::invalid("latency bench", "need at least one slice and n_slices >= 1"));
    }
    let pick = |i: usize| std::slice::from_ref(&slices[i % slices.len()]);
    for i in 0..warmup {
        model.reconstruct_slices(pick(i))?;
    }
    let mut times = Vec::with_capacity(n_slices);
    for i in 0..n_slices {
        let t = Instant::now();
        model.reconstruct_slices(pick(i))?;
        times.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let ms = if times.len() % 2 == 1 { times[mid] } else { (times[mid - 1] + times[mid]) / 2.0 };
    Ok(LatencyReport::from_ms(ms, n_slices, warmup))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::volume::Cohort;

    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    fn random_instance(rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
        let n = rng.random_range(2..=500);
        let levels = rng.random_range(2..50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores = (0..n).map(|i| (rng.random_range(0..levels) as f64) + if labels[i] { 3.0 } else { 0.0 }).collect();
        (scores, labels)
    }

    #[test]
    fn auc_matches_pairwise_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (s, l) = random_instance(&mut rng);
            let c = roc_auc(&s, &l).unwrap();
            assert!((c.auc - mann_whitney(&s, &l)).abs() < 1e-9);
            for w in c.points.windows(2) {
                assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }
    }

    #[test]
    fn auc_examples() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&s, &l).unwrap().auc, 1.0);
        let inv: Vec<bool> = l.iter().map(|v| !v).collect();
        assert_eq!(roc_auc(&s, &inv).unwrap().auc, 0.0);
        assert!(roc_auc(&s, &[true; 4]).is_err());
        let op = choose_threshold(&roc_auc(&s, &l).unwrap());
        assert_eq!(op.tpr - op.fpr, 1.0);
        assert!(op.threshold > 0.2 && op.threshold <= 0.8);
    }

    #[test]
    fn youden_on_symmetric_noise_and_single_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..20_000).map(|_| rng.random()).collect();
        let l: Vec<bool> = (0..20_000).map(|_| rng.random_bool(0.5)).collect();
        let c = roc_auc(&s, &l).unwrap();
        let op = choose_threshold(&c);
        assert!(op.tpr - op.fpr < 0.05);
        assert!(c.points.contains(&op));
        let single = RocCurve { points: vec![RocPoint { fpr: 0.2, tpr: 0.6, threshold: 0.5 }], auc: 0.5 };
        assert_eq!(choose_threshold(&single).threshold, 0.5);
    }

    #[test]
    fn confusion_arithmetic() {
        let c = Confusion { tp: 8, fp: 2, tn: 88, fn_: 2 };
        assert!((c.sensitivity() - 0.8).abs() < 1e-12);
        assert!((c.specificity() - 88.0 / 90.0).abs() < 1e-12);
        assert!((c.precision() - 0.8).abs() < 1e-12);
        assert!((c.accuracy() - 0.96).abs() < 1e-12);
    }

    fn names() -> BTreeMap<u16, String> {
        BTreeMap::from([(1, "uterus".to_string()), (4, "focal_lesion".to_string()), (5, "diffuse_lesion".to_string())])
    }

    fn meta(v: UterineVersion, f: UterineFlexion) -> CaseMetadata {
        CaseMetadata {
            patient_key: "p".into(),
            field_strength_tesla: None,
            uterine_version: v,
            uterine_flexion: f,
            cohort: Cohort::UnhealthyInhouse,
        }
    }

    #[test]
    fn pixel_metrics_cases() {
        let labels = vec![0, 4, 4, 0, 1, 0];
        let m = SegmentationMask::new([6, 1, 1], labels, names(), "a").unwrap();
        let perfect = [0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let r = pixel_metrics(&perfect, &m, &BTreeSet::from([4]), 0.5).unwrap();
        assert_eq!((r.accuracy, r.precision, r.sensitivity, r.specificity), (1.0, 1.0, 1.0, 1.0));
        let none = pixel_metrics(&[0.0; 6], &m, &BTreeSet::from([4]), 0.5).unwrap();
        assert_eq!((none.sensitivity, none.specificity), (0.0, 1.0));
        assert!(pixel_metrics(&perfect, &m, &BTreeSet::from([5]), 0.5).is_err());
    }

    #[test]
    fn stratification() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cases = Vec::new();
        for i in 0..4 {
            let labels: Vec<u16> = (0..64).map(|k| if k < 8 { 4 } else if k < 12 && i % 2 == 0 { 5 } else { 0 }).collect();
            let broad: Vec<u16> = (0..64).map(|k| if k < 16 { 4 } else { 0 }).collect();
            let heat: Vec<f32> = (0..64).map(|k| if k < 10 { 0.5 + rng.random::<f32>() } else { rng.random::<f32>() * 0.8 }).collect();
            let v = if i < 2 { UterineVersion::Anteverted } else { UterineVersion::Retroverted };
            cases.push(EvalCase {
                case_id: format!("c{i}"),
                heatmap: heat,
                masks: vec![
                    SegmentationMask::new([64, 1, 1], labels, names(), "reference").unwrap(),
                    SegmentationMask::new([64, 1, 1], broad, names(), "broad").unwrap(),
                ],
                metadata: meta(v, UterineFlexion::Anteflexed),
            });
        }
        let spec = EvalSpec { expert_annotators: vec!["reference".into(), "broad".into()], ..Default::default() };
        let p = stratify(&cases, StratifyBy::Pathology, &spec).unwrap();
        let names: Vec<&str> = p.rows.iter().map(|r| r.stratum.as_str()).collect();
        assert_eq!(names, vec!["diffuse", "disc", "overall_mean"]);
        assert!((p.rows[2].auc - (p.rows[0].auc + p.rows[1].auc) / 2.0).abs() < 1e-12);
        for r in &p.rows[..2] {
            let c = r.counts.unwrap();
            assert_eq!(r.sensitivity, c.sensitivity());
            assert_eq!(r.specificity, c.specificity());
        }
        let pos = stratify(&cases, StratifyBy::Position, &spec).unwrap();
        assert!(pos.rows.iter().any(|r| r.stratum == "version=retroverted"));
        assert!(pos.rows.iter().any(|r| r.stratum == "flexion=anteflexed"));
        let ann = stratify(&cases, StratifyBy::Annotator, &spec).unwrap();
        let get = |n: &str| ann.rows.iter().find(|r| r.stratum == n).unwrap();
        let (broad, reference) = (get("annotator=broad"), get("annotator=reference"));
        assert!(ann.rows.iter().any(|r| r.stratum == "experienced_mean"));
        // the broad masks contain the reference positives, so at a common threshold TP cannot drop
        let t = reference.threshold;
        let tp = |ann: &str| {
            let mut v = ScoredVoxels::default();
            for c in &cases {
                let m = c.masks.iter().find(|m| m.annotator() == ann).unwrap();
                v.extend(&score_voxels(&c.heatmap, m, &spec.all_pathology_ids()).unwrap());
            }
            v.confusion(t).tp
        };
        assert!(tp("broad") >= tp("reference"));
        assert!(broad.counts.unwrap().tp + broad.counts.unwrap().fn_ >= reference.counts.unwrap().tp + reference.counts.unwrap().fn_);
        // one annotator: the stratum equals the unstratified pooled report
        let single: Vec<EvalCase> = cases.iter().map(|c| EvalCase { masks: vec![c.masks[0].clone()], ..c.clone() }).collect();
        let s = stratify(&single, StratifyBy::Annotator, &EvalSpec::default()).unwrap();
        let mut pooled = ScoredVoxels::default();
        for c in &single {
            pooled.extend(&score_voxels(&c.heatmap, &c.masks[0], &EvalSpec::default().all_pathology_ids()).unwrap());
        }
        let (direct, _) = evaluate_pooled("annotator=reference", 4, &pooled).unwrap();
        assert_eq!(s.rows[0], direct);
    }

    #[test]
    fn weighted_average() {
        let row = |auc: f64, cases: usize| MetricsReport {
            stratum: "x".into(),
            cases,
            accuracy: 0.0,
            precision: 0.0,
            sensitivity: 0.0,
            specificity: 0.0,
            auc,
            threshold: 0.0,
            counts: None,
        };
        let (a, b) = (row(0.6, 1), row(0.9, 3));
        assert!((average_rows("m", &[&a, &b], Averaging::Unweighted).unwrap().auc - 0.75).abs() < 1e-12);
        assert!((average_rows("m", &[&a, &b], Averaging::Weighted).unwrap().auc - 0.825).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport {
            stratum: "focal_lesion".into(),
            cases: 2,
            accuracy: 0.96,
            precision: 0.8,
            sensitivity: 0.8,
            specificity: 0.9777,
            auc: 0.9,
            threshold: 0.01,
            counts: Some(Confusion { tp: 8, fp: 2, tn: 88, fn_: 2 }),
        };
        let csv = metrics_csv(&[r], "config_hash=abc");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# config_hash=abc");
        assert_eq!(lines[1], "stratum,accuracy,precision,sensitivity,specificity,auc,threshold,tp,fp,tn,fn");
        assert!(lines[2].ends_with(",8,2,88,2"));
        assert!(roc_svg(&[("a".into(), roc_auc(&[0.1, 0.9], &[false, true]).unwrap())]).contains("polyline"));
    }

    #[test]
    fn volumetry() {
        let mut labels = vec![0u16; 10_000];
        labels[..8000].iter_mut().for_each(|v| *v = 4);
        let m = SegmentationMask::new([100, 100, 1], labels, names(), "a").unwrap();
        assert!((lesion_volume(&m, 4, [0.5, 0.5, 1.0]) - 2.0).abs() < 1e-9);
        assert_eq!(lesion_volume(&m, 5, [0.5, 0.5, 1.0]), 0.0);
        assert!((lesion_volume(&m, 4, [1.0, 0.5, 1.0]) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn latency_arithmetic() {
        let r = LatencyReport::from_ms(10.8, 10, 2);
        assert!((r.fps - 92.6).abs() < 0.05);
        assert!((r.s_per_volume - 0.324).abs() < 1e-12);
        assert!((r.fps * r.ms_per_slice - 1000.0).abs() < 1e-9);
        assert!(r.render().contains(REFERENCE_LATENCY_LINE));
    }

    proptest! {
        #[test]
        fn auc_is_invariant_under_monotone_transform(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, l) = random_instance(&mut rng);
            let e: Vec<f64> = s.iter().map(|v| (v / 10.0).exp()).collect();
            prop_assert!((roc_auc(&s, &l).unwrap().auc - roc_auc(&e, &l).unwrap().auc).abs() < 1e-12);
        }

        #[test]
        fn metrics_match_counts(seed in any::<u64>(), t in 0.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, l) = random_instance(&mut rng);
            let v = ScoredVoxels { scores: s, labels: l };
            let r = report_at("x", 1, &v, t, 0.5);
            let c = r.counts.unwrap();
            let tot = (c.tp + c.fp + c.tn + c.fn_) as f64;
            prop_assert!((r.accuracy - (c.tp + c.tn) as f64 / tot).abs() < 1e-12);
            if c.tp + c.fn_ > 0 { prop_assert!((r.sensitivity - c.tp as f64 / (c.tp + c.fn_) as f64).abs() < 1e-12); }
            if c.tn + c.fp > 0 { prop_assert!((r.specificity - c.tn as f64 / (c.tn + c.fp) as f64).abs() < 1e-12); }
            if c.tp + c.fp > 0 { prop_assert!((r.precision - c.tp as f64 / (c.tp + c.fp) as f64).abs() < 1e-12); }
        }
    }
}

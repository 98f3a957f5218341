//! Accuracy reports over a dataset, optionally sweeping paragraph length.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Graph;
use crate::config::{Baseline, RunConfig};
use crate::encoders::{group_points, EncoderError, PointGrouping};
use crate::geometry::{iou3d, Box3D, GeometryError};
use crate::metrics::{beam_search, top_candidates, MetricError};
use crate::model::{Model, ModelInput, RunMode};
use crate::seeding::rng_for;
use crate::world::paragraph::sample_paragraph_with_focus;
use crate::world::{split_tags, Dataset, DenseSample, PointCloudScene, SplitTag, Vocab, WorldError};

pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset has no paragraphs to evaluate")]
    Empty,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub count: usize,
    pub hits_25: usize,
    pub hits_50: usize,
    pub acc_25: f64,
    pub acc_50: f64,
}

impl SplitScore {
    fn add(&mut self, iou: f64) {
        self.count += 1;
        self.hits_25 += (iou > THRESHOLDS[0]) as usize;
        self.hits_50 += (iou > THRESHOLDS[1]) as usize;
    }

    fn finish(&mut self) {
        let n = self.count.max(1) as f64;
        self.acc_25 = self.hits_25 as f64 / n;
        self.acc_50 = self.hits_50 as f64 / n;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    /// Paragraph length of the sweep; `None` for the stored paragraphs.
    pub k: Option<usize>,
    pub overall: SplitScore,
    pub unique: SplitScore,
    pub multiple: SplitScore,
}

impl Section {
    pub fn label(&self) -> String {
        self.k.map_or_else(|| "stored".to_string(), |k| format!("k{k}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    pub baseline: String,
    pub sections: Vec<Section>,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    /// `key = value` lines: run identity, then every section, then the
    /// config echo.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "baseline = {}", self.baseline);
        for sec in &self.sections {
            let l = sec.label();
            for (name, sc) in [("overall", &sec.overall), ("unique", &sec.unique), ("multiple", &sec.multiple)] {
                let _ = writeln!(s, "{l}.{name}.count = {}", sc.count);
                let _ = writeln!(s, "{l}.{name}.acc@0.25 = {:.6}", sc.acc_25);
                let _ = writeln!(s, "{l}.{name}.acc@0.5 = {:.6}", sc.acc_50);
            }
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn section(&self, k: Option<usize>) -> Option<&Section> {
        self.sections.iter().find(|s| s.k == k)
    }

    /// Overall accuracy against paragraph length for both thresholds, or
    /// `None` without sweep sections.
    pub fn to_svg(&self) -> Option<String> {
        let pts: Vec<(usize, f64, f64)> =
            self.sections.iter().filter_map(|s| s.k.map(|k| (k, s.overall.acc_25, s.overall.acc_50))).collect();
        if pts.is_empty() {
            return None;
        }
        let (w, h, pad) = (480.0, 320.0, 48.0);
        let kmax = pts.iter().map(|p| p.0).max().unwrap_or(1).max(2) as f64;
        let x = |k: usize| pad + (k as f64 / kmax) * (w - 2.0 * pad);
        let y = |a: f64| h - pad - a * (h - 2.0 * pad);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad);
        let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{t:.2}</text>"#, pad - 6.0, y(t) + 4.0);
        }
        for p in &pts {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x(p.0), h - pad + 16.0, p.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">sentences per paragraph</text>"#, w / 2.0, h - 8.0);
        for (acc, color, label) in [(1usize, "#1f77b4", "Acc@0.25"), (2, "#d62728", "Acc@0.5")] {
            let line: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.1},{:.1}", x(p.0), y(if acc == 1 { p.1 } else { p.2 })))
                .collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, line.join(" "));
            let ly = if acc == 1 { pad - 24.0 } else { pad - 10.0 };
            let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{label}</text>"#, w - pad - 60.0);
        }
        s.push_str("</svg>\n");
        Some(s)
    }
}

/// Same focus objects as the stored paragraphs, re-sampled at length `k`.
/// The draw depends only on the dataset seed, stream, `k` and the index.
pub fn resample_paragraphs(dataset: &Dataset, k: usize) -> Result<Vec<DenseSample>, WorldError> {
    let vocab = Vocab::builtin();
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng_for(dataset.seed, &format!("{}/sweep/{k}", dataset.stream), i as u64);
            sample_paragraph_with_focus(&dataset.scenes[s.scene], s.scene, s.focus, k, dataset.config.order_sigma, &vocab, &mut rng)
        })
        .collect()
}

/// Predicted boxes for the valid sentences of one paragraph. `index`
/// seeds any sampling done inside the forward pass.
pub fn predict(
    model: &Model,
    cfg: &RunConfig,
    scene: &PointCloudScene,
    grouping: &PointGrouping,
    sample: &DenseSample,
    use_global: bool,
    index: u64,
) -> Result<Vec<Box3D>, EvalError> {
    let sentences = sample.valid_sentences().map(|s| s.tokens.clone()).collect();
    let input = ModelInput { xyz: &scene.xyz, rgb: &scene.rgb, grouping, sentences };
    let mut rng = rng_for(cfg.seed, "eval", index);
    let mut g = Graph::new();
    match cfg.baseline {
        Baseline::None => {
            let out = model.forward(&mut g, &input, RunMode::eval(cfg.use_cqg, use_global), &mut rng)?;
            Ok(out.predictions(&g).iter().map(|b| model.room.clamp(b)).collect())
        }
        Baseline::BeamSearch => {
            let out = model.forward(&mut g, &input, RunMode::eval(cfg.use_cqg, false), &mut rng)?;
            let cands: Vec<Vec<(Box3D, f64)>> = (0..out.text.spans.len())
                .map(|k| top_candidates(&model.slot_candidates(&mut g, &out, k), cfg.beam_width))
                .collect();
            let picks = beam_search(&cands, cfg.beam_size)?;
            Ok(picks.iter().zip(&cands).map(|(&i, c)| c[i].0).collect())
        }
    }
}

fn score(
    model: &Model,
    cfg: &RunConfig,
    dataset: &Dataset,
    groupings: &[PointGrouping],
    samples: &[DenseSample],
    use_global: bool,
    k: Option<usize>,
) -> Result<Section, EvalError> {
    let tags = split_tags(&dataset.scenes, samples);
    let mut sec = Section { k, overall: SplitScore::default(), unique: SplitScore::default(), multiple: SplitScore::default() };
    let salt = k.unwrap_or(0) as u64 * 1_000_003;
    for (i, (sample, tags)) in samples.iter().zip(&tags).enumerate() {
        let scene = &dataset.scenes[sample.scene];
        let preds = predict(model, cfg, scene, &groupings[sample.scene], sample, use_global, salt + i as u64)?;
        for ((pred, sent), tag) in preds.iter().zip(sample.valid_sentences()).zip(tags) {
            let iou = iou3d(pred, &scene.objects[sent.target].bbox)?;
            sec.overall.add(iou);
            match tag {
                SplitTag::Unique => sec.unique.add(iou),
                SplitTag::Multiple => sec.multiple.add(iou),
            }
        }
    }
    if sec.overall.count == 0 {
        return Err(EvalError::Empty);
    }
    for s in [&mut sec.overall, &mut sec.unique, &mut sec.multiple] {
        s.finish();
    }
    Ok(sec)
}

/// Scores the stored paragraphs when `ks` is empty, otherwise one section
/// per requested paragraph length.
pub fn evaluate(model: &Model, cfg: &RunConfig, dataset: &Dataset, ks: &[usize], use_global: bool) -> Result<EvalReport, EvalError> {
    if dataset.samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let groupings: Vec<PointGrouping> =
        dataset.scenes.iter().map(|s| group_points(&s.xyz, model.cfg.tokens)).collect::<Result<_, _>>()?;
    let mut sections = Vec::new();
    if ks.is_empty() {
        sections.push(score(model, cfg, dataset, &groupings, &dataset.samples, use_global, None)?);
    }
    for &k in ks {
        let samples = resample_paragraphs(dataset, k)?;
        sections.push(score(model, cfg, dataset, &groupings, &samples, use_global, Some(k))?);
    }
    let kv = cfg.to_kv();
    let config = kv.keys().map(|k| (k.to_string(), kv.raw(k).unwrap_or_default().to_string())).collect();
    Ok(EvalReport { seed: cfg.seed, config_hash: cfg.hash(), baseline: cfg.baseline.to_string(), sections, config })
}

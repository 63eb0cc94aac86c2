//! Dice metrics and the experiment harnesses.
//!
//! Per-class Dice is `2 |A ∩ B| / (|A| + |B|)`. Classes empty in both the
//! prediction and the truth are skipped, and a volume's mean Dice averages the
//! remaining classes. Corpus means average per-volume means.
//!
//! The ablation experiment trains every method for every seed and scores the
//! held-out volumes. The pathology experiment scores the same checkpoints on
//! clean and lesion-injected copies of the test volumes. Reports render as
//! JSON, CSV, and aligned text.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::synth::{derive_seed, inject_pathology, stream, Corpus, PathologySpec, Split};
use crate::train::{train_comparenet, Ablation, CompareNet, TrainConfig};
use crate::volgrid::LabelVolume;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiceReport {
    /// Dice per class; `None` when the class is empty in both volumes.
    pub per_class: Vec<Option<f64>>,
    /// Mean over scored classes.
    pub mean: f64,
}

pub fn dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<DiceReport> {
    if pred.dims() != truth.dims() || pred.num_classes() != truth.num_classes() {
        return Err(Error::ShapeMismatch {
            op: "dice",
            lhs: [pred.dims().as_array().as_slice(), &[pred.num_classes()]].concat(),
            rhs: [truth.dims().as_array().as_slice(), &[truth.num_classes()]].concat(),
        });
    }
    let c = pred.num_classes();
    let (mut a, mut b, mut both) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        a[p as usize] += 1;
        b[t as usize] += 1;
        if p == t {
            both[p as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> =
        (0..c).map(|k| (a[k] + b[k] > 0).then(|| 2.0 * both[k] as f64 / (a[k] + b[k]) as f64)).collect();
    // sorted so the mean does not depend on class order
    let mut scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    scored.sort_by(f64::total_cmp);
    let mean = if scored.is_empty() { 1.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    Ok(DiceReport { per_class, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VolumeDice {
    pub id: String,
    pub dice: DiceReport,
}

/// Dice over a set of volumes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusDice {
    pub volumes: Vec<VolumeDice>,
    /// Mean of per-volume means.
    pub mean: f64,
    /// Per class, the mean over volumes where the class was scored.
    pub per_class: Vec<Option<f64>>,
}

impl CorpusDice {
    pub fn from_volumes(volumes: Vec<VolumeDice>) -> Self {
        let n = volumes.len().max(1) as f64;
        let mean = volumes.iter().map(|v| v.dice.mean).sum::<f64>() / n;
        let c = volumes.first().map_or(0, |v| v.dice.per_class.len());
        let per_class = (0..c)
            .map(|k| {
                let vals: Vec<f64> = volumes.iter().filter_map(|v| v.dice.per_class[k]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Self { volumes, mean, per_class }
    }
}

/// Segmentations and Dice of one model on a set of volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub segmentations: Vec<LabelVolume>,
    pub dice: CorpusDice,
}

/// Segments `indices` of the corpus against the atlas.
pub fn evaluate_model(model: &CompareNet, corpus: &Corpus, atlas_index: usize, indices: &[usize]) -> Result<Evaluation> {
    let atlas = corpus.subjects.get(atlas_index).ok_or_else(|| Error::Config(format!("no volume {atlas_index}")))?;
    let results: Vec<(LabelVolume, VolumeDice)> = indices
        .par_iter()
        .map(|&i| {
            let s = &corpus.subjects[i];
            let seg = model.segment(&s.image, &atlas.image, &atlas.labels)?;
            let d = dice(&seg.labels, &s.labels)?;
            Ok((seg.labels, VolumeDice { id: s.id.clone(), dice: d }))
        })
        .collect::<Result<_>>()?;
    let (segmentations, volumes): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(Evaluation { segmentations, dice: CorpusDice::from_volumes(volumes) })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    (mean, std)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mean_dice: f64,
    pub dice: CorpusDice,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: Ablation,
    pub seeds: Vec<SeedResult>,
    /// Mean over seeds of the held-out mean Dice.
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub atlas_index: usize,
    pub test_ids: Vec<String>,
    pub rows: Vec<MethodRow>,
}

/// A trained model from the ablation experiment, with its test segmentations.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub method: Ablation,
    pub seed: u64,
    pub model: CompareNet,
    pub evaluation: Evaluation,
}

/// Trains each method for each seed (on top of `base`) and evaluates on the test split.
pub fn run_ablation_experiment(
    corpus: &Corpus,
    atlas_index: usize,
    methods: &[Ablation],
    seeds: &[u64],
    base: &TrainConfig,
    on_run: &mut dyn FnMut(&TrainedRun),
) -> Result<(AblationReport, Vec<TrainedRun>)> {
    let test = corpus.indices(Split::Test);
    if test.is_empty() || methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs test volumes, methods, and seeds".into()));
    }
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &method in methods {
        let mut results = Vec::new();
        for &seed in seeds {
            let config = TrainConfig { mode: method, seed, ..base.clone() };
            let model = train_comparenet(corpus, atlas_index, &config)?.model;
            let evaluation = evaluate_model(&model, corpus, atlas_index, &test)?;
            results.push(SeedResult { seed, mean_dice: evaluation.dice.mean, dice: evaluation.dice.clone() });
            let run = TrainedRun { method, seed, model, evaluation };
            on_run(&run);
            runs.push(run);
        }
        let (mean, std) = mean_std(&results.iter().map(|r| r.mean_dice).collect::<Vec<_>>());
        rows.push(MethodRow { method, seeds: results, mean, std });
    }
    let test_ids = test.iter().map(|&i| corpus.subjects[i].id.clone()).collect();
    Ok((AblationReport { atlas_index, test_ids, rows }, runs))
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `method,seed,mean_dice,dice_class0,...` with one row per method and seed.
    pub fn to_csv(&self) -> String {
        let c = self.rows.first().and_then(|r| r.seeds.first()).map_or(0, |s| s.dice.per_class.len());
        let mut out = String::from("method,seed,mean_dice");
        for k in 0..c {
            out.push_str(&format!(",dice_class{k}"));
        }
        out.push('\n');
        for row in &self.rows {
            for s in &row.seeds {
                out.push_str(&format!("{},{},{:.17e}", row.method, s.seed, s.mean_dice));
                for v in &s.dice.per_class {
                    out.push_str(&v.map_or(",".to_string(), |v| format!(",{v:.17e}")));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("held-out mean Dice (atlas {}, {} test volumes)\n", self.atlas_index, self.test_ids.len());
        out.push_str(&format!("{:<22} {:>8} {:>8}  per seed\n", "method", "mean", "std"));
        for row in &self.rows {
            let seeds: Vec<String> = row.seeds.iter().map(|s| format!("{}:{:.4}", s.seed, s.mean_dice)).collect();
            out.push_str(&format!("{:<22} {:>8.4} {:>8.4}  {}\n", row.method.as_str(), row.mean, row.std, seeds.join(" ")));
        }
        out
    }

    pub fn row(&self, method: Ablation) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustSeed {
    pub seed: u64,
    pub clean: f64,
    pub pathological: f64,
    /// `clean - pathological`.
    pub reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustRow {
    pub method: Ablation,
    pub seeds: Vec<RobustSeed>,
    pub mean_clean: f64,
    pub mean_pathological: f64,
    pub mean_reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub pathology: PathologySpec,
    pub test_ids: Vec<String>,
    pub rows: Vec<RobustRow>,
}

/// A copy of the corpus whose test images carry pathologies. Each test volume
/// draws its lesions from `spec.seed` and its own index.
pub fn with_pathologies(corpus: &Corpus, spec: &PathologySpec) -> Result<Corpus> {
    let mut out = corpus.clone();
    for (i, s) in out.subjects.iter_mut().enumerate() {
        if s.split == Split::Test {
            let vol_spec = PathologySpec { seed: derive_seed(spec.seed, stream::PATHOLOGY, i as u64), ..spec.clone() };
            s.image = inject_pathology(&s.image, &vol_spec)?.0;
        }
    }
    Ok(out)
}

/// Scores each `(method, seed, model)` on clean and pathological test volumes.
pub fn run_pathology_experiment(
    corpus: &Corpus,
    atlas_index: usize,
    models: &[(Ablation, u64, &CompareNet)],
    spec: &PathologySpec,
) -> Result<RobustnessReport> {
    let test = corpus.indices(Split::Test);
    let sick = with_pathologies(corpus, spec)?;
    let mut rows: Vec<RobustRow> = Vec::new();
    for &(method, seed, model) in models {
        let clean = evaluate_model(model, corpus, atlas_index, &test)?.dice.mean;
        let pathological = evaluate_model(model, &sick, atlas_index, &test)?.dice.mean;
        let entry = RobustSeed { seed, clean, pathological, reduction: clean - pathological };
        match rows.iter_mut().find(|r| r.method == method) {
            Some(r) => r.seeds.push(entry),
            None => rows.push(RobustRow { method, seeds: vec![entry], mean_clean: 0.0, mean_pathological: 0.0, mean_reduction: 0.0 }),
        }
    }
    for r in &mut rows {
        let n = r.seeds.len() as f64;
        r.mean_clean = r.seeds.iter().map(|s| s.clean).sum::<f64>() / n;
        r.mean_pathological = r.seeds.iter().map(|s| s.pathological).sum::<f64>() / n;
        r.mean_reduction = r.seeds.iter().map(|s| s.reduction).sum::<f64>() / n;
    }
    let test_ids = test.iter().map(|&i| corpus.subjects[i].id.clone()).collect();
    Ok(RobustnessReport { pathology: spec.clone(), test_ids, rows })
}

impl RobustnessReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `method,seed,clean,pathological,reduction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,seed,clean,pathological,reduction\n");
        for row in &self.rows {
            for s in &row.seeds {
                out.push_str(&format!("{},{},{:.17e},{:.17e},{:.17e}\n", row.method, s.seed, s.clean, s.pathological, s.reduction));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "mean Dice with pathologies (radius {:.1}-{:.1}, delta {:.0}-{:.0}, {} per volume)\n",
            self.pathology.radius[0], self.pathology.radius[1], self.pathology.delta[0], self.pathology.delta[1], self.pathology.count
        );
        out.push_str(&format!("{:<22} {:>8} {:>8} {:>9}\n", "method", "clean", "lesion", "reduction"));
        for r in &self.rows {
            out.push_str(&format!("{:<22} {:>8.4} {:>8.4} {:>9.4}\n", r.method.as_str(), r.mean_clean, r.mean_pathological, r.mean_reduction));
        }
        out
    }

    pub fn row(&self, method: Ablation) -> Option<&RobustRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

//! Held-out evaluation, subject-level folds and cross-validated comparison.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ResRnnConfig, ResRnnParams, RwtMatrix, Variant, REGIONS};
use crate::phantom::CineSequence;
use crate::train::{self, TrainConfig};

pub const FOLDS: usize = 5;

/// Absolute errors of one subject, `F × regions`, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectErrors {
    pub subject_id: u32,
    pub errors: RwtMatrix,
}

impl SubjectErrors {
    pub fn new(subject_id: u32, pred: &RwtMatrix, target: &RwtMatrix) -> Result<Self> {
        if (pred.frames(), pred.regions()) != (target.frames(), target.regions()) {
            return Err(Error::shape("errors", "prediction and label shapes differ"));
        }
        let values = pred.values().iter().zip(target.values()).map(|(p, t)| (p - t).abs()).collect();
        Ok(SubjectErrors {
            subject_id,
            errors: RwtMatrix::new(target.frames(), target.regions(), values)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> Stat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

/// Per-region and overall MAE across subjects, plus per-frame curves.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Mean ± std over subjects of each subject's per-region MAE (normalized).
    pub regions: Vec<Stat>,
    /// Same over each subject's MAE across all frames and regions.
    pub average: Stat,
    /// `per_frame[f][l]`: MAE over subjects at frame `f` for region `l`;
    /// the extra last column averages the regions.
    pub per_frame: Vec<Vec<f64>>,
    pub image_size: usize,
    pub spacing_mm: Option<f64>,
    pub subjects: Vec<SubjectErrors>,
}

impl MetricsReport {
    pub fn from_errors(subjects: Vec<SubjectErrors>, image_size: usize, spacing_mm: Option<f64>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::InvalidArgument("no subjects to report on".into()))?;
        let (frames, regions) = (first.errors.frames(), first.errors.regions());
        if subjects
            .iter()
            .any(|s| (s.errors.frames(), s.errors.regions()) != (frames, regions))
        {
            return Err(Error::shape("report", "subjects have different label shapes"));
        }
        let region_stats = (0..regions)
            .map(|l| {
                let per_subject: Vec<f64> = subjects
                    .iter()
                    .map(|s| (0..frames).map(|f| s.errors.get(f, l)).sum::<f64>() / frames as f64)
                    .collect();
                mean_std(&per_subject)
            })
            .collect();
        let overall: Vec<f64> = subjects
            .iter()
            .map(|s| s.errors.values().iter().sum::<f64>() / (frames * regions) as f64)
            .collect();
        let per_frame = (0..frames)
            .map(|f| {
                let mut row: Vec<f64> = (0..regions)
                    .map(|l| subjects.iter().map(|s| s.errors.get(f, l)).sum::<f64>() / subjects.len() as f64)
                    .collect();
                row.push(row.iter().sum::<f64>() / regions as f64);
                row
            })
            .collect();
        Ok(MetricsReport {
            regions: region_stats,
            average: mean_std(&overall),
            per_frame,
            image_size,
            spacing_mm,
            subjects,
        })
    }

    pub fn frames(&self) -> usize {
        self.per_frame.len()
    }

    pub fn to_pixels(&self, v: f64) -> f64 {
        v * self.image_size as f64
    }

    pub fn to_mm(&self, v: f64) -> Option<f64> {
        self.spacing_mm.map(|s| self.to_pixels(v) * s)
    }

    /// MAE of `region` at zero-based `frame`, or of the region average when
    /// `region` is `None`.
    pub fn frame_mae(&self, frame: usize, region: Option<usize>) -> f64 {
        let row = &self.per_frame[frame];
        row[region.unwrap_or(row.len() - 1)]
    }

    fn region_name(l: usize) -> String {
        REGIONS.get(l).map_or_else(|| format!("R{}", l + 1), |n| format!("WT-{n}"))
    }

    /// One row per region plus `Average`: normalized, pixel and (optional)
    /// millimetre mean and std, tab separated.
    pub fn table_tsv(&self) -> String {
        let mut s = String::from("region\tmean_norm\tstd_norm\tmean_px\tstd_px");
        if self.spacing_mm.is_some() {
            s.push_str("\tmean_mm\tstd_mm");
        }
        s.push('\n');
        let rows = self
            .regions
            .iter()
            .enumerate()
            .map(|(l, st)| (Self::region_name(l), *st))
            .chain(std::iter::once(("Average".to_string(), self.average)));
        for (name, st) in rows {
            let _ = write!(
                s,
                "{name}\t{:.6}\t{:.6}\t{:.4}\t{:.4}",
                st.mean,
                st.std,
                self.to_pixels(st.mean),
                self.to_pixels(st.std)
            );
            if let (Some(m), Some(d)) = (self.to_mm(st.mean), self.to_mm(st.std)) {
                let _ = write!(s, "\t{m:.4}\t{d:.4}");
            }
            s.push('\n');
        }
        s
    }

    /// `frame` (1-based) followed by per-region and average MAE, normalized.
    pub fn per_frame_tsv(&self) -> String {
        let regions = self.regions.len();
        let mut s = String::from("frame");
        for l in 0..regions {
            let _ = write!(s, "\t{}", Self::region_name(l));
        }
        s.push_str("\tAverage\n");
        for (f, row) in self.per_frame.iter().enumerate() {
            let _ = write!(s, "{}", f + 1);
            for v in row {
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Predicts every sequence from its centre crop.
pub fn predict(params: &ResRnnParams, data: &[CineSequence], cfg: &ResRnnConfig) -> Result<Vec<RwtMatrix>> {
    train::check_compatible(data, cfg)?;
    data.par_iter()
        .map(|s| model::forward(params, &train::center_stack(s, cfg.input_size)?, cfg))
        .collect()
}

pub fn evaluate(
    params: &ResRnnParams,
    data: &[CineSequence],
    cfg: &ResRnnConfig,
    spacing_mm: Option<f64>,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let preds = predict(params, data, cfg)?;
    let errors = data
        .iter()
        .zip(&preds)
        .map(|(s, p)| SubjectErrors::new(s.subject_id, p, &s.labels))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_errors(errors, data[0].image_size(), spacing_mm)
}

/// Test and training subject ids of one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

/// Shuffles subject ids and deals them round-robin into five folds.
pub fn five_fold(data: &[CineSequence], seed: u64) -> Result<Vec<FoldSplit>> {
    let ids: Vec<u32> = data.iter().map(|s| s.subject_id).collect();
    k_fold(&ids, FOLDS, seed)
}

pub fn k_fold(ids: &[u32], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 || ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{k}-fold cross-validation needs at least {k} subjects, got {}",
            ids.len()
        )));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("duplicate subject ids".into()));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|fold| {
            let (mut test, mut train) = (Vec::new(), Vec::new());
            for (i, &id) in shuffled.iter().enumerate() {
                if i % k == fold { test.push(id) } else { train.push(id) }
            }
            test.sort_unstable();
            train.sort_unstable();
            FoldSplit { fold, train, test }
        })
        .collect())
}

fn select(data: &[CineSequence], ids: &[u32]) -> Vec<CineSequence> {
    data.iter().filter(|s| ids.contains(&s.subject_id)).cloned().collect()
}

/// Result of cross-validating one model configuration.
#[derive(Clone, Debug)]
pub struct CvResult {
    pub config: ResRnnConfig,
    pub report: MetricsReport,
    /// One loss curve per fold.
    pub loss_curves: Vec<Vec<(usize, f64)>>,
}

impl CvResult {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }
}

/// Trains and evaluates every configuration on every fold of `splits`.
///
/// All (configuration, fold) runs are independent and run concurrently. A
/// fold's training seed is `train_cfg.seed + fold`, shared by every
/// configuration, so variants start from the same initial weights.
pub fn run_cv(
    data: &[CineSequence],
    splits: &[FoldSplit],
    cfgs: &[ResRnnConfig],
    train_cfg: &TrainConfig,
    spacing_mm: Option<f64>,
) -> Result<Vec<CvResult>> {
    if data.is_empty() || cfgs.is_empty() || splits.is_empty() {
        return Err(Error::InvalidArgument("cross-validation needs data, configs and folds".into()));
    }
    let jobs: Vec<(usize, &FoldSplit)> = (0..cfgs.len()).flat_map(|c| splits.iter().map(move |s| (c, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(c, split)| {
            let cfg = &cfgs[c];
            let tc = TrainConfig {
                seed: train_cfg.seed.wrapping_add(split.fold as u64),
                ..train_cfg.clone()
            };
            log::info!("{} fold {}: training on {} subjects", cfg.variant, split.fold, split.train.len());
            let outcome = train::train(&select(data, &split.train), cfg, &tc, None)?;
            let report = evaluate(&outcome.params, &select(data, &split.test), cfg, spacing_mm)?;
            log::info!(
                "{} fold {}: held-out MAE {:.5}",
                cfg.variant,
                split.fold,
                report.average.mean
            );
            Ok((c, report.subjects, outcome.loss_curve))
        })
        .collect::<Result<Vec<_>>>()?;
    let size = data[0].image_size();
    cfgs.iter()
        .enumerate()
        .map(|(c, cfg)| {
            let mut errors = Vec::new();
            let mut curves = Vec::new();
            for (rc, errs, curve) in runs.iter().filter(|r| r.0 == c) {
                debug_assert_eq!(*rc, c);
                errors.extend(errs.iter().cloned());
                curves.push(curve.clone());
            }
            errors.sort_by_key(|e| e.subject_id);
            Ok(CvResult {
                config: cfg.clone(),
                report: MetricsReport::from_errors(errors, size, spacing_mm)?,
                loss_curves: curves,
            })
        })
        .collect()
}

/// Side-by-side comparison: one column per result, one row per region plus
/// `Average`, cells `mean±std` in pixels (or mm when a spacing is set).
pub fn comparison_tsv(results: &[CvResult]) -> String {
    let Some(first) = results.first() else {
        return String::new();
    };
    let unit = if first.report.spacing_mm.is_some() { "mm" } else { "px" };
    let mut s = format!("region ({unit})");
    for r in results {
        let _ = write!(s, "\t{}", r.variant().label());
    }
    s.push('\n');
    let cell = |rep: &MetricsReport, st: Stat| {
        let conv = |v: f64| rep.to_mm(v).unwrap_or_else(|| rep.to_pixels(v));
        format!("{:.4}±{:.4}", conv(st.mean), conv(st.std))
    };
    let regions = first.report.regions.len();
    for l in 0..=regions {
        let name = if l == regions {
            "Average".to_string()
        } else {
            MetricsReport::region_name(l)
        };
        s.push_str(&name);
        for r in results {
            let st = if l == regions { r.report.average } else { r.report.regions[l] };
            let _ = write!(s, "\t{}", cell(&r.report, st));
        }
        s.push('\n');
    }
    s
}

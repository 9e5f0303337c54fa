//! Optimization loop, configuration, and the loss ablation runner.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{make_batches, Dataset, Splits, Utterance, MIN_BATCH};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, geometry_score, GeometryScore, MetricsBundle};
use crate::losses::{
    mae_loss, pair_label, suparc_loss, total_loss, triplet_modalities_loss, LossConfig,
};
use crate::model::{encode_batch, masked_fuse, predict, EncoderConfig, FusionModel, ModalityMask};
use crate::optim::{clip_global_norm, global_norm, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub loss: LossConfig,
    /// Recurrent width per direction.
    pub hidden: usize,
    pub rep_dim: usize,
    pub text_embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 12,
            batch_size: 32,
            seed: 42,
            weight_decay: 0.01,
            grad_clip_norm: 5.0,
            loss: LossConfig::default(),
            hidden: 32,
            rep_dim: 32,
            text_embed_dim: 32,
        }
    }
}

/// Flat key-value settings as they appear in a config file or on the
/// command line. Unset keys leave the underlying value alone.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub weight_decay: Option<f64>,
    pub grad_clip_norm: Option<f64>,
    pub tau: Option<f64>,
    pub margin_m: Option<f64>,
    #[serde(rename = "threshold_TH")]
    pub threshold_th: Option<f64>,
    pub m_tri: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub hidden: Option<usize>,
    pub rep_dim: Option<usize>,
    pub text_embed_dim: Option<usize>,
}

impl ConfigOverrides {
    /// Parses a flat TOML document (`key = value` lines).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        fn set<T: Copy>(dst: &mut T, src: Option<T>) {
            if let Some(v) = src {
                *dst = v;
            }
        }
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.weight_decay, self.weight_decay);
        set(&mut cfg.grad_clip_norm, self.grad_clip_norm);
        set(&mut cfg.loss.tau, self.tau);
        set(&mut cfg.loss.margin_m, self.margin_m);
        set(&mut cfg.loss.threshold_th, self.threshold_th);
        set(&mut cfg.loss.m_tri, self.m_tri);
        set(&mut cfg.loss.alpha, self.alpha);
        set(&mut cfg.loss.beta, self.beta);
        set(&mut cfg.hidden, self.hidden);
        set(&mut cfg.rep_dim, self.rep_dim);
        set(&mut cfg.text_embed_dim, self.text_embed_dim);
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        ConfigOverrides::from_toml_str(text)?.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved settings as a flat TOML document.
    pub fn to_toml_string(&self) -> String {
        let l = &self.loss;
        format!(
            "lr = {:?}\nepochs = {}\nbatch_size = {}\nseed = {}\nweight_decay = {:?}\ngrad_clip_norm = {:?}\n\
             tau = {:?}\nmargin_m = {:?}\nthreshold_TH = {:?}\nm_tri = {:?}\nalpha = {:?}\nbeta = {:?}\n\
             hidden = {}\nrep_dim = {}\ntext_embed_dim = {}\n",
            self.lr,
            self.epochs,
            self.batch_size,
            self.seed,
            self.weight_decay,
            self.grad_clip_norm,
            l.tau,
            l.margin_m,
            l.threshold_th,
            l.m_tri,
            l.alpha,
            l.beta,
            self.hidden,
            self.rep_dim,
            self.text_embed_dim
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < MIN_BATCH {
            return Err(Error::Config(format!(
                "batch_size {} is too small: contrastive losses need at least {MIN_BATCH} samples per batch to form pairs",
                self.batch_size
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be > 0".into()));
        }
        if self.hidden == 0 || self.rep_dim == 0 || self.text_embed_dim == 0 {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        self.loss.validate()
    }

    /// Encoder configuration: input widths from the dataset, model widths from `self`.
    pub fn encoder_for(&self, dataset: &Dataset) -> Result<EncoderConfig> {
        EncoderConfig {
            hidden: self.hidden,
            rep_dim: self.rep_dim,
            text_embed_dim: self.text_embed_dim,
            ..EncoderConfig::default()
        }
        .for_dataset(dataset)
    }
}

// ----- single step -----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub main: f64,
    /// `None` when α = 0 or no anchor had an in-batch positive.
    pub suparc: Option<f64>,
    /// `None` when β = 0.
    pub tri: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: StepLosses,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub applied_norm: f64,
}

fn finite(tape: &Tape, v: Var, component: &'static str) -> Result<f64> {
    let x = tape.value(v).item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { component })
    }
}

/// Builds the full objective for one batch on a fresh tape.
///
/// The six masked fusions are only built when β > 0, and pair labeling and
/// SupArc only when α > 0.
pub fn batch_objective(
    tape: &mut Tape,
    model: &FusionModel,
    bound: &crate::model::Params<Var>,
    batch: &[&Utterance],
    loss: &LossConfig,
) -> Result<(Var, StepLosses)> {
    let y: Vec<f64> = batch.iter().map(|u| u.y).collect();
    let enc = encode_batch(tape, bound, &model.config, batch)?;
    let fused = masked_fuse(tape, bound, &enc, ModalityMask::NONE)?;
    let pred = predict(tape, bound, fused)?;
    let main = mae_loss(tape, pred, &y)?;
    let main_value = finite(tape, main, "main")?;

    let suparc = if loss.alpha > 0.0 {
        let pairs = pair_label(&y, loss.threshold_th)?;
        match suparc_loss(tape, fused, &pairs, loss.tau, loss.margin_m) {
            Ok(v) => Some(v),
            Err(Error::EmptyPositive) => {
                log::debug!(
                    "batch of {} has no positive pair; SupArc term skipped",
                    batch.len()
                );
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let suparc_value = suparc.map(|v| finite(tape, v, "suparc")).transpose()?;

    let tri = if loss.beta > 0.0 {
        let singles = ModalityMask::singles().map(|m| masked_fuse(tape, bound, &enc, m));
        let doubles = ModalityMask::doubles().map(|m| masked_fuse(tape, bound, &enc, m));
        let [s0, s1, s2] = singles;
        let [d0, d1, d2] = doubles;
        Some(triplet_modalities_loss(
            tape,
            fused,
            &[s0?, s1?, s2?],
            &[d0?, d1?, d2?],
            loss.m_tri,
        )?)
    } else {
        None
    };
    let tri_value = tri.map(|v| finite(tape, v, "tri")).transpose()?;

    let total = total_loss(tape, main, suparc, tri, loss.alpha, loss.beta)?;
    let total_value = finite(tape, total, "total")?;
    Ok((
        total,
        StepLosses {
            main: main_value,
            suparc: suparc_value,
            tri: tri_value,
            total: total_value,
        },
    ))
}

/// Gradients of the batch objective, one flat vector per parameter in
/// [`crate::model::Params`] order.
pub fn batch_gradients(
    model: &FusionModel,
    batch: &[&Utterance],
    loss: &LossConfig,
) -> Result<(StepLosses, Vec<Vec<f64>>)> {
    if batch.len() < MIN_BATCH {
        return Err(Error::Config(format!(
            "a training batch needs at least {MIN_BATCH} samples to form contrastive pairs"
        )));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (total, losses) = batch_objective(&mut tape, model, &bound, batch, loss)?;
    tape.backward(total)?;
    let mut grads = Vec::new();
    bound.for_each(|_, &v| grads.push(tape.grad_tensor(v).into_data()));
    Ok((losses, grads))
}

/// Forward, backward, global-norm clipping, and one optimizer update.
pub fn train_step(
    model: &mut FusionModel,
    batch: &[&Utterance],
    config: &TrainConfig,
    opt: &mut AdamW,
) -> Result<StepReport> {
    let (losses, mut grads) = batch_gradients(model, batch, &config.loss)?;
    let grad_norm = clip_global_norm(&mut grads, config.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            component: "gradient",
        });
    }
    let applied_norm = global_norm(&grads);
    opt.step(&mut model.params, &grads);
    Ok(StepReport {
        losses,
        grad_norm,
        applied_norm,
    })
}

// ----- fit -----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub main: f64,
    pub suparc: f64,
    pub tri: f64,
    pub total: f64,
    /// Steps whose SupArc term was skipped for lack of a positive pair.
    pub skipped_contrastive: usize,
    pub valid: MetricsBundle,
    /// Not written to run logs, which must be reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters with the lowest validation MAE seen after any epoch.
    pub best: FusionModel,
    pub best_epoch: usize,
    pub reports: Vec<EpochReport>,
    /// Validation metrics of the model as passed in, before any update.
    pub initial_valid: MetricsBundle,
}

pub fn evaluate(model: &FusionModel, dataset: &Dataset) -> Result<MetricsBundle> {
    let out = model.infer_dataset(dataset, ModalityMask::NONE)?;
    compute_metrics(&out.predictions, &dataset.labels())
}

pub fn fit(model: FusionModel, splits: &Splits, config: &TrainConfig) -> Result<FitOutcome> {
    fit_with(model, splits, config, |_| Ok(()))
}

/// [`fit`] with a callback after every epoch, e.g. to append a run log.
pub fn fit_with(
    mut model: FusionModel,
    splits: &Splits,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<FitOutcome> {
    config.validate()?;
    let initial_valid = evaluate(&model, &splits.valid)?;
    let mut best = model.clone();
    let mut best_mae = initial_valid.mae;
    let mut best_epoch = 0;
    let mut opt = AdamW::new(&model.params, config.lr, config.weight_decay);
    let mut reports = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let batches = make_batches(splits.train.len(), config.batch_size, config.seed, epoch)?;
        let (mut main, mut suparc, mut tri, mut total) = (0.0, 0.0, 0.0, 0.0);
        let (mut n_suparc, mut n_tri, mut skipped) = (0usize, 0usize, 0usize);
        for (step, idx) in batches.iter().enumerate() {
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &splits.train.utterances[i]).collect();
            let report = train_step(&mut model, &batch, config, &mut opt).inspect_err(|e| {
                log::error!("epoch {epoch}, step {}: {e}", step + 1);
            })?;
            let l = report.losses;
            main += l.main;
            total += l.total;
            match l.suparc {
                Some(v) => {
                    suparc += v;
                    n_suparc += 1;
                }
                None if config.loss.alpha > 0.0 => skipped += 1,
                None => {}
            }
            if let Some(v) = l.tri {
                tri += v;
                n_tri += 1;
            }
        }
        let steps = batches.len();
        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        let valid = evaluate(&model, &splits.valid)?;
        if valid.mae < best_mae {
            best_mae = valid.mae;
            best = model.clone();
            best_epoch = epoch;
        }
        let report = EpochReport {
            epoch,
            steps,
            main: mean(main, steps),
            suparc: mean(suparc, n_suparc),
            tri: mean(tri, n_tri),
            total: mean(total, steps),
            skipped_contrastive: skipped,
            valid,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: total {:.4} main {:.4} valid MAE {:.4}",
            report.total,
            report.main,
            report.valid.mae
        );
        on_epoch(&report)?;
        reports.push(report);
    }
    Ok(FitOutcome {
        best,
        best_epoch,
        reports,
        initial_valid,
    })
}

// ----- ablation -----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Full,
    NoSuparc,
    NoTri,
    Neither,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoSuparc,
        AblationVariant::NoTri,
        AblationVariant::Neither,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoSuparc => "no-suparc",
            AblationVariant::NoTri => "no-tri",
            AblationVariant::Neither => "neither",
        }
    }

    /// The base config with the removed objectives' weights set to zero.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if matches!(self, AblationVariant::NoSuparc | AblationVariant::Neither) {
            cfg.loss.alpha = 0.0;
        }
        if matches!(self, AblationVariant::NoTri | AblationVariant::Neither) {
            cfg.loss.beta = 0.0;
        }
        cfg
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub alpha: f64,
    pub beta: f64,
    pub best_epoch: usize,
    pub test: MetricsBundle,
    pub geometry: GeometryScore,
    #[serde(skip)]
    pub reports: Vec<EpochReport>,
    #[serde(skip)]
    pub model: Option<FusionModel>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Trains one model per [`AblationVariant`] from the same seed and scores
/// each best checkpoint on the test split. Runs execute on separate threads
/// with no shared state.
pub fn ablate(base: &TrainConfig, splits: &Splits) -> Result<AblationTable> {
    base.validate()?;
    let encoder = base.encoder_for(&splits.train)?;
    let results: Vec<Result<AblationRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = AblationVariant::ALL
            .into_iter()
            .map(|variant| {
                let encoder = &encoder;
                scope.spawn(move || run_variant(variant, base, encoder, splits))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    Ok(AblationTable {
        rows: results.into_iter().collect::<Result<_>>()?,
    })
}

fn run_variant(
    variant: AblationVariant,
    base: &TrainConfig,
    encoder: &EncoderConfig,
    splits: &Splits,
) -> Result<AblationRow> {
    let cfg = variant.apply(base);
    let model = FusionModel::init(encoder, cfg.seed)?;
    let outcome = fit(model, splits, &cfg)?;
    let test = evaluate(&outcome.best, &splits.test)?;
    let fused = outcome
        .best
        .infer_dataset(&splits.test, ModalityMask::NONE)?
        .fused;
    let geometry = geometry_score(&fused, &splits.test.labels())?;
    Ok(AblationRow {
        variant,
        alpha: cfg.loss.alpha,
        beta: cfg.loss.beta,
        best_epoch: outcome.best_epoch,
        test,
        geometry,
        reports: outcome.reports,
        model: Some(outcome.best),
    })
}

impl AblationTable {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Aligned text rendering: MAE, Corr, Acc-7, Acc-2 and F1 as
    /// `non-neg/pos` percentages, and the geometry score.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>7} {:>7} {:>13} {:>13} {:>9}",
            "model", "MAE", "Corr", "Acc-7", "Acc-2", "F1", "Geometry"
        );
        for r in &self.rows {
            let m = &r.test;
            let _ = writeln!(
                out,
                "{:<10} {:>7.3} {:>7.3} {:>7.2} {:>13} {:>13} {:>9.4}",
                r.variant.name(),
                m.mae,
                m.corr,
                100.0 * m.acc7,
                format!("{:.2}/{:.2}", 100.0 * m.acc2_nonneg, 100.0 * m.acc2_pos),
                format!("{:.2}/{:.2}", 100.0 * m.f1_nonneg, 100.0 * m.f1_pos),
                r.geometry.score
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides_defaults() {
        let cfg =
            TrainConfig::from_toml_str("lr = 0.001\nthreshold_TH = 0.25\nbeta = 0.0\n").unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.loss.threshold_th, 0.25);
        assert_eq!(cfg.loss.beta, 0.0);
        assert_eq!(cfg.epochs, 12);
        assert_eq!(cfg.loss.alpha, 0.1);
    }

    #[test]
    fn config_rejects_unknown_keys_and_small_batches() {
        assert!(matches!(
            TrainConfig::from_toml_str("learning_rate = 1.0"),
            Err(Error::Config(_))
        ));
        let err = TrainConfig::from_toml_str("batch_size = 1").unwrap_err();
        assert!(err.to_string().contains("pairs"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = TrainConfig {
            lr: 3e-4,
            seed: 7,
            ..TrainConfig::default()
        };
        assert_eq!(
            TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(),
            cfg
        );
    }

    #[test]
    fn ablation_variants_zero_weights() {
        let base = TrainConfig::default();
        let w = |v: AblationVariant| {
            let c = v.apply(&base);
            (c.loss.alpha, c.loss.beta)
        };
        assert_eq!(w(AblationVariant::Full), (0.1, 0.1));
        assert_eq!(w(AblationVariant::NoSuparc), (0.0, 0.1));
        assert_eq!(w(AblationVariant::NoTri), (0.1, 0.0));
        assert_eq!(w(AblationVariant::Neither), (0.0, 0.0));
    }
}

//! Adversarial alignment of source and target embeddings.
//!
//! Two domain classifiers (users and items) learn to tell target
//! representations from source ones while the latent factors of both
//! domains descend their prediction losses and ascend the classifier losses.
//! Side features sit in the classifier input but never receive updates.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cf::{clamp_prob, prediction_gradients, sigmoid};
use crate::data::{AdaptationConfig, CfModel, DomainClassifier, EntityKind, InteractionSet};
use crate::error::{check_dim, Error, Result};
use crate::evaluation::{evaluate, normalize_ks, MetricsReport, SELECTION_K};
use crate::optimizer::{adam_step, sgd_combined_step, sgd_step, AdamState};
use crate::textio::{push_sized_matrix, read_file, write_file, TokenReader};

struct Forward {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the ReLU output
    /// feeding layer `l`.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DMatrix<f64>>,
    logits: DVector<f64>,
}

fn forward(clf: &DomainClassifier, x: &DMatrix<f64>) -> Result<Forward> {
    check_dim("classifier input width", clf.input_dim(), x.ncols())?;
    crate::data::check_finite("classifier input", x)?;
    let mut inputs = vec![x.clone()];
    let mut pre = Vec::with_capacity(DomainClassifier::NUM_LAYERS - 1);
    for l in 0..DomainClassifier::NUM_LAYERS - 1 {
        let z = affine(&inputs[l], &clf.layer_weights[l], &clf.layer_biases[l]);
        inputs.push(z.map(|v| v.max(0.0)));
        pre.push(z);
    }
    let last = DomainClassifier::NUM_LAYERS - 1;
    let out = affine(
        &inputs[last],
        &clf.layer_weights[last],
        &clf.layer_biases[last],
    );
    Ok(Forward {
        inputs,
        pre,
        logits: out.column(0).into_owned(),
    })
}

fn affine(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut z = x * w;
    for mut row in z.row_iter_mut() {
        row += b.transpose();
    }
    z
}

/// `d̂ = c(x)`: probability that `x` is a target-domain representation.
pub fn classifier_forward(clf: &DomainClassifier, x: &[f64]) -> Result<f64> {
    let x = DMatrix::from_row_slice(1, x.len(), x);
    Ok(sigmoid(forward(clf, &x)?.logits[0]))
}

/// `d̂` for every row of `x`.
pub fn classifier_forward_batch(clf: &DomainClassifier, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(forward(clf, x)?.logits.map(sigmoid))
}

fn stack(target: &DMatrix<f64>, source: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("classifier batch widths", target.ncols(), source.ncols())?;
    if target.nrows() + source.nrows() == 0 {
        return Err(Error::invalid("classifier batches are both empty"));
    }
    let mut x = DMatrix::zeros(target.nrows() + source.nrows(), target.ncols());
    x.rows_mut(0, target.nrows()).copy_from(target);
    x.rows_mut(target.nrows(), source.nrows()).copy_from(source);
    Ok(x)
}

/// `-Σ_target log d̂ - Σ_source log(1 - d̂)` with clamped logs.
pub fn classifier_loss(
    clf: &DomainClassifier,
    target: &DMatrix<f64>,
    source: &DMatrix<f64>,
) -> Result<f64> {
    let x = stack(target, source)?;
    let logits = forward(clf, &x)?.logits;
    Ok(loss_from_logits(&logits, target.nrows()))
}

fn loss_from_logits(logits: &DVector<f64>, num_target: usize) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(r, &z)| {
            if r < num_target {
                -clamp_prob(sigmoid(z)).ln()
            } else {
                -clamp_prob(sigmoid(-z)).ln()
            }
        })
        .sum()
}

/// Gradients of [`classifier_loss`] with respect to every classifier
/// parameter and every input row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGradients {
    pub loss: f64,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub target_inputs: DMatrix<f64>,
    pub source_inputs: DMatrix<f64>,
}

pub fn classifier_gradients(
    clf: &DomainClassifier,
    target: &DMatrix<f64>,
    source: &DMatrix<f64>,
) -> Result<ClassifierGradients> {
    let x = stack(target, source)?;
    let nt = target.nrows();
    let fwd = forward(clf, &x)?;
    let loss = loss_from_logits(&fwd.logits, nt);

    let layers = DomainClassifier::NUM_LAYERS;
    let mut weights = vec![DMatrix::zeros(0, 0); layers];
    let mut biases = vec![DVector::zeros(0); layers];
    // dL/dz at the output is d̂ - d; the clamp is ignored here so that a
    // saturated classifier still passes a signal back to the embeddings.
    let mut delta = DMatrix::from_fn(x.nrows(), 1, |r, _| {
        let label = if r < nt { 1.0 } else { 0.0 };
        sigmoid(fwd.logits[r]) - label
    });
    for l in (0..layers).rev() {
        weights[l] = fwd.inputs[l].transpose() * &delta;
        biases[l] = delta.row_sum().transpose();
        let mut upstream = &delta * clf.layer_weights[l].transpose();
        if l > 0 {
            upstream.zip_apply(&fwd.pre[l - 1], |g, z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
        }
        delta = upstream;
    }
    Ok(ClassifierGradients {
        loss,
        weights,
        biases,
        target_inputs: delta.rows(0, nt).into_owned(),
        source_inputs: delta.rows(nt, x.nrows() - nt).into_owned(),
    })
}

/// Plain gradient step on every classifier parameter.
pub fn classifier_sgd_step(
    clf: &mut DomainClassifier,
    grads: &ClassifierGradients,
    eta: f64,
) -> Result<()> {
    for (w, g) in clf.layer_weights.iter_mut().zip(&grads.weights) {
        *w = sgd_step(w, g, eta)?;
    }
    for (b, g) in clf.layer_biases.iter_mut().zip(&grads.biases) {
        check_dim("bias gradient length", b.len(), g.len())?;
        b.zip_apply(g, |p, g| *p -= eta * g);
    }
    Ok(())
}

fn classifier_is_finite(clf: &DomainClassifier) -> bool {
    clf.layer_weights
        .iter()
        .all(|w| w.iter().all(|v| v.is_finite()))
        && clf
            .layer_biases
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
}

/// Losses of one adaptation epoch, all measured before its updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub source_loss: f64,
    pub target_loss: f64,
    pub user_classifier_loss: f64,
    pub item_classifier_loss: f64,
}

/// Everything the adaptation loop mutates.
///
/// Negative sampling and classifier mini-batching draw from separate
/// streams, so switching the adversarial terms on or off never shifts the
/// negatives the prediction losses see. The sampling stream is seeded with
/// `config.seed` exactly like a standalone [`crate::cf::sgd_epoch`] run.
#[derive(Debug, Clone)]
pub struct AdapterState {
    pub source_model: CfModel,
    pub target_model: CfModel,
    pub user_classifier: DomainClassifier,
    pub item_classifier: DomainClassifier,
    pub config: AdaptationConfig,
    pub epoch: usize,
    sampling_rng: ChaCha8Rng,
    classifier_rng: ChaCha8Rng,
}

const CLASSIFIER_INIT_STREAM: u64 = 0x5eed_c1a5_0000_0001;
const CLASSIFIER_BATCH_STREAM: u64 = 0x5eed_c1a5_0000_0002;

impl AdapterState {
    /// Pairs two pre-trained models with freshly initialized classifiers.
    pub fn new(
        source_model: CfModel,
        target_model: CfModel,
        config: AdaptationConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_dim(
            "side dim (target vs source)",
            source_model.side_dim(),
            target_model.side_dim(),
        )?;
        check_dim(
            "latent dim (target vs source)",
            source_model.latent_dim(),
            target_model.latent_dim(),
        )?;
        if source_model.variant() != target_model.variant() {
            return Err(Error::invalid(format!(
                "source model is {} but target model is {}",
                source_model.variant(),
                target_model.variant()
            )));
        }
        let input = source_model.dims().total();
        let mut init = ChaCha8Rng::seed_from_u64(config.seed ^ CLASSIFIER_INIT_STREAM);
        let user_classifier =
            DomainClassifier::random(input, config.classifier_hidden, EntityKind::User, &mut init);
        let item_classifier =
            DomainClassifier::random(input, config.classifier_hidden, EntityKind::Item, &mut init);
        Self::with_classifiers(
            source_model,
            target_model,
            user_classifier,
            item_classifier,
            config,
        )
    }

    pub fn with_classifiers(
        source_model: CfModel,
        target_model: CfModel,
        user_classifier: DomainClassifier,
        item_classifier: DomainClassifier,
        config: AdaptationConfig,
    ) -> Result<Self> {
        config.validate()?;
        let input = source_model.dims().total();
        check_dim(
            "target representation width",
            input,
            target_model.dims().total(),
        )?;
        for clf in [&user_classifier, &item_classifier] {
            check_dim("classifier input width", input, clf.input_dim())?;
        }
        if user_classifier.target_kind() != EntityKind::User
            || item_classifier.target_kind() != EntityKind::Item
        {
            return Err(Error::invalid("classifier kinds must be (user, item)"));
        }
        Ok(AdapterState {
            source_model,
            target_model,
            user_classifier,
            item_classifier,
            sampling_rng: ChaCha8Rng::seed_from_u64(config.seed),
            classifier_rng: ChaCha8Rng::seed_from_u64(config.seed ^ CLASSIFIER_BATCH_STREAM),
            config,
            epoch: 0,
        })
    }

    pub fn classifier(&self, kind: EntityKind) -> &DomainClassifier {
        match kind {
            EntityKind::User => &self.user_classifier,
            EntityKind::Item => &self.item_classifier,
        }
    }

    /// Writes both CF checkpoints and both classifiers into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::cf::CfCheckpoint::from_model(&self.source_model)
            .save(&dir.join("source.cfmodel"))?;
        crate::cf::CfCheckpoint::from_model(&self.target_model)
            .save(&dir.join("target.cfmodel"))?;
        save_classifier(&dir.join("user_classifier.txt"), &self.user_classifier)?;
        save_classifier(&dir.join("item_classifier.txt"), &self.item_classifier)
    }
}

/// Latent-slice gradients of one classifier loss for both domains.
struct AdversarialGradients {
    loss: f64,
    target: DMatrix<f64>,
    source: DMatrix<f64>,
    classifier: ClassifierGradients,
}

fn adversarial_gradients(
    clf: &DomainClassifier,
    target_model: &CfModel,
    source_model: &CfModel,
    kind: EntityKind,
    batch_limit: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialGradients> {
    let target_all = target_model.representations(kind);
    let source_all = source_model.representations(kind);
    let (nt, ns) = (target_all.nrows(), source_all.nrows());

    // Rows of the union that take part in this epoch's loss.
    let (target_rows, source_rows): (Vec<usize>, Vec<usize>) = if nt + ns > batch_limit {
        let mut picked = index::sample(rng, nt + ns, batch_limit).into_vec();
        picked.sort_unstable();
        let split = picked.partition_point(|&r| r < nt);
        let source = picked[split..].iter().map(|r| r - nt).collect();
        picked.truncate(split);
        (picked, source)
    } else {
        ((0..nt).collect(), (0..ns).collect())
    };
    let target = target_all.select_rows(&target_rows);
    let source = source_all.select_rows(&source_rows);
    let grads = classifier_gradients(clf, &target, &source)?;

    let side = target_model.side_dim();
    let latent = target_model.latent_dim();
    let scatter = |rows: &[usize], input_grads: &DMatrix<f64>, total: usize| {
        let mut out = DMatrix::zeros(total, latent);
        for (j, &r) in rows.iter().enumerate() {
            out.row_mut(r)
                .copy_from(&input_grads.view((j, side), (1, latent)));
        }
        out
    };
    Ok(AdversarialGradients {
        loss: grads.loss,
        target: scatter(&target_rows, &grads.target_inputs, nt),
        source: scatter(&source_rows, &grads.source_inputs, ns),
        classifier: grads,
    })
}

fn diverged(epoch: usize, tensor: &str) -> Error {
    Error::Diverged {
        epoch,
        tensor: tensor.to_string(),
    }
}

/// One full-batch pass of the six update rules.
///
/// All gradients are taken at the embeddings and classifier parameters as
/// they were at the start of the epoch; then the four latent matrices take
/// the combined descent/ascent step and both classifiers take a descent step.
pub fn adaptation_epoch(
    state: &mut AdapterState,
    source_train: &InteractionSet,
    target_train: &InteractionSet,
) -> Result<EpochStats> {
    let cfg = state.config.clone();
    let epoch = state.epoch;

    let (source_loss, gs) = prediction_gradients(
        &state.source_model,
        source_train,
        cfg.negatives_per_positive,
        cfg.lambda_source,
        &mut state.sampling_rng,
    )?;
    let (target_loss, gt) = prediction_gradients(
        &state.target_model,
        target_train,
        0,
        cfg.lambda_target,
        &mut state.sampling_rng,
    )?;

    let users = adversarial_gradients(
        &state.user_classifier,
        &state.target_model,
        &state.source_model,
        EntityKind::User,
        cfg.classifier_batch_limit,
        &mut state.classifier_rng,
    )?;
    let items = adversarial_gradients(
        &state.item_classifier,
        &state.target_model,
        &state.source_model,
        EntityKind::Item,
        cfg.classifier_batch_limit,
        &mut state.classifier_rng,
    )?;

    let eta_minus = cfg.eta_adversarial;
    let s = &mut state.source_model;
    s.user_latent = sgd_combined_step(
        &s.user_latent,
        &gs.user,
        &users.source,
        cfg.eta_source,
        eta_minus,
    )?;
    s.item_latent = sgd_combined_step(
        &s.item_latent,
        &gs.item,
        &items.source,
        cfg.eta_source,
        eta_minus,
    )?;
    let t = &mut state.target_model;
    t.user_latent = sgd_combined_step(
        &t.user_latent,
        &gt.user,
        &users.target,
        cfg.eta_target,
        eta_minus,
    )?;
    t.item_latent = sgd_combined_step(
        &t.item_latent,
        &gt.item,
        &items.target,
        cfg.eta_target,
        eta_minus,
    )?;
    classifier_sgd_step(
        &mut state.user_classifier,
        &users.classifier,
        cfg.eta_classifier,
    )?;
    classifier_sgd_step(
        &mut state.item_classifier,
        &items.classifier,
        cfg.eta_classifier,
    )?;

    if let Some(tensor) = state.source_model.non_finite_tensor() {
        return Err(diverged(epoch, &format!("source {tensor}")));
    }
    if let Some(tensor) = state.target_model.non_finite_tensor() {
        return Err(diverged(epoch, &format!("target {tensor}")));
    }
    if !classifier_is_finite(&state.user_classifier) {
        return Err(diverged(epoch, "user classifier"));
    }
    if !classifier_is_finite(&state.item_classifier) {
        return Err(diverged(epoch, "item classifier"));
    }
    state.epoch += 1;
    Ok(EpochStats {
        source_loss,
        target_loss,
        user_classifier_loss: users.loss,
        item_classifier_loss: items.loss,
    })
}

/// Interaction data of one adaptation run.
#[derive(Debug, Clone, Copy)]
pub struct AdaptationData<'a> {
    pub source_train: &'a InteractionSet,
    pub target_train: &'a InteractionSet,
    pub target_validation: &'a InteractionSet,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub stats: EpochStats,
    pub validation_f1: f64,
}

/// Result of [`train_fdar`].
#[derive(Debug, Clone)]
pub struct FdarOutcome {
    /// State at the epoch with the best validation F1@10; epoch 0 is the
    /// untouched pre-trained pair.
    pub best: AdapterState,
    pub best_epoch: usize,
    pub validation_report: MetricsReport,
    /// State after the last epoch.
    pub last: AdapterState,
    pub history: Vec<EpochRecord>,
}

/// Runs `config.epochs` adaptation epochs and keeps the state with the best
/// target validation F1@10. Earlier epochs win ties.
pub fn train_fdar(
    state: AdapterState,
    data: AdaptationData<'_>,
    ks: &[usize],
) -> Result<FdarOutcome> {
    let mut ks = ks.to_vec();
    ks.push(SELECTION_K);
    let ks = normalize_ks(&ks)?;
    let validate = |s: &AdapterState| {
        evaluate(
            &s.target_model,
            data.target_validation,
            data.target_train,
            &ks,
        )
    };

    let mut current = state;
    let mut best_report = validate(&current)?;
    let mut best = current.clone();
    let mut best_f1 = best_report
        .f1(SELECTION_K)
        .expect("selection cutoff present");
    let mut history = Vec::with_capacity(current.config.epochs);
    for _ in 0..current.config.epochs {
        let stats = adaptation_epoch(&mut current, data.source_train, data.target_train)?;
        let report = validate(&current)?;
        let f1 = report.f1(SELECTION_K).expect("selection cutoff present");
        log::debug!(
            "adapt epoch {}: Ls {:.4} Lt {:.4} Lu {:.4} Li {:.4} val F1@{SELECTION_K} {f1:.5}",
            current.epoch,
            stats.source_loss,
            stats.target_loss,
            stats.user_classifier_loss,
            stats.item_classifier_loss
        );
        history.push(EpochRecord {
            stats,
            validation_f1: f1,
        });
        if f1 > best_f1 {
            best_f1 = f1;
            best = current.clone();
            best_report = report;
        }
    }
    Ok(FdarOutcome {
        last: current,
        best_epoch: best.epoch,
        best,
        validation_report: best_report,
        history,
    })
}

/// Settings of the post-hoc domain probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Fraction of each domain used for training; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            epochs: 300,
            learning_rate: 0.01,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Trains a fresh domain classifier to separate `target` rows from `source`
/// rows and returns its held-out accuracy.
///
/// Both domains are split separately so the held-out set keeps the class
/// balance. Inputs are standardized with statistics pooled over the
/// training rows of both domains.
pub fn probe_domain_accuracy(
    source: &DMatrix<f64>,
    target: &DMatrix<f64>,
    config: &ProbeConfig,
) -> Result<f64> {
    check_dim("probe input widths", source.ncols(), target.ncols())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut split = |m: &DMatrix<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mut rows: Vec<usize> = (0..m.nrows()).collect();
        rows.shuffle(&mut rng);
        let n_train = (m.nrows() as f64 * config.train_fraction).round() as usize;
        if n_train == 0 || n_train == m.nrows() {
            return Err(Error::invalid(
                "probe needs rows on both sides of the split",
            ));
        }
        Ok((
            m.select_rows(&rows[..n_train]),
            m.select_rows(&rows[n_train..]),
        ))
    };
    let (s_train, s_test) = split(source)?;
    let (t_train, t_test) = split(target)?;

    let pooled = stack(&t_train, &s_train)?;
    let n = pooled.nrows() as f64;
    let mean = pooled.row_mean();
    let std = DMatrix::from_fn(1, pooled.ncols(), |_, c| {
        let var = pooled
            .column(c)
            .iter()
            .map(|v| (v - mean[c]).powi(2))
            .sum::<f64>()
            / n;
        if var > 1e-24 {
            var.sqrt()
        } else {
            1.0
        }
    });
    let standardize = |m: &DMatrix<f64>| {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
            (m[(r, c)] - mean[c]) / std[(0, c)]
        })
    };
    let (s_train, s_test, t_train, t_test) = (
        standardize(&s_train),
        standardize(&s_test),
        standardize(&t_train),
        standardize(&t_test),
    );

    let mut clf =
        DomainClassifier::random(source.ncols(), config.hidden, EntityKind::User, &mut rng);
    let mut w_state: Vec<AdamState> = clf
        .layer_weights
        .iter()
        .map(|w| AdamState::like(w, config.learning_rate))
        .collect();
    let mut b_state: Vec<AdamState> = clf
        .layer_biases
        .iter()
        .map(|b| AdamState::new(b.len(), 1, config.learning_rate))
        .collect();
    for _ in 0..config.epochs {
        let g = classifier_gradients(&clf, &t_train, &s_train)?;
        for l in 0..DomainClassifier::NUM_LAYERS {
            adam_step(
                &mut w_state[l],
                &mut clf.layer_weights[l],
                &(&g.weights[l] / n),
            )?;
            let len = g.biases[l].len();
            let mut b = DMatrix::from_column_slice(len, 1, clf.layer_biases[l].as_slice());
            let gb = DMatrix::from_column_slice(len, 1, g.biases[l].as_slice()) / n;
            adam_step(&mut b_state[l], &mut b, &gb)?;
            clf.layer_biases[l] = b.column(0).into_owned();
        }
    }
    let t_hat = classifier_forward_batch(&clf, &t_test)?;
    let s_hat = classifier_forward_batch(&clf, &s_test)?;
    let correct =
        t_hat.iter().filter(|&&d| d > 0.5).count() + s_hat.iter().filter(|&&d| d <= 0.5).count();
    Ok(correct as f64 / (t_hat.len() + s_hat.len()) as f64)
}

/// Text format: `classifier 1`, `kind <user|item> layers 4`, then each
/// weight matrix and each bias (as a `1 x n` row) with a size header.
pub fn classifier_to_text(clf: &DomainClassifier) -> String {
    let mut out = format!(
        "classifier 1\nkind {} layers {}\n",
        clf.target_kind().name(),
        DomainClassifier::NUM_LAYERS
    );
    for (w, b) in clf.layer_weights.iter().zip(&clf.layer_biases) {
        push_sized_matrix(&mut out, w);
        push_sized_matrix(&mut out, &DMatrix::from_row_slice(1, b.len(), b.as_slice()));
    }
    out
}

pub fn classifier_from_text(source_name: &str, text: &str) -> Result<DomainClassifier> {
    let mut r = TokenReader::new(source_name, text);
    r.expect_word("classifier")?;
    r.expect_word("1")?;
    r.expect_word("kind")?;
    let kind = match r.expect_string("classifier kind")? {
        "user" => EntityKind::User,
        "item" => EntityKind::Item,
        other => return Err(r.error(2, format!("unknown classifier kind `{other}`"))),
    };
    r.expect_word("layers")?;
    r.expect_word(&DomainClassifier::NUM_LAYERS.to_string())?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for _ in 0..DomainClassifier::NUM_LAYERS {
        weights.push(r.read_sized_matrix()?);
        let b = r.read_sized_matrix()?;
        if b.nrows() != 1 {
            return Err(r.error(0, "bias must be a single row"));
        }
        biases.push(DVector::from_iterator(b.ncols(), b.iter().copied()));
    }
    r.expect_end()?;
    DomainClassifier::from_parts(weights, biases, kind)
}

pub fn save_classifier(path: &Path, clf: &DomainClassifier) -> Result<()> {
    write_file(path, &classifier_to_text(clf))
}

pub fn load_classifier(path: &Path) -> Result<DomainClassifier> {
    classifier_from_text(&path.display().to_string(), &read_file(path)?)
}

//! Single-domain collaborative filtering.
//!
//! A prediction is `sigmoid(<[side_u, latent_u], [side_i, latent_i]>)`; the
//! loss is binary cross-entropy over observed positives and sampled
//! negatives plus a Frobenius penalty on the latent factors. Side features
//! are fixed, so gradients only ever flow into the latent matrices.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CfModel, InteractionSet, SideFeatures, Variant};
use crate::error::{check_dim, check_index, Error, Result};
use crate::ingestion::sample_negatives;
use crate::optimizer::{adam_step, sgd_step, AdamState};
use crate::textio::{push_sized_matrix, read_file, write_file, TokenReader};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Predicted interaction probability, clamped away from 0 and 1.
pub fn predict(model: &CfModel, user: usize, item: usize) -> Result<f64> {
    check_index("user", user, model.num_users())?;
    check_index("item", item, model.num_items())?;
    Ok(clamp_prob(sigmoid(model.score(user, item))))
}

/// Latent-factor gradients of the CF loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CfGradients {
    pub user: DMatrix<f64>,
    pub item: DMatrix<f64>,
}

fn check_pairs(model: &CfModel, pairs: &[(usize, usize)]) -> Result<()> {
    for &(u, i) in pairs {
        check_index("user", u, model.num_users())?;
        check_index("item", i, model.num_items())?;
    }
    Ok(())
}

/// Loss and gradients in one pass; `(R̂ - R)` times the partner's latent row
/// per pair plus `2λ` times each latent matrix.
pub(crate) fn loss_and_gradients(
    model: &CfModel,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    lambda: f64,
) -> Result<(f64, CfGradients)> {
    check_pairs(model, positives)?;
    check_pairs(model, negatives)?;
    let mut gu = &model.user_latent * (2.0 * lambda);
    let mut gv = &model.item_latent * (2.0 * lambda);
    let mut loss = lambda * (model.user_latent.norm_squared() + model.item_latent.norm_squared());
    let labelled = positives
        .iter()
        .map(|&p| (p, 1.0))
        .chain(negatives.iter().map(|&p| (p, 0.0)));
    for ((u, i), label) in labelled {
        let s = model.score(u, i);
        let p = sigmoid(s);
        loss -= if label == 1.0 {
            clamp_prob(p).ln()
        } else {
            clamp_prob(sigmoid(-s)).ln()
        };
        let err = p - label;
        if err != 0.0 {
            let vi = model.item_latent.row(i).clone_owned();
            let uu = model.user_latent.row(u).clone_owned();
            let mut row = gu.row_mut(u);
            row += vi * err;
            let mut row = gv.row_mut(i);
            row += uu * err;
        }
    }
    Ok((loss, CfGradients { user: gu, item: gv }))
}

/// `-Σ_pos log R̂ - Σ_neg log(1 - R̂) + λ(‖U_lf‖² + ‖V_lf‖²)`.
pub fn cf_loss(
    model: &CfModel,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    lambda: f64,
) -> Result<f64> {
    check_pairs(model, positives)?;
    check_pairs(model, negatives)?;
    let mut loss = lambda * (model.user_latent.norm_squared() + model.item_latent.norm_squared());
    for &(u, i) in positives {
        loss -= clamp_prob(sigmoid(model.score(u, i))).ln();
    }
    for &(u, i) in negatives {
        loss -= clamp_prob(sigmoid(-model.score(u, i))).ln();
    }
    Ok(loss)
}

/// Analytic gradients of [`cf_loss`] with respect to the latent factors.
pub fn cf_gradients(
    model: &CfModel,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    lambda: f64,
) -> Result<CfGradients> {
    Ok(loss_and_gradients(model, positives, negatives, lambda)?.1)
}

/// All positives of `train` and `ratio` sampled negatives per positive,
/// drawn per user in index order.
pub fn training_pairs<R: Rng + ?Sized>(
    train: &InteractionSet,
    ratio: usize,
    rng: &mut R,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let positives: Vec<_> = train.pairs().collect();
    let mut negatives = Vec::with_capacity(positives.len() * ratio);
    if ratio > 0 {
        for u in 0..train.num_users() {
            let wanted = train.items_of(u).len() * ratio;
            if wanted > 0 {
                negatives.extend(
                    sample_negatives(train, u, wanted, rng)?
                        .into_iter()
                        .map(|i| (u, i)),
                );
            }
        }
    }
    Ok((positives, negatives))
}

/// Hyperparameters of single-domain CF training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfConfig {
    /// K2.
    pub latent_dim: usize,
    /// Adam step size.
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub batch_size: usize,
    /// Latent factors start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            latent_dim: 128,
            learning_rate: 0.2,
            lambda: 0.005,
            epochs: 50,
            negatives_per_positive: 1,
            batch_size: 1024,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::invalid("init_scale must be nonnegative"));
        }
        Ok(())
    }
}

/// A trained model plus its loss after every epoch.
///
/// The logged loss is the full objective on all positives and one fixed
/// draw of negatives, so it is not disturbed by the per-epoch resampling.
#[derive(Debug, Clone)]
pub struct CfTraining {
    pub model: CfModel,
    pub epoch_losses: Vec<f64>,
}

const MONITOR_STREAM: u64 = 0x5eed_cf00_0000_0001;

/// Trains latent factors with Adam on mini-batches of positives and freshly
/// sampled negatives.
///
/// Each mini-batch carries its share `λ·|batch|/|epoch|` of the penalty, so
/// the batch losses of an epoch add up to the full-data loss.
pub fn train_cf(
    train: &InteractionSet,
    variant: Variant,
    side: Option<SideFeatures>,
    config: &CfConfig,
) -> Result<CfTraining> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = CfModel::random(
        train.num_users(),
        train.num_items(),
        config.latent_dim,
        side,
        variant,
        config.init_scale,
        &mut rng,
    )?;
    let mut adam_u = AdamState::like(&model.user_latent, config.learning_rate);
    let mut adam_v = AdamState::like(&model.item_latent, config.learning_rate);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut monitor_rng = ChaCha8Rng::seed_from_u64(config.seed ^ MONITOR_STREAM);
    let (monitor_pos, monitor_neg) =
        training_pairs(train, config.negatives_per_positive, &mut monitor_rng)?;

    for epoch in 0..config.epochs {
        let (positives, negatives) =
            training_pairs(train, config.negatives_per_positive, &mut rng)?;
        let mut pairs: Vec<((usize, usize), bool)> = positives
            .into_iter()
            .map(|p| (p, true))
            .chain(negatives.into_iter().map(|p| (p, false)))
            .collect();
        pairs.shuffle(&mut rng);
        let total = pairs.len().max(1) as f64;

        let batches: Vec<&[((usize, usize), bool)]> = if pairs.is_empty() {
            vec![&[]]
        } else {
            pairs.chunks(config.batch_size).collect()
        };
        for batch in batches {
            let (pos, neg): (Vec<_>, Vec<_>) = batch.iter().partition(|(_, label)| *label);
            let pos: Vec<_> = pos.into_iter().map(|(p, _)| p).collect();
            let neg: Vec<_> = neg.into_iter().map(|(p, _)| p).collect();
            let lambda = config.lambda * batch.len().max(1) as f64 / total;
            let (loss, grads) = loss_and_gradients(&model, &pos, &neg, lambda)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    tensor: "cf loss".into(),
                });
            }
            adam_step(&mut adam_u, &mut model.user_latent, &grads.user).map_err(|_| {
                Error::Diverged {
                    epoch,
                    tensor: "user_latent gradient".into(),
                }
            })?;
            adam_step(&mut adam_v, &mut model.item_latent, &grads.item).map_err(|_| {
                Error::Diverged {
                    epoch,
                    tensor: "item_latent gradient".into(),
                }
            })?;
        }
        if let Some(tensor) = model.non_finite_tensor() {
            return Err(Error::Diverged {
                epoch,
                tensor: tensor.into(),
            });
        }
        let epoch_loss = cf_loss(&model, &monitor_pos, &monitor_neg, config.lambda)?;
        log::debug!("cf epoch {epoch}: loss {epoch_loss:.6}");
        epoch_losses.push(epoch_loss);
    }
    Ok(CfTraining {
        model,
        epoch_losses,
    })
}

/// Full-batch prediction-loss gradients for one domain.
///
/// `negatives_per_positive = 0` gives positive-only supervision.
pub fn prediction_gradients<R: Rng + ?Sized>(
    model: &CfModel,
    train: &InteractionSet,
    negatives_per_positive: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<(f64, CfGradients)> {
    check_dim("model users", train.num_users(), model.num_users())?;
    check_dim("model items", train.num_items(), model.num_items())?;
    let (positives, negatives) = training_pairs(train, negatives_per_positive, rng)?;
    loss_and_gradients(model, &positives, &negatives, lambda)
}

/// One plain gradient-descent step on the full prediction loss.
pub fn sgd_epoch<R: Rng + ?Sized>(
    model: &mut CfModel,
    train: &InteractionSet,
    eta: f64,
    negatives_per_positive: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<f64> {
    let (loss, grads) = prediction_gradients(model, train, negatives_per_positive, lambda, rng)?;
    model.user_latent = sgd_step(&model.user_latent, &grads.user, eta)?;
    model.item_latent = sgd_step(&model.item_latent, &grads.item, eta)?;
    Ok(loss)
}

/// Latent factors and header of a saved model; side features are supplied
/// again on load.
#[derive(Debug, Clone, PartialEq)]
pub struct CfCheckpoint {
    pub variant: Variant,
    pub side_dim: usize,
    pub user_latent: DMatrix<f64>,
    pub item_latent: DMatrix<f64>,
}

impl CfCheckpoint {
    pub fn from_model(model: &CfModel) -> Self {
        CfCheckpoint {
            variant: model.variant(),
            side_dim: model.side_dim(),
            user_latent: model.user_latent.clone(),
            item_latent: model.item_latent.clone(),
        }
    }

    pub fn into_model(self, side: Option<SideFeatures>) -> Result<CfModel> {
        check_dim(
            "checkpoint side dim",
            self.side_dim,
            side.as_ref().map_or(0, SideFeatures::dim),
        )?;
        CfModel::new(self.user_latent, self.item_latent, side, self.variant)
    }

    /// `cfmodel 1` magic, a header line, then both latent matrices in the
    /// feature-matrix format.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "cfmodel 1\nusers {} items {} k1 {} k2 {} variant {}\n",
            self.user_latent.nrows(),
            self.item_latent.nrows(),
            self.side_dim,
            self.user_latent.ncols(),
            self.variant
        );
        push_sized_matrix(&mut out, &self.user_latent);
        push_sized_matrix(&mut out, &self.item_latent);
        out
    }

    pub fn from_text(source_name: &str, text: &str) -> Result<Self> {
        let mut r = TokenReader::new(source_name, text);
        r.expect_word("cfmodel")?;
        r.expect_word("1")?;
        r.expect_word("users")?;
        let users = r.expect_usize("user count")?;
        r.expect_word("items")?;
        let items = r.expect_usize("item count")?;
        r.expect_word("k1")?;
        let side_dim = r.expect_usize("k1")?;
        r.expect_word("k2")?;
        let k2 = r.expect_usize("k2")?;
        r.expect_word("variant")?;
        let variant: Variant = r.expect_string("variant")?.parse()?;
        let user_latent = r.read_sized_matrix()?;
        let item_latent = r.read_sized_matrix()?;
        r.expect_end()?;
        if user_latent.shape() != (users, k2) || item_latent.shape() != (items, k2) {
            return Err(Error::Parse {
                source_name: r.source_name().to_string(),
                line: 2,
                message: "latent matrix shapes disagree with the header".into(),
            });
        }
        Ok(CfCheckpoint {
            variant,
            side_dim,
            user_latent,
            item_latent,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&path.display().to_string(), &read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, FeatureKind, FeatureMatrix};

    fn plain(u: &[f64], v: &[f64], k: usize) -> CfModel {
        CfModel::new(
            DMatrix::from_row_slice(u.len() / k, k, u),
            DMatrix::from_row_slice(v.len() / k, k, v),
            None,
            Variant::PlainMf,
        )
        .unwrap()
    }

    fn with_side(u: &[f64], v: &[f64], su: &[f64], si: &[f64], k2: usize, k1: usize) -> CfModel {
        let side = SideFeatures::new(
            FeatureMatrix::new(
                DMatrix::from_row_slice(su.len() / k1, k1, su),
                FeatureKind::Textual,
            )
            .unwrap(),
            FeatureMatrix::new(
                DMatrix::from_row_slice(si.len() / k1, k1, si),
                FeatureKind::Textual,
            )
            .unwrap(),
        )
        .unwrap();
        CfModel::new(
            DMatrix::from_row_slice(u.len() / k2, k2, u),
            DMatrix::from_row_slice(v.len() / k2, k2, v),
            Some(side),
            Variant::Tcf,
        )
        .unwrap()
    }

    #[test]
    fn predict_examples() {
        let zero = plain(&[0.0, 0.0], &[0.0, 0.0], 2);
        assert_eq!(predict(&zero, 0, 0).unwrap(), 0.5);

        let m = plain(&[1.0, 0.0], &[1.0, 0.0], 2);
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((predict(&m, 0, 0).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 0.731059).abs() < 1e-6);

        // Side dot product -x cancels latent dot product +x.
        let cancel = with_side(&[2.0], &[1.5], &[1.0, -1.0], &[-1.5, 1.5], 1, 2);
        assert_eq!(predict(&cancel, 0, 0).unwrap(), 0.5);

        assert!(matches!(
            predict(&m, 1, 0),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(predict(&m, 0, 1).is_err());
    }

    #[test]
    fn predict_is_clamped() {
        let huge = plain(&[100.0], &[100.0], 1);
        assert_eq!(predict(&huge, 0, 0).unwrap(), 1.0 - PROB_CLAMP);
        let tiny = plain(&[100.0], &[-100.0], 1);
        assert_eq!(predict(&tiny, 0, 0).unwrap(), PROB_CLAMP);
    }

    #[test]
    fn loss_examples() {
        let zero = plain(&[0.0], &[0.0], 1);
        let l = cf_loss(&zero, &[(0, 0)], &[], 0.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        let reg = plain(&[1.0], &[2.0], 1);
        assert_eq!(cf_loss(&reg, &[], &[], 1.0).unwrap(), 5.0);
    }

    #[test]
    fn loss_matches_hand_evaluated_sum() {
        // One user, two items, fixed latents; item 0 positive, item 1 negative.
        let m = plain(&[0.5, -1.0], &[1.0, 0.2, -0.4, 0.8], 2);
        let lambda = 0.1;
        let s0: f64 = 0.5 * 1.0 + -1.0 * 0.2;
        let s1: f64 = 0.5 * -0.4 + -1.0 * 0.8;
        let p0 = 1.0 / (1.0 + (-s0).exp());
        let p1 = 1.0 / (1.0 + (-s1).exp());
        let reg = 0.25 + 1.0 + 1.0 + 0.04 + 0.16 + 0.64;
        let oracle = -p0.ln() - (1.0 - p1).ln() + lambda * reg;
        let got = cf_loss(&m, &[(0, 0)], &[(0, 1)], lambda).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn loss_invariant_under_batch_permutation() {
        let m = plain(&[0.3, -0.2, 0.9, 0.1, -0.5, 0.4], &[0.2, 0.7, -0.3, 0.5], 2);
        let pos = [(0, 0), (1, 1), (2, 0)];
        let neg = [(0, 1), (2, 1)];
        let a = cf_loss(&m, &pos, &neg, 0.01).unwrap();
        let b = cf_loss(&m, &[(2, 0), (0, 0), (1, 1)], &[(2, 1), (0, 1)], 0.01).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn gradient_examples() {
        let zero = plain(&[0.0], &[0.0], 1);
        let g = cf_gradients(&zero, &[(0, 0)], &[], 0.0).unwrap();
        assert_eq!(g.user[(0, 0)], 0.0);
        assert_eq!(g.item[(0, 0)], 0.0);

        let m = plain(&[0.3, -0.7], &[1.5, 0.25], 2);
        let g = cf_gradients(&m, &[], &[], 0.5).unwrap();
        assert_eq!(g.user, &m.user_latent * 1.0);
        assert_eq!(g.item, &m.item_latent * 1.0);
    }

    #[test]
    fn side_features_get_no_gradient_but_shape_the_error() {
        let m = with_side(&[0.0], &[0.0], &[2.0], &[3.0], 1, 1);
        // Latents are zero, so the latent gradient is zero even though the
        // side features make the prediction confident.
        let g = cf_gradients(&m, &[(0, 0)], &[], 0.0).unwrap();
        assert_eq!((g.user[(0, 0)], g.item[(0, 0)]), (0.0, 0.0));

        let m = with_side(&[1.0], &[1.0], &[2.0], &[3.0], 1, 1);
        let g = cf_gradients(&m, &[(0, 0)], &[], 0.0).unwrap();
        let err = sigmoid(7.0) - 1.0;
        assert!((g.user[(0, 0)] - err).abs() < 1e-15);
    }

    #[test]
    fn regularizer_only_descent_shrinks_norm() {
        let mut m = plain(&[1.0, -2.0, 0.5, 3.0], &[0.5, 0.5], 2);
        let mut last = m.user_latent.norm();
        for _ in 0..20 {
            let g = cf_gradients(&m, &[], &[], 0.1).unwrap();
            m.user_latent = sgd_step(&m.user_latent, &g.user, 0.5).unwrap();
            let now = m.user_latent.norm();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn separable_toy_learns_preference() {
        let train = InteractionSet::new(1, 2, [(0, 0)], Domain::Source).unwrap();
        let config = CfConfig {
            latent_dim: 4,
            learning_rate: 0.05,
            epochs: 100,
            lambda: 0.001,
            ..Default::default()
        };
        let out = train_cf(&train, Variant::PlainMf, None, &config).unwrap();
        assert!(predict(&out.model, 0, 0).unwrap() > predict(&out.model, 0, 1).unwrap());
        assert!(out.epoch_losses.last().unwrap() <= out.epoch_losses.first().unwrap());
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let pairs: Vec<_> = (0..40).map(|k| (k % 8, (k * 7) % 11)).collect();
        let (train, _) = InteractionSet::from_pairs_dedup(8, 11, pairs, Domain::Source).unwrap();
        let config = CfConfig {
            latent_dim: 3,
            learning_rate: 0.05,
            epochs: 5,
            batch_size: 7,
            seed: 9,
            ..Default::default()
        };
        let a = train_cf(&train, Variant::PlainMf, None, &config).unwrap();
        let b = train_cf(&train, Variant::PlainMf, None, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        let c = train_cf(
            &train,
            Variant::PlainMf,
            None,
            &CfConfig { seed: 10, ..config },
        )
        .unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn divergence_is_reported() {
        let train = InteractionSet::new(1, 2, [(0, 0)], Domain::Source).unwrap();
        let bad = CfConfig {
            learning_rate: f64::NAN,
            ..Default::default()
        };
        assert!(train_cf(&train, Variant::PlainMf, None, &bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = with_side(
            &[0.1, 0.2, 0.3, 0.4],
            &[-0.5, 0.25],
            &[1.0, 2.0],
            &[3.0],
            2,
            1,
        );
        let ck = CfCheckpoint::from_model(&m);
        let text = ck.to_text();
        assert!(text.starts_with("cfmodel 1\nusers 2 items 1 k1 1 k2 2 variant tcf\n"));
        let back = CfCheckpoint::from_text("ck", &text).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.into_model(m.side().cloned()).unwrap();
        assert_eq!(rebuilt, m);

        assert!(CfCheckpoint::from_text("ck", "cfmodel 1\nusers 2").is_err());
        let corrupted = text.replace("users 2", "users 3");
        assert!(CfCheckpoint::from_text("ck", &corrupted).is_err());
        assert!(ck.into_model(None).is_err());
    }
}

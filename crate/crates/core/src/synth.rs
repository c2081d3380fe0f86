//! Synthetic paired-domain data with known structure.
//!
//! Every user and item draws three independent taste vectors: a textual
//! one, a visual one and a purely collaborative one. The true preference
//! logit is the sum of the three dot products. Textual features of users
//! and items and visual features of items are noisy linear images of the
//! matching taste vectors under mixing matrices shared by both domains, so
//! features are domain-invariant anchors. The collaborative vectors of the
//! target domain are shifted, and the target is sparser.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Domain, FeatureKind, FeatureMatrix, InteractionSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub source_users: usize,
    pub source_items: usize,
    pub target_users: usize,
    pub target_items: usize,
    /// Width of each raw modality feature file.
    pub feature_dim: usize,
    /// Rank of the textual and of the visual taste vectors.
    pub modality_rank: usize,
    /// Rank of the collaborative taste vectors.
    pub latent_rank: usize,
    /// Standard deviation of every taste coordinate.
    pub taste_scale: f64,
    /// Standard deviation of the additive feature noise.
    pub feature_noise: f64,
    /// Mean offset added to every target collaborative coordinate.
    pub target_shift: f64,
    /// Average positives per user.
    pub source_per_user: usize,
    pub target_per_user: usize,
    /// Softmax temperature of the item choice.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            source_users: 500,
            source_items: 300,
            target_users: 500,
            target_items: 300,
            feature_dim: 8,
            modality_rank: 3,
            latent_rank: 3,
            taste_scale: 0.8,
            feature_noise: 0.1,
            target_shift: 1.0,
            source_per_user: 20,
            target_per_user: 6,
            temperature: 0.5,
            seed: 0,
        }
    }
}

/// One generated domain.
#[derive(Debug, Clone)]
pub struct SynthDomain {
    pub interactions: InteractionSet,
    pub user_textual: FeatureMatrix,
    pub item_textual: FeatureMatrix,
    pub item_visual: FeatureMatrix,
}

#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub source: SynthDomain,
    pub target: SynthDomain,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// `dim x rank` matrix with orthonormal columns.
fn mixing(dim: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(dim, rank, 1.0, rng).qr().q()
}

struct Tastes {
    textual: DMatrix<f64>,
    visual: DMatrix<f64>,
    latent: DMatrix<f64>,
}

fn tastes(n: usize, config: &SynthConfig, shift: f64, rng: &mut ChaCha8Rng) -> Tastes {
    Tastes {
        textual: gaussian(n, config.modality_rank, config.taste_scale, rng),
        visual: gaussian(n, config.modality_rank, config.taste_scale, rng),
        latent: gaussian(n, config.latent_rank, config.taste_scale, rng).add_scalar(shift),
    }
}

fn features(
    taste: &DMatrix<f64>,
    mix: &DMatrix<f64>,
    noise: f64,
    kind: FeatureKind,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMatrix> {
    let clean = taste * mix.transpose();
    let noisy = &clean + gaussian(clean.nrows(), clean.ncols(), noise, rng);
    FeatureMatrix::new(noisy, kind)
}

fn domain(
    users: usize,
    items: usize,
    per_user: usize,
    domain: Domain,
    shift: f64,
    mixes: (&DMatrix<f64>, &DMatrix<f64>),
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SynthDomain> {
    let u = tastes(users, config, shift, rng);
    let v = tastes(items, config, shift, rng);
    let logits = &u.textual * v.textual.transpose()
        + &u.visual * v.visual.transpose()
        + &u.latent * v.latent.transpose();
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    let mut pairs = Vec::new();
    for user in 0..users {
        let lo = (per_user / 2).max(1);
        let count = rng.random_range(lo..=per_user + per_user / 2).min(items);
        // Gumbel top-k draws `count` items without replacement from the
        // softmax of the logits.
        let mut keyed: Vec<(usize, f64)> = (0..items)
            .map(|i| {
                (
                    i,
                    logits[(user, i)] / config.temperature + gumbel.sample(rng),
                )
            })
            .collect();
        keyed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        pairs.extend(keyed[..count].iter().map(|&(i, _)| (user, i)));
    }
    Ok(SynthDomain {
        interactions: InteractionSet::new(users, items, pairs, domain)?,
        user_textual: features(
            &u.textual,
            mixes.0,
            config.feature_noise,
            FeatureKind::Textual,
            rng,
        )?,
        item_textual: features(
            &v.textual,
            mixes.0,
            config.feature_noise,
            FeatureKind::Textual,
            rng,
        )?,
        item_visual: features(
            &v.visual,
            mixes.1,
            config.feature_noise,
            FeatureKind::Visual,
            rng,
        )?,
    })
}

/// Draws a source/target pair deterministically from `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthBundle> {
    if config.modality_rank > config.feature_dim {
        return Err(Error::invalid("modality_rank cannot exceed feature_dim"));
    }
    if [
        config.source_users,
        config.source_items,
        config.target_users,
        config.target_items,
    ]
    .contains(&0)
        || config.source_per_user == 0
        || config.target_per_user == 0
    {
        return Err(Error::invalid(
            "synthetic domains need users, items and interactions",
        ));
    }
    if !(config.temperature > 0.0 && config.taste_scale >= 0.0 && config.feature_noise >= 0.0) {
        return Err(Error::invalid(
            "temperature must be positive and scales nonnegative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let textual_mix = mixing(config.feature_dim, config.modality_rank, &mut rng);
    let visual_mix = mixing(config.feature_dim, config.modality_rank, &mut rng);
    let mixes = (&textual_mix, &visual_mix);
    let source = domain(
        config.source_users,
        config.source_items,
        config.source_per_user,
        Domain::Source,
        0.0,
        mixes,
        config,
        &mut rng,
    )?;
    let target = domain(
        config.target_users,
        config.target_items,
        config.target_per_user,
        Domain::Target,
        config.target_shift,
        mixes,
        config,
        &mut rng,
    )?;
    Ok(SynthBundle { source, target })
}

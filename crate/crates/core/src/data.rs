//! Shared domain types: interaction sets, side-feature matrices, CF models,
//! domain classifiers and the adaptation hyperparameters.
//!
//! Everything here is a validated value type. Learning logic lives in
//! [`crate::cf`] and [`crate::adapter`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_index, Error, Result};

/// Which side of the transfer an entity or dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Binary domain label: 1 for the target domain, 0 for the source domain.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sparse binary implicit-feedback matrix for one domain.
///
/// Every stored `(user, item)` pair means `R_ui = 1`; every absent pair is an
/// unobserved entry (`R_ui = 0`). Items of each user are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSet {
    num_items: usize,
    user_items: Vec<Vec<usize>>,
    len: usize,
    domain: Domain,
}

impl InteractionSet {
    /// Builds a set from explicit pairs. Duplicates and out-of-range indices
    /// are rejected.
    pub fn new(
        num_users: usize,
        num_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
        domain: Domain,
    ) -> Result<Self> {
        let (set, duplicates) = Self::from_pairs_dedup(num_users, num_items, pairs, domain)?;
        if duplicates > 0 {
            return Err(Error::invalid(format!(
                "{duplicates} duplicate (user, item) pairs"
            )));
        }
        Ok(set)
    }

    /// Builds a set from pairs, silently collapsing duplicates. Returns the
    /// set together with the number of dropped duplicates.
    pub fn from_pairs_dedup(
        num_users: usize,
        num_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
        domain: Domain,
    ) -> Result<(Self, usize)> {
        let mut user_items = vec![Vec::new(); num_users];
        for (u, i) in pairs {
            check_index("user", u, num_users)?;
            check_index("item", i, num_items)?;
            user_items[u].push(i);
        }
        let mut duplicates = 0;
        let mut len = 0;
        for items in &mut user_items {
            let before = items.len();
            items.sort_unstable();
            items.dedup();
            duplicates += before - items.len();
            len += items.len();
        }
        Ok((
            InteractionSet {
                num_items,
                user_items,
                len,
                domain,
            },
            duplicates,
        ))
    }

    pub fn num_users(&self) -> usize {
        self.user_items.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Number of positive pairs.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sorted items the user interacted with. Panics on an out-of-range user.
    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_items
            .get(user)
            .is_some_and(|items| items.binary_search(&item).is_ok())
    }

    /// All positive pairs in (user, item) order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    /// Same shape and domain, different positives.
    pub fn with_pairs(&self, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::new(self.num_users(), self.num_items, pairs, self.domain)
    }
}

/// Modality a feature matrix was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Textual,
    Visual,
    Fused,
}

/// Fixed per-entity side features, one row per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, kind: FeatureKind) -> Result<Self> {
        check_finite("feature matrix", &values)?;
        Ok(FeatureMatrix { values, kind })
    }

    pub fn zeros(rows: usize, dim: usize, kind: FeatureKind) -> Self {
        FeatureMatrix {
            values: DMatrix::zeros(rows, dim),
            kind,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.values.row(r).iter().copied().collect()
    }
}

/// Which side features a CF model concatenates with its latent factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "plain-mf")]
    PlainMf,
    #[serde(rename = "tcf")]
    Tcf,
    #[serde(rename = "vcf")]
    Vcf,
    #[serde(rename = "fcf")]
    Fcf,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::PlainMf, Variant::Tcf, Variant::Vcf, Variant::Fcf];

    /// Feature kind the variant expects, `None` for plain MF.
    pub fn feature_kind(self) -> Option<FeatureKind> {
        match self {
            Variant::PlainMf => None,
            Variant::Tcf => Some(FeatureKind::Textual),
            Variant::Vcf => Some(FeatureKind::Visual),
            Variant::Fcf => Some(FeatureKind::Fused),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::PlainMf => "plain-mf",
            Variant::Tcf => "tcf",
            Variant::Vcf => "vcf",
            Variant::Fcf => "fcf",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// Side features attached to a model: user rows and item rows of one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct SideFeatures {
    pub users: Arc<FeatureMatrix>,
    pub items: Arc<FeatureMatrix>,
}

impl SideFeatures {
    pub fn new(users: FeatureMatrix, items: FeatureMatrix) -> Result<Self> {
        check_dim(
            "side feature dim (items vs users)",
            users.dim(),
            items.dim(),
        )?;
        if users.kind() != items.kind() {
            return Err(Error::invalid(format!(
                "user features are {:?} but item features are {:?}",
                users.kind(),
                items.kind()
            )));
        }
        Ok(SideFeatures {
            users: Arc::new(users),
            items: Arc::new(items),
        })
    }

    pub fn dim(&self) -> usize {
        self.users.dim()
    }

    pub fn kind(&self) -> FeatureKind {
        self.users.kind()
    }
}

/// Matrix-factorization model with optional fixed side features.
///
/// The effective user representation is `[side_u, latent_u]`; only the latent
/// factors are ever trained.
#[derive(Debug, Clone, PartialEq)]
pub struct CfModel {
    pub user_latent: DMatrix<f64>,
    pub item_latent: DMatrix<f64>,
    side: Option<SideFeatures>,
    variant: Variant,
}

impl CfModel {
    pub fn new(
        user_latent: DMatrix<f64>,
        item_latent: DMatrix<f64>,
        side: Option<SideFeatures>,
        variant: Variant,
    ) -> Result<Self> {
        check_dim(
            "latent dim (items vs users)",
            user_latent.ncols(),
            item_latent.ncols(),
        )?;
        check_finite("user latent", &user_latent)?;
        check_finite("item latent", &item_latent)?;
        match (variant.feature_kind(), &side) {
            (None, None) => {}
            (None, Some(_)) => {
                return Err(Error::invalid("plain MF model cannot carry side features"))
            }
            (Some(kind), None) => {
                return Err(Error::invalid(format!(
                    "variant {variant} requires {kind:?} side features"
                )))
            }
            (Some(kind), Some(s)) => {
                if s.kind() != kind {
                    return Err(Error::invalid(format!(
                        "variant {variant} requires {kind:?} side features, got {:?}",
                        s.kind()
                    )));
                }
                check_dim("user side rows", user_latent.nrows(), s.users.rows())?;
                check_dim("item side rows", item_latent.nrows(), s.items.rows())?;
            }
        }
        Ok(CfModel {
            user_latent,
            item_latent,
            side,
            variant,
        })
    }

    /// Latent factors drawn i.i.d. uniform in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        num_users: usize,
        num_items: usize,
        latent_dim: usize,
        side: Option<SideFeatures>,
        variant: Variant,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut uniform = |rows| {
            DMatrix::from_fn(rows, latent_dim, |_, _| {
                if scale > 0.0 {
                    rng.random_range(-scale..=scale)
                } else {
                    0.0
                }
            })
        };
        let user_latent = uniform(num_users);
        let item_latent = uniform(num_items);
        Self::new(user_latent, item_latent, side, variant)
    }

    pub fn num_users(&self) -> usize {
        self.user_latent.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_latent.nrows()
    }

    /// K2.
    pub fn latent_dim(&self) -> usize {
        self.user_latent.ncols()
    }

    /// K1, zero for plain MF.
    pub fn side_dim(&self) -> usize {
        self.side.as_ref().map_or(0, SideFeatures::dim)
    }

    pub fn dims(&self) -> RepresentationDims {
        RepresentationDims {
            side: self.side_dim(),
            latent: self.latent_dim(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn side(&self) -> Option<&SideFeatures> {
        self.side.as_ref()
    }

    /// Raw preference logit `<U_u, V_i>` before the sigmoid.
    pub fn score(&self, user: usize, item: usize) -> f64 {
        let latent = self.user_latent.row(user).dot(&self.item_latent.row(item));
        match &self.side {
            Some(s) => latent + s.users.values.row(user).dot(&s.items.values.row(item)),
            None => latent,
        }
    }

    /// Concatenated `[side, latent]` representation of every user, one row each.
    pub fn user_representations(&self) -> DMatrix<f64> {
        concat_rows(
            self.side.as_ref().map(|s| s.users.values()),
            &self.user_latent,
        )
    }

    /// Concatenated `[side, latent]` representation of every item, one row each.
    pub fn item_representations(&self) -> DMatrix<f64> {
        concat_rows(
            self.side.as_ref().map(|s| s.items.values()),
            &self.item_latent,
        )
    }

    pub fn representations(&self, kind: EntityKind) -> DMatrix<f64> {
        match kind {
            EntityKind::User => self.user_representations(),
            EntityKind::Item => self.item_representations(),
        }
    }

    pub fn latent(&self, kind: EntityKind) -> &DMatrix<f64> {
        match kind {
            EntityKind::User => &self.user_latent,
            EntityKind::Item => &self.item_latent,
        }
    }

    pub fn latent_mut(&mut self, kind: EntityKind) -> &mut DMatrix<f64> {
        match kind {
            EntityKind::User => &mut self.user_latent,
            EntityKind::Item => &mut self.item_latent,
        }
    }

    /// Returns the name of the first latent matrix holding a non-finite value.
    pub fn non_finite_tensor(&self) -> Option<&'static str> {
        if !self.user_latent.iter().all(|v| v.is_finite()) {
            Some("user_latent")
        } else if !self.item_latent.iter().all(|v| v.is_finite()) {
            Some("item_latent")
        } else {
            None
        }
    }
}

fn concat_rows(side: Option<&DMatrix<f64>>, latent: &DMatrix<f64>) -> DMatrix<f64> {
    match side {
        None => latent.clone(),
        Some(side) => {
            let k1 = side.ncols();
            let mut out = DMatrix::zeros(latent.nrows(), k1 + latent.ncols());
            out.columns_mut(0, k1).copy_from(side);
            out.columns_mut(k1, latent.ncols()).copy_from(latent);
            out
        }
    }
}

/// Entity kind a domain classifier discriminates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Item,
}

impl EntityKind {
    pub fn name(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
        }
    }
}

/// Hidden width of the domain classifier.
pub const CLASSIFIER_HIDDEN: usize = 64;

/// Five-layer perceptron `(K1+K2) -> h -> h -> h -> 1` predicting the
/// probability that a representation comes from the target domain.
///
/// Weight `l` has shape `fan_in x fan_out`, so a layer computes `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifier {
    pub layer_weights: Vec<DMatrix<f64>>,
    pub layer_biases: Vec<DVector<f64>>,
    target_kind: EntityKind,
}

impl DomainClassifier {
    pub const NUM_LAYERS: usize = 4;

    pub fn from_parts(
        layer_weights: Vec<DMatrix<f64>>,
        layer_biases: Vec<DVector<f64>>,
        target_kind: EntityKind,
    ) -> Result<Self> {
        check_dim(
            "classifier layer count",
            Self::NUM_LAYERS,
            layer_weights.len(),
        )?;
        check_dim(
            "classifier bias count",
            Self::NUM_LAYERS,
            layer_biases.len(),
        )?;
        let hidden = layer_weights[0].ncols();
        for l in 1..Self::NUM_LAYERS {
            check_dim(
                "classifier layer fan-in",
                layer_weights[l - 1].ncols(),
                layer_weights[l].nrows(),
            )?;
            if l < Self::NUM_LAYERS - 1 {
                check_dim("classifier hidden width", hidden, layer_weights[l].ncols())?;
            }
        }
        check_dim("classifier output width", 1, layer_weights[3].ncols())?;
        for (l, (w, b)) in layer_weights.iter().zip(&layer_biases).enumerate() {
            check_dim("classifier bias length", w.ncols(), b.len())?;
            check_finite(&format!("classifier layer {l} weights"), w)?;
            if let Some(r) = b.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("classifier layer {l} bias"),
                    row: r,
                    col: 0,
                });
            }
        }
        Ok(DomainClassifier {
            layer_weights,
            layer_biases,
            target_kind,
        })
    }

    /// All-zero parameters; outputs 0.5 for every input.
    pub fn zeros(input_dim: usize, hidden: usize, target_kind: EntityKind) -> Self {
        let sizes = Self::layer_sizes(input_dim, hidden);
        DomainClassifier {
            layer_weights: sizes
                .windows(2)
                .map(|w| DMatrix::zeros(w[0], w[1]))
                .collect(),
            layer_biases: sizes[1..].iter().map(|&n| DVector::zeros(n)).collect(),
            target_kind,
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        target_kind: EntityKind,
        rng: &mut R,
    ) -> Self {
        let mut clf = Self::zeros(input_dim, hidden, target_kind);
        for w in &mut clf.layer_weights {
            let bound = 1.0 / (w.nrows().max(1) as f64).sqrt();
            w.iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..=bound));
        }
        clf
    }

    fn layer_sizes(input_dim: usize, hidden: usize) -> [usize; 5] {
        [input_dim, hidden, hidden, hidden, 1]
    }

    pub fn input_dim(&self) -> usize {
        self.layer_weights[0].nrows()
    }

    pub fn hidden(&self) -> usize {
        self.layer_weights[0].ncols()
    }

    pub fn target_kind(&self) -> EntityKind {
        self.target_kind
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_weights.iter().map(|w| w.len()).sum::<usize>()
            + self.layer_biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Order-sensitive FNV-1a hash over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let values = self
            .layer_weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.layer_biases.iter().flat_map(|b| b.iter()));
        for v in values {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }
}

/// Learning rates and regularization of the adversarial adaptation phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    /// Step on the source prediction loss.
    pub eta_source: f64,
    /// Step on the target prediction loss.
    pub eta_target: f64,
    /// Descent step of the domain classifiers.
    pub eta_classifier: f64,
    /// Ascent step of the embeddings on the classifier losses.
    pub eta_adversarial: f64,
    pub lambda_source: f64,
    pub lambda_target: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub classifier_hidden: usize,
    /// Entity count above which classifier losses are computed on a uniform
    /// sample of this many entities instead of all of them.
    pub classifier_batch_limit: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            eta_source: 0.2,
            eta_target: 0.2,
            eta_classifier: 0.2,
            eta_adversarial: 0.2,
            lambda_source: 0.005,
            lambda_target: 0.005,
            epochs: 200,
            negatives_per_positive: 1,
            classifier_hidden: CLASSIFIER_HIDDEN,
            classifier_batch_limit: 4096,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [
            ("eta_source", self.eta_source),
            ("eta_target", self.eta_target),
            ("eta_classifier", self.eta_classifier),
            ("eta_adversarial", self.eta_adversarial),
            ("lambda_source", self.lambda_source),
            ("lambda_target", self.lambda_target),
        ] {
            if !(rate.is_finite() && rate >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and nonnegative, got {rate}"
                )));
            }
        }
        if self.classifier_hidden == 0 {
            return Err(Error::invalid("classifier_hidden must be positive"));
        }
        if self.classifier_batch_limit < 2 {
            return Err(Error::invalid("classifier_batch_limit must be at least 2"));
        }
        Ok(())
    }
}

/// Column layout of a concatenated representation: K1 side columns, then K2
/// latent columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepresentationDims {
    pub side: usize,
    pub latent: usize,
}

impl RepresentationDims {
    pub fn total(&self) -> usize {
        self.side + self.latent
    }
}

/// `[side_row, latent_row]`. The feature slice always comes first so the
/// trainable latent slice is the tail `dims.latent` entries.
pub fn concat_representation(
    latent_row: &[f64],
    side_row: &[f64],
    dims: RepresentationDims,
) -> Result<Vec<f64>> {
    check_dim("latent row length", dims.latent, latent_row.len())?;
    check_dim("side row length", dims.side, side_row.len())?;
    if let Some(c) = side_row
        .iter()
        .chain(latent_row)
        .position(|v| !v.is_finite())
    {
        return Err(Error::NonFinite {
            context: "representation".into(),
            row: 0,
            col: c,
        });
    }
    let mut out = Vec::with_capacity(dims.total());
    out.extend_from_slice(side_row);
    out.extend_from_slice(latent_row);
    Ok(out)
}

pub(crate) fn check_finite(context: &str, m: &DMatrix<f64>) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite {
                    context: context.to_string(),
                    row: r,
                    col: c,
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(side: usize, latent: usize) -> RepresentationDims {
        RepresentationDims { side, latent }
    }

    #[test]
    fn concat_puts_side_first() {
        assert_eq!(
            concat_representation(&[1.0, 2.0], &[9.0], dims(1, 2)).unwrap(),
            vec![9.0, 1.0, 2.0]
        );
        assert_eq!(
            concat_representation(&[0.5], &[-1.0, 3.0], dims(2, 1)).unwrap(),
            vec![-1.0, 3.0, 0.5]
        );
        assert_eq!(
            concat_representation(&[0.0; 3], &[0.0; 4], dims(4, 3)).unwrap(),
            vec![0.0; 7]
        );
    }

    #[test]
    fn concat_rejects_wrong_lengths() {
        assert!(matches!(
            concat_representation(&[1.0], &[1.0], dims(1, 2)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(concat_representation(&[1.0, 2.0], &[], dims(1, 2)).is_err());
        assert!(concat_representation(&[f64::NAN], &[0.0], dims(1, 1)).is_err());
    }

    proptest! {
        #[test]
        fn concat_is_injective(
            a in prop::collection::vec(-5.0..5.0f64, 5),
            b in prop::collection::vec(-5.0..5.0f64, 5),
        ) {
            let d = dims(2, 3);
            let ca = concat_representation(&a[2..], &a[..2], d).unwrap();
            let cb = concat_representation(&b[2..], &b[..2], d).unwrap();
            prop_assert_eq!(ca == cb, a == b);
        }
    }

    #[test]
    fn interaction_set_rejects_out_of_range_and_duplicates() {
        assert!(InteractionSet::new(2, 2, [(2, 0)], Domain::Source).is_err());
        assert!(InteractionSet::new(2, 2, [(0, 2)], Domain::Source).is_err());
        assert!(InteractionSet::new(2, 2, [(0, 1), (0, 1)], Domain::Source).is_err());
        let (set, dups) =
            InteractionSet::from_pairs_dedup(2, 2, [(0, 1), (0, 1), (1, 0)], Domain::Target)
                .unwrap();
        assert_eq!(dups, 1);
        assert_eq!(set.len(), 2);
        assert!(set.contains(0, 1));
        assert!(!set.contains(0, 0));
        assert!(!set.contains(7, 0));
        assert_eq!(set.pairs().collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn feature_matrix_rejects_non_finite() {
        let m = DMatrix::from_row_slice(1, 2, &[0.0, f64::INFINITY]);
        match FeatureMatrix::new(m, FeatureKind::Visual) {
            Err(Error::NonFinite { row, col, .. }) => assert_eq!((row, col), (0, 1)),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn cf_model_checks_variant_and_shapes() {
        let side = SideFeatures::new(
            FeatureMatrix::zeros(2, 3, FeatureKind::Textual),
            FeatureMatrix::zeros(4, 3, FeatureKind::Textual),
        )
        .unwrap();
        let u = DMatrix::zeros(2, 5);
        let v = DMatrix::zeros(4, 5);
        assert!(CfModel::new(u.clone(), v.clone(), Some(side.clone()), Variant::Tcf).is_ok());
        assert!(CfModel::new(u.clone(), v.clone(), Some(side.clone()), Variant::Vcf).is_err());
        assert!(CfModel::new(u.clone(), v.clone(), None, Variant::Fcf).is_err());
        assert!(CfModel::new(u.clone(), v.clone(), Some(side), Variant::PlainMf).is_err());
        assert!(CfModel::new(u, DMatrix::zeros(4, 6), None, Variant::PlainMf).is_err());
    }

    #[test]
    fn representations_concatenate_side_then_latent() {
        let side = SideFeatures::new(
            FeatureMatrix::new(DMatrix::from_row_slice(1, 1, &[9.0]), FeatureKind::Fused).unwrap(),
            FeatureMatrix::new(DMatrix::from_row_slice(1, 1, &[7.0]), FeatureKind::Fused).unwrap(),
        )
        .unwrap();
        let model = CfModel::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[3.0, 4.0]),
            Some(side),
            Variant::Fcf,
        )
        .unwrap();
        assert_eq!(model.user_representations().as_slice(), &[9.0, 1.0, 2.0]);
        assert_eq!(model.item_representations().as_slice(), &[7.0, 3.0, 4.0]);
        assert_eq!(model.score(0, 0), 9.0 * 7.0 + 3.0 + 8.0);
    }

    #[test]
    fn classifier_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clf = DomainClassifier::random(10, CLASSIFIER_HIDDEN, EntityKind::User, &mut rng);
        let shapes: Vec<_> = clf.layer_weights.iter().map(|w| w.shape()).collect();
        assert_eq!(shapes, vec![(10, 64), (64, 64), (64, 64), (64, 1)]);
        assert_eq!(
            clf.num_parameters(),
            10 * 64 + 64 * 64 * 2 + 64 + 64 * 3 + 1
        );
        let rebuilt = DomainClassifier::from_parts(
            clf.layer_weights.clone(),
            clf.layer_biases.clone(),
            EntityKind::User,
        )
        .unwrap();
        assert_eq!(rebuilt.checksum(), clf.checksum());

        let mut bad = clf.layer_weights.clone();
        bad[1] = DMatrix::zeros(63, 64);
        assert!(
            DomainClassifier::from_parts(bad, clf.layer_biases.clone(), EntityKind::User).is_err()
        );
        assert!(DomainClassifier::from_parts(
            clf.layer_weights[..3].to_vec(),
            clf.layer_biases[..3].to_vec(),
            EntityKind::User
        )
        .is_err());
    }

    #[test]
    fn adaptation_config_validation() {
        assert!(AdaptationConfig::default().validate().is_ok());
        let zero = AdaptationConfig {
            eta_classifier: 0.0,
            eta_adversarial: 0.0,
            ..Default::default()
        };
        assert!(zero.validate().is_ok());
        let negative = AdaptationConfig {
            eta_source: -0.1,
            ..Default::default()
        };
        assert!(negative.validate().is_err());
        let nan = AdaptationConfig {
            lambda_target: f64::NAN,
            ..Default::default()
        };
        assert!(nan.validate().is_err());
    }

    #[test]
    fn domain_labels() {
        assert_eq!(Domain::Target.label(), 1.0);
        assert_eq!(Domain::Source.label(), 0.0);
        assert_eq!("FCF".parse::<Variant>().unwrap(), Variant::Fcf);
        assert!("bpr".parse::<Variant>().is_err());
    }
}

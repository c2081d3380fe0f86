//! Glue between raw feature files, fusion and model training for a pair of
//! domains.

use crate::cf::{train_cf, CfConfig, CfTraining};
use crate::data::{FeatureMatrix, InteractionSet, SideFeatures, Variant};
use crate::error::{check_dim, Error, Result};
use crate::fusion::{fit_fusion, fuse, PcaModel};
use crate::ingestion::derive_user_visual_features;

/// Per-domain modality features as loaded from disk. User visual features
/// are never stored; they are derived from the training interactions.
#[derive(Debug, Clone, Default)]
pub struct RawFeatures {
    pub user_textual: Option<FeatureMatrix>,
    pub item_textual: Option<FeatureMatrix>,
    pub item_visual: Option<FeatureMatrix>,
}

impl RawFeatures {
    fn require<'a>(
        field: &'a Option<FeatureMatrix>,
        name: &str,
        domain: &str,
    ) -> Result<&'a FeatureMatrix> {
        field
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{domain} {name} features are required")))
    }
}

/// Side features of both domains for one variant, plus the fusion model
/// when the variant is FCF.
#[derive(Debug, Clone)]
pub struct PreparedSides {
    pub source: Option<SideFeatures>,
    pub target: Option<SideFeatures>,
    pub pca: Option<PcaModel>,
}

fn textual(raw: &RawFeatures, domain: &str) -> Result<(FeatureMatrix, FeatureMatrix)> {
    Ok((
        RawFeatures::require(&raw.user_textual, "user_textual", domain)?.clone(),
        RawFeatures::require(&raw.item_textual, "item_textual", domain)?.clone(),
    ))
}

fn visual(
    raw: &RawFeatures,
    train: &InteractionSet,
    domain: &str,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let items = RawFeatures::require(&raw.item_visual, "item_visual", domain)?;
    Ok((derive_user_visual_features(items, train)?, items.clone()))
}

fn check_rows(
    pair: &(FeatureMatrix, FeatureMatrix),
    train: &InteractionSet,
    domain: &str,
) -> Result<()> {
    check_dim(
        if domain == "source" {
            "source user feature rows"
        } else {
            "target user feature rows"
        },
        train.num_users(),
        pair.0.rows(),
    )?;
    check_dim(
        if domain == "source" {
            "source item feature rows"
        } else {
            "target item feature rows"
        },
        train.num_items(),
        pair.1.rows(),
    )
}

/// Builds the side features `variant` needs for both domains.
///
/// FCF fits one PCA on the concatenated modalities of the users and items
/// of both domains, so every fused row lives in the same `k1`-dimensional
/// basis and user-item dot products stay meaningful across the two sides.
/// TCF and VCF use the raw modality, whose width must equal `k1`.
pub fn prepare_side_features(
    variant: Variant,
    source: (&RawFeatures, &InteractionSet),
    target: (&RawFeatures, &InteractionSet),
    k1: usize,
) -> Result<PreparedSides> {
    let sides = |f: &dyn Fn(
        &RawFeatures,
        &InteractionSet,
        &str,
    ) -> Result<(FeatureMatrix, FeatureMatrix)>| {
        let s = f(source.0, source.1, "source")?;
        let t = f(target.0, target.1, "target")?;
        check_rows(&s, source.1, "source")?;
        check_rows(&t, target.1, "target")?;
        Ok::<_, Error>((s, t))
    };
    match variant {
        Variant::PlainMf => Ok(PreparedSides {
            source: None,
            target: None,
            pca: None,
        }),
        Variant::Tcf | Variant::Vcf => {
            let (s, t) = if variant == Variant::Tcf {
                sides(&|raw, _, d| textual(raw, d))?
            } else {
                sides(&visual)?
            };
            check_dim("raw feature dim vs k1", k1, s.0.dim())?;
            check_dim("raw feature dim vs k1", k1, t.0.dim())?;
            Ok(PreparedSides {
                source: Some(SideFeatures::new(s.0, s.1)?),
                target: Some(SideFeatures::new(t.0, t.1)?),
                pca: None,
            })
        }
        Variant::Fcf => {
            let (st, tt) = sides(&|raw, _, d| textual(raw, d))?;
            let (sv, tv) = sides(&visual)?;
            let pca = fit_fusion(
                &[
                    (&st.0, &sv.0),
                    (&st.1, &sv.1),
                    (&tt.0, &tv.0),
                    (&tt.1, &tv.1),
                ],
                k1,
            )?;
            let side = |t: &(FeatureMatrix, FeatureMatrix), v: &(FeatureMatrix, FeatureMatrix)| {
                SideFeatures::new(fuse(&t.0, &v.0, &pca)?, fuse(&t.1, &v.1, &pca)?)
            };
            Ok(PreparedSides {
                source: Some(side(&st, &sv)?),
                target: Some(side(&tt, &tv)?),
                pca: Some(pca),
            })
        }
    }
}

/// Seed of the target-domain CF run given the configured one.
pub fn target_cf_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

/// Pre-trains one CF model per domain with the prepared side features.
pub fn pretrain_pair(
    variant: Variant,
    source_train: &InteractionSet,
    target_train: &InteractionSet,
    sides: &PreparedSides,
    config: &CfConfig,
) -> Result<(CfTraining, CfTraining)> {
    let source = train_cf(source_train, variant, sides.source.clone(), config)?;
    let target_config = CfConfig {
        seed: target_cf_seed(config.seed),
        ..config.clone()
    };
    let target = train_cf(target_train, variant, sides.target.clone(), &target_config)?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, FeatureKind};
    use nalgebra::DMatrix;

    fn raw(users: usize, items: usize, dim: usize, offset: f64) -> RawFeatures {
        let m = |rows: usize, kind| {
            FeatureMatrix::new(
                DMatrix::from_fn(rows, dim, |r, c| ((r * 7 + c * 3) % 5) as f64 + offset),
                kind,
            )
            .unwrap()
        };
        RawFeatures {
            user_textual: Some(m(users, FeatureKind::Textual)),
            item_textual: Some(m(items, FeatureKind::Textual)),
            item_visual: Some(m(items, FeatureKind::Visual)),
        }
    }

    fn train(users: usize, items: usize) -> InteractionSet {
        InteractionSet::new(
            users,
            items,
            (0..users).map(|u| (u, u % items)),
            Domain::Source,
        )
        .unwrap()
    }

    #[test]
    fn every_variant_prepares_matching_sides() {
        let (rs, rt) = (raw(4, 3, 2, 0.0), raw(5, 6, 2, 1.0));
        let (ts, tt) = (train(4, 3), train(5, 6));
        for variant in Variant::ALL {
            let p = prepare_side_features(variant, (&rs, &ts), (&rt, &tt), 2).unwrap();
            assert_eq!(p.source.as_ref().map(|s| s.kind()), variant.feature_kind());
            assert_eq!(
                p.target.as_ref().map(|s| s.users.rows()),
                variant.feature_kind().map(|_| 5)
            );
            assert_eq!(p.pca.is_some(), variant == Variant::Fcf);
        }
    }

    #[test]
    fn missing_modality_is_named() {
        let mut rs = raw(4, 3, 2, 0.0);
        rs.item_visual = None;
        let rt = raw(5, 6, 2, 1.0);
        let err = prepare_side_features(Variant::Fcf, (&rs, &train(4, 3)), (&rt, &train(5, 6)), 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("item_visual"), "{err}");
        assert!(
            prepare_side_features(Variant::Tcf, (&rs, &train(4, 3)), (&rt, &train(5, 6)), 2)
                .is_ok()
        );
    }

    #[test]
    fn raw_width_must_equal_k1() {
        let (rs, rt) = (raw(4, 3, 2, 0.0), raw(5, 6, 2, 1.0));
        assert!(
            prepare_side_features(Variant::Vcf, (&rs, &train(4, 3)), (&rt, &train(5, 6)), 3)
                .is_err()
        );
    }
}

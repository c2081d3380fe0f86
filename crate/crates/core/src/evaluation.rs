//! Top-k ranking metrics and multi-run aggregation.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{CfModel, InteractionSet};
use crate::error::{check_dim, check_index, Error, Result};
use crate::textio::TokenReader;

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 5] = [2, 5, 10, 15, 20];

/// Cutoff whose F1 selects the best epoch and the best runs.
pub const SELECTION_K: usize = 10;

/// The `k` best `(item, score)` candidates, by descending score with ties
/// broken by ascending item index.
pub fn top_k_by_score(candidates: impl IntoIterator<Item = (usize, f64)>, k: usize) -> Vec<usize> {
    let mut all: Vec<(usize, f64)> = candidates.into_iter().collect();
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < all.len() {
        all.select_nth_unstable_by(k, order);
        all.truncate(k);
    }
    all.sort_by(order);
    all.into_iter().map(|(i, _)| i).collect()
}

/// The `k` highest-scoring items for `user` outside `exclude`.
///
/// Items are ordered by the raw logit, which ranks exactly like the
/// sigmoid prediction but never collapses distinct scores into the clamp.
pub fn rank_top_k(model: &CfModel, user: usize, k: usize, exclude: &[usize]) -> Result<Vec<usize>> {
    check_index("user", user, model.num_users())?;
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let excluded: HashSet<usize> = exclude.iter().copied().collect();
    Ok(top_k_by_score(
        (0..model.num_items())
            .filter(|i| !excluded.contains(i))
            .map(|i| (i, model.score(user, i))),
        k,
    ))
}

fn count_hits(
    recommended: &[usize],
    relevant: &[usize],
    k: usize,
) -> Result<(usize, HashSet<usize>)> {
    if relevant.is_empty() {
        return Err(Error::invalid("relevant set is empty"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if recommended.len() > k {
        return Err(Error::invalid(format!(
            "{} recommendations exceed k = {k}",
            recommended.len()
        )));
    }
    let relevant: HashSet<usize> = relevant.iter().copied().collect();
    let hits = recommended.iter().filter(|i| relevant.contains(i)).count();
    Ok((hits, relevant))
}

/// Harmonic mean of precision `hits/k` and recall `hits/|relevant|`.
pub fn f1_at_k(recommended: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    let (hits, relevant) = count_hits(recommended, relevant, k)?;
    if hits == 0 {
        return Ok(0.0);
    }
    let p = hits as f64 / k as f64;
    let r = hits as f64 / relevant.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Binary-gain NDCG with discount `1/log2(rank + 1)`.
pub fn ndcg_at_k(recommended: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    let (_, relevant) = count_hits(recommended, relevant, k)?;
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = recommended
        .iter()
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(j, _)| discount(j + 1))
        .sum();
    let idcg: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Ok(dcg / idcg)
}

/// F1 and NDCG at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub f1: f64,
    pub ndcg: f64,
}

/// Metrics at several cutoffs, ascending by `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_k: Vec<KMetrics>,
    pub num_users_evaluated: usize,
    pub run_id: u64,
}

impl MetricsReport {
    pub fn get(&self, k: usize) -> Option<&KMetrics> {
        self.per_k.iter().find(|m| m.k == k)
    }

    pub fn f1(&self, k: usize) -> Option<f64> {
        self.get(k).map(|m| m.f1)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.get(k).map(|m| m.ndcg)
    }

    pub fn ks(&self) -> Vec<usize> {
        self.per_k.iter().map(|m| m.k).collect()
    }

    /// One `key value` pair per line:
    ///
    /// ```text
    /// run_id 0
    /// num_users_evaluated 3
    /// f1@2 0.5
    /// ndcg@2 0.6131471927654584
    /// ```
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "run_id {}\nnum_users_evaluated {}\n",
            self.run_id, self.num_users_evaluated
        );
        for m in &self.per_k {
            writeln!(out, "f1@{} {}\nndcg@{} {}", m.k, m.f1, m.k, m.ndcg).expect("String write");
        }
        out
    }

    pub fn from_kv(source_name: &str, text: &str) -> Result<Self> {
        let mut r = TokenReader::new(source_name, text);
        r.expect_word("run_id")?;
        let run_id = r.expect_string("run id")?;
        let run_id = run_id
            .parse()
            .map_err(|_| r.error(1, format!("bad run id `{run_id}`")))?;
        r.expect_word("num_users_evaluated")?;
        let num_users_evaluated = r.expect_usize("user count")?;
        let mut per_k = Vec::new();
        while let Some((key, line)) = r.next_token() {
            let k = key
                .strip_prefix("f1@")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| r.error(line, format!("expected `f1@<k>`, found `{key}`")))?;
            let f1 = r.expect_finite("f1", per_k.len(), 0)?;
            r.expect_word(&format!("ndcg@{k}"))?;
            let ndcg = r.expect_finite("ndcg", per_k.len(), 1)?;
            per_k.push(KMetrics { k, f1, ndcg });
        }
        let report = MetricsReport {
            per_k,
            num_users_evaluated,
            run_id,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: MetricsReport = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("bad report JSON: {e}")))?;
        report.validate()?;
        Ok(report)
    }

    /// Cutoffs strictly ascending, metrics in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.per_k.windows(2).any(|w| w[0].k >= w[1].k) {
            return Err(Error::invalid("report cutoffs must be strictly ascending"));
        }
        for m in &self.per_k {
            if !(0.0..=1.0).contains(&m.f1) || !(0.0..=1.0).contains(&m.ndcg) {
                return Err(Error::invalid(format!(
                    "metric at k = {} outside [0, 1]",
                    m.k
                )));
            }
        }
        Ok(())
    }
}

/// Sorted, deduplicated cutoffs; rejects an empty list and `k = 0`.
pub fn normalize_ks(ks: &[usize]) -> Result<Vec<usize>> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(Error::invalid("cutoff list must be nonempty and positive"));
    }
    Ok(ks)
}

/// Per-user F1@k and NDCG@k averaged over users with at least one `test`
/// positive. `train` positives are never recommended.
pub fn evaluate(
    model: &CfModel,
    test: &InteractionSet,
    train: &InteractionSet,
    ks: &[usize],
) -> Result<MetricsReport> {
    let ks = normalize_ks(ks)?;
    for set in [test, train] {
        check_dim("evaluation users", model.num_users(), set.num_users())?;
        check_dim("evaluation items", model.num_items(), set.num_items())?;
    }
    let max_k = *ks.last().expect("nonempty");
    let users = model.user_representations();
    let items = model.item_representations();
    let mut sums = vec![(0.0, 0.0); ks.len()];
    let mut evaluated = 0;
    for u in 0..model.num_users() {
        let relevant = test.items_of(u);
        if relevant.is_empty() {
            continue;
        }
        evaluated += 1;
        let seen = train.items_of(u);
        let scores = &items * users.row(u).transpose();
        let ranked = top_k_by_score(
            (0..model.num_items())
                .filter(|i| seen.binary_search(i).is_err())
                .map(|i| (i, scores[i])),
            max_k,
        );
        for (slot, &k) in sums.iter_mut().zip(&ks) {
            let top = &ranked[..k.min(ranked.len())];
            slot.0 += f1_at_k(top, relevant, k)?;
            slot.1 += ndcg_at_k(top, relevant, k)?;
        }
    }
    if evaluated == 0 {
        return Err(Error::invalid("no user has a held-out positive"));
    }
    let n = evaluated as f64;
    Ok(MetricsReport {
        per_k: ks
            .iter()
            .zip(sums)
            .map(|(&k, (f1, ndcg))| KMetrics {
                k,
                f1: f1 / n,
                ndcg: ndcg / n,
            })
            .collect(),
        num_users_evaluated: evaluated,
        run_id: 0,
    })
}

/// Element-wise mean of the `top_m` reports with the highest F1@10.
///
/// Ties keep input order. The result carries the run id of the best run and
/// the rounded mean user count.
pub fn aggregate_runs(reports: &[MetricsReport], top_m: usize) -> Result<MetricsReport> {
    if top_m == 0 || reports.len() < top_m {
        return Err(Error::invalid(format!(
            "cannot take the top {top_m} of {} reports",
            reports.len()
        )));
    }
    let ks = reports[0].ks();
    let mut keyed = Vec::with_capacity(reports.len());
    for r in reports {
        if r.ks() != ks {
            return Err(Error::invalid("reports use different cutoffs"));
        }
        let key = r
            .f1(SELECTION_K)
            .ok_or_else(|| Error::invalid(format!("report lacks F1@{SELECTION_K}")))?;
        keyed.push((key, r));
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
    let chosen: Vec<&MetricsReport> = keyed.into_iter().take(top_m).map(|(_, r)| r).collect();
    let m = top_m as f64;
    let per_k = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| KMetrics {
            k,
            f1: chosen.iter().map(|r| r.per_k[j].f1).sum::<f64>() / m,
            ndcg: chosen.iter().map(|r| r.per_k[j].ndcg).sum::<f64>() / m,
        })
        .collect();
    let users = chosen
        .iter()
        .map(|r| r.num_users_evaluated as f64)
        .sum::<f64>()
        / m;
    Ok(MetricsReport {
        per_k,
        num_users_evaluated: users.round() as usize,
        run_id: chosen[0].run_id,
    })
}

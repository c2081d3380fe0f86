//! Loading interaction and feature files, the 8:1:1 split, negative sampling
//! and user-level visual features.
//!
//! # File formats
//!
//! * Interactions: UTF-8 text, one `user_id<TAB>item_id` pair per line. Blank
//!   lines are skipped. Raw IDs are mapped to dense 0-based indices either in
//!   order of first appearance or through an explicit [`IdIndex`].
//! * ID lists: one raw ID per line; line `r` (0-based) is entity index `r`.
//! * Feature matrices: a header line `rows dim` followed by `rows * dim`
//!   whitespace-separated decimal numbers in row-major order (the writer puts
//!   one row per line). Row `r` belongs to entity index `r`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Domain, FeatureKind, FeatureMatrix, InteractionSet};
use crate::error::{check_dim, check_index, Error, Result};
use crate::textio::{push_sized_matrix, read_file, write_file, TokenReader};

/// Bidirectional mapping between raw string IDs and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut index = IdIndex::new();
        for id in ids {
            if index.lookup.contains_key(&id) {
                return Err(Error::invalid(format!("duplicate id `{id}`")));
            }
            index.get_or_insert(&id);
        }
        Ok(index)
    }

    pub fn get_or_insert(&mut self, id: &str) -> usize {
        if let Some(&idx) = self.lookup.get(id) {
            return idx;
        }
        let idx = self.ids.len();
        self.ids.push(id.to_string());
        self.lookup.insert(id.to_string(), idx);
        idx
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let mut index = IdIndex::new();
        for (n, line) in text.lines().enumerate() {
            let id = line.trim();
            if id.is_empty() {
                continue;
            }
            if index.get(id).is_some() {
                return Err(Error::Parse {
                    source_name: path.display().to_string(),
                    line: n + 1,
                    message: format!("duplicate id `{id}`"),
                });
            }
            index.get_or_insert(id);
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for id in &self.ids {
            out.push_str(id);
            out.push('\n');
        }
        write_file(path, &out)
    }
}

/// Interactions together with the ID maps used to index them.
#[derive(Debug, Clone)]
pub struct LoadedInteractions {
    pub set: InteractionSet,
    pub users: IdIndex,
    pub items: IdIndex,
    /// Repeated lines collapsed into one positive.
    pub duplicates: usize,
}

fn parse_pair<'a>(
    source: &str,
    line_no: usize,
    line: &'a str,
) -> Result<Option<(&'a str, &'a str)>> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.trim().is_empty() {
        return Ok(None);
    }
    let mut fields = line.split('\t');
    match (fields.next(), fields.next(), fields.next()) {
        (Some(u), Some(i), None) if !u.trim().is_empty() && !i.trim().is_empty() => {
            Ok(Some((u.trim(), i.trim())))
        }
        _ => Err(Error::Parse {
            source_name: source.to_string(),
            line: line_no,
            message: format!("expected `user_id<TAB>item_id`, found `{line}`"),
        }),
    }
}

/// Parses interaction text, assigning dense indices by first appearance.
pub fn parse_interactions(
    source_name: &str,
    text: &str,
    domain: Domain,
) -> Result<LoadedInteractions> {
    let mut users = IdIndex::new();
    let mut items = IdIndex::new();
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if let Some((u, i)) = parse_pair(source_name, n + 1, line)? {
            pairs.push((users.get_or_insert(u), items.get_or_insert(i)));
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid(format!("{source_name}: no interactions")));
    }
    let (set, duplicates) =
        InteractionSet::from_pairs_dedup(users.len(), items.len(), pairs, domain)?;
    if duplicates > 0 {
        log::warn!("{source_name}: dropped {duplicates} duplicate interactions");
    }
    Ok(LoadedInteractions {
        set,
        users,
        items,
        duplicates,
    })
}

/// Loads a TSV interaction file; M and N are the distinct user and item counts.
pub fn load_interactions(path: &Path, domain: Domain) -> Result<LoadedInteractions> {
    let text = read_file(path)?;
    parse_interactions(&path.display().to_string(), &text, domain)
}

/// Parses interaction text against fixed ID maps. Unknown IDs are an error;
/// an empty input yields an empty set.
pub fn parse_interactions_indexed(
    source_name: &str,
    text: &str,
    domain: Domain,
    users: &IdIndex,
    items: &IdIndex,
) -> Result<InteractionSet> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if let Some((u, i)) = parse_pair(source_name, n + 1, line)? {
            let lookup = |index: &IdIndex, id: &str, what: &str| {
                index.get(id).ok_or_else(|| Error::Parse {
                    source_name: source_name.to_string(),
                    line: n + 1,
                    message: format!("unknown {what} id `{id}`"),
                })
            };
            pairs.push((lookup(users, u, "user")?, lookup(items, i, "item")?));
        }
    }
    let (set, duplicates) =
        InteractionSet::from_pairs_dedup(users.len(), items.len(), pairs, domain)?;
    if duplicates > 0 {
        log::warn!("{source_name}: dropped {duplicates} duplicate interactions");
    }
    Ok(set)
}

pub fn load_interactions_indexed(
    path: &Path,
    domain: Domain,
    users: &IdIndex,
    items: &IdIndex,
) -> Result<InteractionSet> {
    let text = read_file(path)?;
    parse_interactions_indexed(&path.display().to_string(), &text, domain, users, items)
}

/// Serializes positives as TSV in (user, item) index order.
pub fn format_interactions(
    set: &InteractionSet,
    users: &IdIndex,
    items: &IdIndex,
) -> Result<String> {
    check_dim("user id count", set.num_users(), users.len())?;
    check_dim("item id count", set.num_items(), items.len())?;
    let mut out = String::new();
    for (u, i) in set.pairs() {
        writeln!(out, "{}\t{}", users.id(u), items.id(i)).expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn write_interactions(
    path: &Path,
    set: &InteractionSet,
    users: &IdIndex,
    items: &IdIndex,
) -> Result<()> {
    write_file(path, &format_interactions(set, users, items)?)
}

/// Train/validation/test partition of one domain's positives.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub test: InteractionSet,
    pub split_seed: u64,
}

/// Part sizes for `n` positives: train is `round(0.8 n)` (halves round up),
/// validation takes half of the remainder rounded down, test the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (8 * n + 5) / 10;
    let validation = (n - train) / 2;
    (train, validation, n - train - validation)
}

/// Uniformly random global 8:1:1 split of the positives, deterministic in `seed`.
pub fn split_dataset(all: &InteractionSet, seed: u64) -> Result<SplitDataset> {
    if all.len() < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 positives to split, got {}",
            all.len()
        )));
    }
    let mut pairs: Vec<_> = all.pairs().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(pairs.len());
    let (train, rest) = pairs.split_at(n_train);
    let (validation, test) = rest.split_at(n_val);
    Ok(SplitDataset {
        train: all.with_pairs(train.iter().copied())?,
        validation: all.with_pairs(validation.iter().copied())?,
        test: all.with_pairs(test.iter().copied())?,
        split_seed: seed,
    })
}

/// Draws `n` distinct items the user has not interacted with in `train`,
/// uniformly without replacement. Returns every such item when fewer than
/// `n` exist.
pub fn sample_negatives<R: Rng + ?Sized>(
    train: &InteractionSet,
    user: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_index("user", user, train.num_users())?;
    let positives = train.items_of(user);
    let available = train.num_items() - positives.len();
    if n == 0 || available == 0 {
        return Ok(Vec::new());
    }
    if n >= available {
        return Ok(complement(positives, train.num_items()));
    }
    if n * 4 <= available {
        // Sparse rows: rejection sampling touches O(n) items.
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let item = rng.random_range(0..train.num_items());
            if positives.binary_search(&item).is_err() && seen.insert(item) {
                out.push(item);
            }
        }
        Ok(out)
    } else {
        let candidates = complement(positives, train.num_items());
        Ok(index::sample(rng, candidates.len(), n)
            .into_iter()
            .map(|k| candidates[k])
            .collect())
    }
}

fn complement(sorted_items: &[usize], num_items: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(num_items - sorted_items.len());
    let mut pos = sorted_items.iter().peekable();
    for item in 0..num_items {
        if pos.peek() == Some(&&item) {
            pos.next();
        } else {
            out.push(item);
        }
    }
    out
}

/// Each user's row is the mean of the feature rows of the items they
/// interacted with in `train`; users without interactions get a zero row.
pub fn derive_user_visual_features(
    item_features: &FeatureMatrix,
    train: &InteractionSet,
) -> Result<FeatureMatrix> {
    check_dim("item feature rows", train.num_items(), item_features.rows())?;
    let items = item_features.values();
    let mut out = DMatrix::zeros(train.num_users(), item_features.dim());
    for u in 0..train.num_users() {
        let rated = train.items_of(u);
        if rated.is_empty() {
            continue;
        }
        let mut row = out.row_mut(u);
        for &i in rated {
            row += items.row(i);
        }
        row /= rated.len() as f64;
    }
    FeatureMatrix::new(out, item_features.kind())
}

/// Parses a feature matrix; `expected_rows` is checked when given.
pub fn parse_feature_matrix(
    source_name: &str,
    text: &str,
    expected_rows: Option<usize>,
    kind: FeatureKind,
) -> Result<FeatureMatrix> {
    let mut reader = TokenReader::new(source_name, text);
    let rows = reader.expect_usize("row count")?;
    let dim = reader.expect_usize("feature dimension")?;
    if let Some(expected) = expected_rows {
        if expected != rows {
            return Err(reader.error(
                1,
                format!("header declares {rows} rows but {expected} entities are indexed"),
            ));
        }
    }
    let values = reader.read_matrix(rows, dim)?;
    reader.expect_end()?;
    FeatureMatrix::new(values, kind)
}

pub fn load_feature_matrix(
    path: &Path,
    expected_rows: Option<usize>,
    kind: FeatureKind,
) -> Result<FeatureMatrix> {
    let text = read_file(path)?;
    parse_feature_matrix(&path.display().to_string(), &text, expected_rows, kind)
}

pub fn format_feature_matrix(features: &FeatureMatrix) -> String {
    let mut out = String::new();
    push_sized_matrix(&mut out, features.values());
    out
}

pub fn write_feature_matrix(path: &Path, features: &FeatureMatrix) -> Result<()> {
    write_file(path, &format_feature_matrix(features))
}

//! The subcommands. Each reads the config, does one job and writes its
//! artifacts below `output_dir`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use modalign::adapter::{probe_domain_accuracy, train_fdar, AdaptationData, AdapterState};
use modalign::cf::{train_cf, CfCheckpoint};
use modalign::evaluation::{aggregate_runs, evaluate, SELECTION_K};
use modalign::ingestion::{
    load_feature_matrix, load_interactions, load_interactions_indexed, split_dataset,
    write_feature_matrix, write_interactions, IdIndex,
};
use modalign::pipeline::{prepare_side_features, pretrain_pair, target_cf_seed, RawFeatures};
use modalign::synth::{generate, SynthConfig};
use modalign::{
    CfModel, Domain, FeatureKind, FeatureMatrix, InteractionSet, SideFeatures, Variant,
};

use crate::config::{DomainPaths, ExperimentConfig};

const DOMAINS: [Domain; 2] = [Domain::Source, Domain::Target];

/// Artifact locations under `output_dir`.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(config: &ExperimentConfig) -> Self {
        Layout {
            root: config.output_dir.clone(),
        }
    }

    pub fn split_dir(&self, d: Domain) -> PathBuf {
        self.root.join("split").join(d.name())
    }

    pub fn split_file(&self, d: Domain, part: &str) -> PathBuf {
        self.split_dir(d).join(format!("{part}.tsv"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn checkpoint(&self, d: Domain) -> PathBuf {
        self.models_dir().join(format!("{}.cfmodel", d.name()))
    }

    pub fn side_file(&self, d: Domain, entity: &str) -> PathBuf {
        self.models_dir()
            .join(format!("{}_{entity}_side.txt", d.name()))
    }

    pub fn adapt_dir(&self) -> PathBuf {
        self.root.join("adapt")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn paths(config: &ExperimentConfig, d: Domain) -> &DomainPaths {
    match d {
        Domain::Source => &config.source,
        Domain::Target => &config.target,
    }
}

/// One domain's split as read back from disk.
pub struct LoadedSplit {
    pub users: IdIndex,
    pub items: IdIndex,
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub test: InteractionSet,
}

pub fn load_split(layout: &Layout, d: Domain) -> anyhow::Result<LoadedSplit> {
    let dir = layout.split_dir(d);
    let users =
        IdIndex::load(&dir.join("users.txt")).context("split not found; run `split` first")?;
    let items = IdIndex::load(&dir.join("items.txt"))?;
    let part = |name| load_interactions_indexed(&layout.split_file(d, name), d, &users, &items);
    Ok(LoadedSplit {
        train: part("train")?,
        validation: part("validation")?,
        test: part("test")?,
        users,
        items,
    })
}

pub fn cmd_split(config: &ExperimentConfig) -> anyhow::Result<()> {
    let layout = Layout::new(config);
    let mut manifest = format!("seed {}\n", config.seed);
    for d in DOMAINS {
        let path = paths(config, d)
            .interactions
            .as_ref()
            .with_context(|| format!("{}.interactions is not set", d.name()))?;
        let loaded = load_interactions(path, d)?;
        let split = split_dataset(&loaded.set, config.seed)?;
        let dir = layout.split_dir(d);
        loaded.users.save(&dir.join("users.txt"))?;
        loaded.items.save(&dir.join("items.txt"))?;
        for (name, set) in [
            ("train", &split.train),
            ("validation", &split.validation),
            ("test", &split.test),
        ] {
            write_interactions(
                &layout.split_file(d, name),
                set,
                &loaded.users,
                &loaded.items,
            )?;
        }
        writeln!(
            manifest,
            "{} users {} items {} train {} validation {} test {}",
            d.name(),
            loaded.users.len(),
            loaded.items.len(),
            split.train.len(),
            split.validation.len(),
            split.test.len()
        )?;
        log::info!("{}: {} positives split", d.name(), loaded.set.len());
    }
    write(&layout.root.join("split").join("manifest.txt"), &manifest)
}

fn load_raw(
    config: &ExperimentConfig,
    d: Domain,
    split: &LoadedSplit,
) -> anyhow::Result<RawFeatures> {
    let p = paths(config, d);
    let needed: &[&str] = match config.variant {
        Variant::PlainMf => {
            if p.user_textual.is_some() || p.item_textual.is_some() || p.item_visual.is_some() {
                log::warn!("variant plain-mf ignores the {} feature paths", d.name());
            }
            &[]
        }
        Variant::Tcf => &["user_textual", "item_textual"],
        Variant::Vcf => &["item_visual"],
        Variant::Fcf => &["user_textual", "item_textual", "item_visual"],
    };
    let mut raw = RawFeatures::default();
    for &field in needed {
        let (path, rows, kind, slot) = match field {
            "user_textual" => (
                &p.user_textual,
                split.users.len(),
                FeatureKind::Textual,
                &mut raw.user_textual,
            ),
            "item_textual" => (
                &p.item_textual,
                split.items.len(),
                FeatureKind::Textual,
                &mut raw.item_textual,
            ),
            _ => (
                &p.item_visual,
                split.items.len(),
                FeatureKind::Visual,
                &mut raw.item_visual,
            ),
        };
        let path = path.as_ref().with_context(|| {
            format!(
                "{}.{field} is required for variant {}",
                d.name(),
                config.variant
            )
        })?;
        *slot = Some(load_feature_matrix(path, Some(rows), kind)?);
    }
    Ok(raw)
}

fn format_losses(losses: &[f64]) -> String {
    let mut out = String::from("epoch\tloss\n");
    for (e, l) in losses.iter().enumerate() {
        writeln!(out, "{e}\t{l}").expect("String write");
    }
    out
}

pub fn cmd_train(config: &ExperimentConfig) -> anyhow::Result<()> {
    let layout = Layout::new(config);
    let source = load_split(&layout, Domain::Source)?;
    let target = load_split(&layout, Domain::Target)?;
    let raw_s = load_raw(config, Domain::Source, &source)?;
    let raw_t = load_raw(config, Domain::Target, &target)?;
    let sides = prepare_side_features(
        config.variant,
        (&raw_s, &source.train),
        (&raw_t, &target.train),
        config.k1,
    )?;
    let (s, t) = pretrain_pair(
        config.variant,
        &source.train,
        &target.train,
        &sides,
        &config.cf_config(config.seed),
    )?;

    let dir = layout.models_dir();
    for (d, trained, side) in [
        (Domain::Source, &s, &sides.source),
        (Domain::Target, &t, &sides.target),
    ] {
        CfCheckpoint::from_model(&trained.model).save(&layout.checkpoint(d))?;
        write(
            &dir.join(format!("{}_loss.tsv", d.name())),
            &format_losses(&trained.epoch_losses),
        )?;
        if let Some(side) = side {
            write_feature_matrix(&layout.side_file(d, "user"), &side.users)?;
            write_feature_matrix(&layout.side_file(d, "item"), &side.items)?;
        }
        log::info!(
            "{}: final training loss {:.4}",
            d.name(),
            trained.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    if let Some(pca) = &sides.pca {
        pca.save(&dir.join("pca.txt"))?;
    }
    Ok(())
}

/// Loads a CF checkpoint and reattaches the side features saved by `train`.
pub fn load_model(
    config: &ExperimentConfig,
    layout: &Layout,
    d: Domain,
    checkpoint: &Path,
) -> anyhow::Result<CfModel> {
    let ck = CfCheckpoint::load(checkpoint)?;
    if ck.variant != config.variant {
        bail!(
            "{} was trained as {} but the config asks for {}",
            checkpoint.display(),
            ck.variant,
            config.variant
        );
    }
    let side = match config.variant.feature_kind() {
        None => None,
        Some(kind) => {
            let users = load_feature_matrix(
                &layout.side_file(d, "user"),
                Some(ck.user_latent.nrows()),
                kind,
            )?;
            let items = load_feature_matrix(
                &layout.side_file(d, "item"),
                Some(ck.item_latent.nrows()),
                kind,
            )?;
            Some(SideFeatures::new(users, items)?)
        }
    };
    Ok(ck.into_model(side)?)
}

pub fn cmd_adapt(config: &ExperimentConfig) -> anyhow::Result<()> {
    let layout = Layout::new(config);
    let source = load_split(&layout, Domain::Source)?;
    let target = load_split(&layout, Domain::Target)?;
    let source_model = load_model(
        config,
        &layout,
        Domain::Source,
        &layout.checkpoint(Domain::Source),
    )
    .context("source checkpoint missing; run `train` first")?;
    let target_model = load_model(
        config,
        &layout,
        Domain::Target,
        &layout.checkpoint(Domain::Target),
    )
    .context("target checkpoint missing; run `train` first")?;
    let dir = layout.adapt_dir();

    let baseline = evaluate(&target_model, &target.test, &target.train, &config.ks)?;
    write(&dir.join("baseline_report.txt"), &baseline.to_kv())?;

    let data = AdaptationData {
        source_train: &source.train,
        target_train: &target.train,
        target_validation: &target.validation,
    };
    let mut reports = Vec::with_capacity(config.runs);
    let mut best: Option<(f64, AdapterState)> = None;
    let mut probe_log = String::new();
    for run in 0..config.runs {
        let seed = config.seed + run as u64;
        let state = AdapterState::new(
            source_model.clone(),
            target_model.clone(),
            config.adaptation_config(seed),
        )?;
        let outcome = train_fdar(state, data, &config.ks)?;
        let mut report = evaluate(
            &outcome.best.target_model,
            &target.test,
            &target.train,
            &config.ks,
        )?;
        report.run_id = run as u64;
        write(&dir.join(format!("run-{run}.txt")), &report.to_kv())?;
        log::info!(
            "run {run}: best epoch {}, test F1@{} {:.5}",
            outcome.best_epoch,
            config.ks[0],
            report.per_k[0].f1
        );
        if config.probe.enabled {
            // The final state has felt the alignment pressure longest,
            // whichever epoch validation preferred.
            let last = &outcome.last;
            let probe = config.probe_config(seed);
            let before_u = probe_domain_accuracy(
                &source_model.user_latent,
                &target_model.user_latent,
                &probe,
            )?;
            let before_i = probe_domain_accuracy(
                &source_model.item_latent,
                &target_model.item_latent,
                &probe,
            )?;
            let after_u = probe_domain_accuracy(
                &last.source_model.user_latent,
                &last.target_model.user_latent,
                &probe,
            )?;
            let after_i = probe_domain_accuracy(
                &last.source_model.item_latent,
                &last.target_model.item_latent,
                &probe,
            )?;
            writeln!(
                probe_log,
                "run {run} users_before {before_u} users_after {after_u} items_before {before_i} items_after {after_i}"
            )?;
        }
        let key = report
            .f1(SELECTION_K)
            .expect("ks contains the selection cutoff");
        if best.as_ref().is_none_or(|(k, _)| key > *k) {
            best = Some((key, outcome.best));
        }
        reports.push(report);
    }
    let aggregate = aggregate_runs(&reports, config.top_m)?;
    write(&dir.join("report.txt"), &aggregate.to_kv())?;
    write(&dir.join("report.json"), &aggregate.to_json())?;
    if config.probe.enabled {
        write(&dir.join("probe.txt"), &probe_log)?;
    }
    let (_, state) = best.expect("at least one run");
    state.save(&dir.join("best"))?;
    print!("{}", aggregate.to_kv());
    Ok(())
}

pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint: Option<&Path>,
    domain: Domain,
) -> anyhow::Result<()> {
    let layout = Layout::new(config);
    let split = load_split(&layout, domain)?;
    let path = checkpoint.map_or_else(|| layout.checkpoint(domain), Path::to_path_buf);
    let model = load_model(config, &layout, domain, &path)?;
    let report = evaluate(&model, &split.test, &split.train, &config.ks)?;
    let dir = layout.eval_dir();
    write(
        &dir.join(format!("{}_report.txt", domain.name())),
        &report.to_kv(),
    )?;
    write(
        &dir.join(format!("{}_report.json", domain.name())),
        &report.to_json(),
    )?;
    print!("{}", report.to_kv());
    Ok(())
}

/// Trains a target-domain CF model for every `(eta, lambda)` pair and
/// writes the test metrics as a TSV grid.
pub fn cmd_sweep(config: &ExperimentConfig) -> anyhow::Result<()> {
    let layout = Layout::new(config);
    let source = load_split(&layout, Domain::Source)?;
    let target = load_split(&layout, Domain::Target)?;
    let raw_s = load_raw(config, Domain::Source, &source)?;
    let raw_t = load_raw(config, Domain::Target, &target)?;
    let sides = prepare_side_features(
        config.variant,
        (&raw_s, &source.train),
        (&raw_t, &target.train),
        config.k1,
    )?;

    let mut out = String::from("eta\tlambda");
    for k in &config.ks {
        write!(out, "\tf1@{k}\tndcg@{k}")?;
    }
    out.push('\n');
    for &eta in &config.sweep.etas {
        for &lambda in &config.sweep.lambdas {
            let mut cf = config.cf_config(target_cf_seed(config.seed));
            cf.learning_rate = eta;
            cf.lambda = lambda;
            let trained = train_cf(&target.train, config.variant, sides.target.clone(), &cf)?;
            let report = evaluate(&trained.model, &target.test, &target.train, &config.ks)?;
            write!(out, "{eta}\t{lambda}")?;
            for m in &report.per_k {
                write!(out, "\t{}\t{}", m.f1, m.ndcg)?;
            }
            out.push('\n');
            log::info!(
                "eta {eta} lambda {lambda}: F1@{} {:.5}",
                config.ks[0],
                report.per_k[0].f1
            );
        }
    }
    write(&layout.sweep_dir().join("grid.tsv"), &out)?;
    print!("{out}");
    Ok(())
}

/// Writes a synthetic source/target bundle and a matching `config.toml`.
pub fn cmd_gen_synth(out: &Path, synth: &SynthConfig) -> anyhow::Result<()> {
    let bundle = generate(synth)?;
    let mut config = ExperimentConfig {
        seed: synth.seed,
        variant: Variant::Fcf,
        k1: synth.feature_dim,
        k2: 8,
        output_dir: PathBuf::from("out"),
        ..Default::default()
    };
    config.cf.learning_rate = 0.01;
    config.cf.lambda = 0.01;
    config.cf.epochs = 50;
    let a = &mut config.adaptation;
    a.eta_source = 0.01;
    a.eta_target = 0.01;
    a.eta_classifier = 0.001;
    a.eta_adversarial = 0.1;
    a.lambda_source = 0.01;
    a.lambda_target = 0.01;
    a.epochs = 200;

    for (d, data) in [
        (Domain::Source, &bundle.source),
        (Domain::Target, &bundle.target),
    ] {
        let dir = out.join(d.name());
        let users = IdIndex::from_ids((0..data.interactions.num_users()).map(|u| format!("u{u}")))?;
        let items = IdIndex::from_ids((0..data.interactions.num_items()).map(|i| format!("i{i}")))?;
        let interactions = dir.join("interactions.tsv");
        write_interactions(&interactions, &data.interactions, &users, &items)?;
        // Loading re-indexes by first appearance and drops items nobody
        // picked; feature rows must follow that order.
        let loaded = load_interactions(&interactions, d)?;
        let files = [
            (
                "user_textual.txt",
                &data.user_textual,
                &loaded.users,
                &users,
            ),
            (
                "item_textual.txt",
                &data.item_textual,
                &loaded.items,
                &items,
            ),
            ("item_visual.txt", &data.item_visual, &loaded.items, &items),
        ];
        for (name, m, order, original) in files {
            write_feature_matrix(&dir.join(name), &reorder_rows(m, order, original)?)?;
        }
        let rel = |name: &str| Some(PathBuf::from(d.name()).join(name));
        let p = DomainPaths {
            interactions: rel("interactions.tsv"),
            user_textual: rel("user_textual.txt"),
            item_textual: rel("item_textual.txt"),
            item_visual: rel("item_visual.txt"),
        };
        match d {
            Domain::Source => config.source = p,
            Domain::Target => config.target = p,
        }
    }
    write(&out.join("config.toml"), &config.to_toml())?;
    write(&out.join("synth.toml"), &toml::to_string(synth)?)?;
    Ok(())
}

fn reorder_rows(
    m: &FeatureMatrix,
    order: &IdIndex,
    original: &IdIndex,
) -> anyhow::Result<FeatureMatrix> {
    let rows: Vec<usize> = (0..order.len())
        .map(|r| {
            original
                .get(order.id(r))
                .expect("loaded IDs come from the written file")
        })
        .collect();
    Ok(FeatureMatrix::new(m.values().select_rows(&rows), m.kind())?)
}

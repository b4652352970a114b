use std::path::{Path, PathBuf};

use anyhow::Context;
use maps_core::align_general::{build_mapping, collection_rule, TokenItemMapping};
use maps_core::checkpoint::{BestRecord, Checkpoint};
use maps_core::consult_rules::{proportion_grid, RelevanceLevel, DEFAULT_WINDOWS_DAYS};
use maps_core::corpus::{
    chronological_split, filter_min_interactions, generate_synthetic, load_corpus, write_corpus, write_links, ChronoSplit,
    SplitPart, INTERACTIONS_FILE, ITEMS_FILE, LINKS_FILE, USERS_FILE,
};
use maps_core::evaluator::{evaluate, ModelScorer};
use maps_core::trainer::{train, TrainData};
use maps_core::{InteractionCorpus, MapsError, MapsModel, RunConfig, TokenEmbeddingStore};
use serde_json::json;

use crate::manifest::RunManifest;

pub fn dispatch(name: &str, cfg: &RunConfig, ablate: &[(String, String)]) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    if name != "evaluate" {
        for (k, v) in ablate {
            cfg.set(k, v)?;
        }
    }
    let mut manifest = RunManifest::default();
    match name {
        "prepare" => prepare(&cfg, &mut manifest)?,
        "train" => train_cmd(&cfg, &mut manifest)?,
        "evaluate" => evaluate_cmd(&cfg, ablate, &mut manifest)?,
        "analyze-consultations" => analyze(&cfg, &mut manifest)?,
        "generate-synthetic" => synthesize(&cfg, &mut manifest)?,
        "export-mapping" => export_mapping(&cfg, &mut manifest)?,
        other => anyhow::bail!("unknown command {other}"),
    }
    manifest.write(name, &cfg, ablate)
}

fn require(path: &Path) -> Result<(), MapsError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(MapsError::Load { path: path.to_path_buf(), source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file") })
    }
}

fn corpus_files(cfg: &RunConfig) -> Vec<PathBuf> {
    let dir = cfg.path("paths.corpus_dir");
    [USERS_FILE, ITEMS_FILE, INTERACTIONS_FILE].iter().map(|f| dir.join(f)).collect()
}

struct Prepared {
    corpus: InteractionCorpus,
    split: ChronoSplit,
}

fn prepared(cfg: &RunConfig, manifest: &mut RunManifest) -> anyhow::Result<Prepared> {
    for f in corpus_files(cfg) {
        require(&f)?;
        manifest.input(&f)?;
    }
    let raw = load_corpus(cfg.path("paths.corpus_dir"))?;
    let corpus = filter_min_interactions(&raw, cfg.usize("data.min_interactions"))?;
    let split = chronological_split(&corpus, cfg.split_spans())?;
    manifest.note(
        "corpus",
        json!({
            "users": corpus.users().len(),
            "items": corpus.items().len(),
            "sessions": corpus.sessions().len(),
            "consultations": corpus.consultations().len(),
            "dropped_users": raw.users().len() - corpus.users().len(),
            "train_sessions": split.train.len(),
            "val_sessions": split.val.len(),
            "test_sessions": split.test.len(),
        }),
    );
    Ok(Prepared { corpus, split })
}

fn store(cfg: &RunConfig, manifest: &mut RunManifest) -> anyhow::Result<TokenEmbeddingStore> {
    let (e, v) = (cfg.path("paths.embeddings"), cfg.path("paths.vocab"));
    require(&e)?;
    require(&v)?;
    manifest.input(&e)?;
    manifest.input(&v)?;
    Ok(TokenEmbeddingStore::load(&e, &v)?)
}

fn mapping(cfg: &RunConfig, p: &Prepared, store: &TokenEmbeddingStore) -> TokenItemMapping {
    let train_corpus = p.split.train_corpus(&p.corpus);
    build_mapping(&train_corpus, store, cfg.i64("ga.threshold_t"), &collection_rule(cfg.u64("ga.window_days")))
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &serde_json::Value, manifest: &mut RunManifest) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    manifest.output(path)?;
    Ok(())
}

fn prepare(cfg: &RunConfig, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let p = prepared(cfg, manifest)?;
    let dir = out_dir(cfg)?;
    let corpus_dir = dir.join("corpus");
    write_corpus(&p.corpus, &corpus_dir)?;
    for f in [USERS_FILE, ITEMS_FILE, INTERACTIONS_FILE] {
        manifest.output(&corpus_dir.join(f))?;
    }
    let split = json!({
        "origin": p.split.origin,
        "train": p.split.train,
        "val": p.split.val,
        "test": p.split.test,
        "train_consultations": p.split.train_consultations,
        "val_consultations": p.split.val_consultations,
        "test_consultations": p.split.test_consultations,
    });
    write_json(&dir.join("split.json"), &split, manifest)?;
    println!(
        "prepared {} users, {} sessions ({} train, {} val, {} test)",
        p.corpus.users().len(),
        p.corpus.sessions().len(),
        p.split.train.len(),
        p.split.val.len(),
        p.split.test.len()
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let p = prepared(cfg, manifest)?;
    let store = store(cfg, manifest)?;
    let map = mapping(cfg, &p, &store);
    let dir = out_dir(cfg)?;
    let map_path = dir.join("token_item_map.tsv");
    map.write_tsv(&map_path, &store, &p.corpus)?;
    manifest.output(&map_path)?;
    let mut model = MapsModel::for_corpus(cfg.model_config(), &p.corpus, store.dim(), cfg.seed())?;
    let data = TrainData { corpus: &p.corpus, store: &store, train: &p.split.train, val: &p.split.val, mapping: &map };
    let metrics_path = dir.join("metrics.json");
    let before = store.checksum();
    let result = train(&mut model, &data, &cfg.train_config(), Some(&metrics_path));
    debug_assert_eq!(before, store.checksum());
    let ck_path = cfg.checkpoint_path();
    if let Some(parent) = ck_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    match result {
        Ok(outcome) => {
            let best = BestRecord { epoch: outcome.best_epoch, val_ndcg10: outcome.best_val_ndcg10 };
            Checkpoint::from_model(&model, Some(best)).save(&ck_path)?;
            manifest.output(&ck_path)?;
            manifest.output(&metrics_path)?;
            manifest.note(
                "training",
                json!({
                    "epochs_run": outcome.history.len(),
                    "best_epoch": outcome.best_epoch,
                    "best_val_ndcg10": outcome.best_val_ndcg10,
                    "mapping_pairs": map.len(),
                }),
            );
            println!(
                "trained {} epochs, best epoch {} (val NDCG@10 {}), checkpoint {}",
                outcome.history.len(),
                outcome.best_epoch,
                outcome.best_val_ndcg10.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                ck_path.display()
            );
            Ok(())
        }
        Err(e @ MapsError::Diverged { .. }) => {
            Checkpoint::from_model(&model, None).save(&ck_path)?;
            log::error!("training diverged; last good parameters saved to {}", ck_path.display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn evaluate_cmd(cfg: &RunConfig, ablate: &[(String, String)], manifest: &mut RunManifest) -> anyhow::Result<()> {
    let ck_path = cfg.checkpoint_path();
    require(&ck_path)?;
    manifest.input(&ck_path)?;
    let ck = Checkpoint::load(&ck_path)?;
    let ck_hash = ck.sha256()?;
    let mut model = ck.into_model()?;
    for (k, v) in ablate {
        model.set_ablation(k, v)?;
    }
    let p = prepared(cfg, manifest)?;
    let store = store(cfg, manifest)?;
    let inputs = model.inputs(&p.corpus, &store)?;
    let part = match cfg.get("eval.split") {
        "train" => SplitPart::Train,
        "val" => SplitPart::Val,
        _ => SplitPart::Test,
    };
    let sessions = p.split.sessions(part);
    let scorer = ModelScorer::new(&model, &inputs);
    let mut report = evaluate(&scorer, &p.corpus, sessions, cfg.u64("eval.seed"))?;
    report.metadata.checkpoint_sha256 = Some(ck_hash);
    let dir = out_dir(cfg)?;
    let path = dir.join("report.json");
    report.write(&path)?;
    manifest.output(&path)?;
    println!(
        "{} sessions: HR@10 {:.4} NDCG@10 {:.4} MRR@10 {:.4}",
        sessions.len(),
        report.metric("HR@10"),
        report.metric("NDCG@10"),
        report.metric("MRR@10")
    );
    Ok(())
}

fn analyze(cfg: &RunConfig, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let p = prepared(cfg, manifest)?;
    let report = proportion_grid(&p.corpus, &DEFAULT_WINDOWS_DAYS, &RelevanceLevel::ALL, cfg.bool("consult.per_term_lenient"));
    let dir = out_dir(cfg)?;
    write_json(&dir.join("consultation_report.json"), &serde_json::to_value(&report)?, manifest)?;
    for c in &report.cells {
        println!(
            "{:>3}d {:<8} {}",
            c.window_days,
            c.level.name(),
            c.proportion.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn synthesize(cfg: &RunConfig, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let data = generate_synthetic(&cfg.synth_config(), cfg.seed())?;
    let dir = cfg.path("paths.corpus_dir");
    write_corpus(&data.corpus, &dir)?;
    let links = dir.join(LINKS_FILE);
    write_links(&data.links, &links)?;
    let (e, v) = (cfg.path("paths.embeddings"), cfg.path("paths.vocab"));
    for path in [&e, &v] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
    }
    data.store.write(&e, &v)?;
    for f in corpus_files(cfg).iter().chain([&links, &e, &v]) {
        manifest.output(f)?;
    }
    println!(
        "generated {} users, {} items, {} searches, {} consultations in {}",
        data.corpus.users().len(),
        data.corpus.items().len(),
        data.corpus.sessions().len(),
        data.corpus.consultations().len(),
        dir.display()
    );
    Ok(())
}

fn export_mapping(cfg: &RunConfig, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let p = prepared(cfg, manifest)?;
    let store = store(cfg, manifest)?;
    let map = mapping(cfg, &p, &store);
    let path = out_dir(cfg)?.join("token_item_map.tsv");
    map.write_tsv(&path, &store, &p.corpus)?;
    manifest.output(&path)?;
    println!("{} token-item pairs (t = {}) written to {}", map.len(), cfg.i64("ga.threshold_t"), path.display());
    Ok(())
}

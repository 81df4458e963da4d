use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use asymrec::data::{load_embeddings, load_interactions, save_embeddings, save_interactions, synth_dataset, EmbeddingTable, InteractionDataset};
use asymrec::eval::{self, bins_csv, normalized_spectrum, rrf_fuse, spectrum_csv, write_report};
use asymrec::mhq::{self, SemanticCode};
use asymrec::recmodel::{self, load_checkpoint, save_checkpoint, save_predictions, sha256, Catalog, Checkpoint, ModelShape, RecModel};
use asymrec::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::Manifest;

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file {} does not exist", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn embeddings_path(cfg: &RunConfig) -> PathBuf {
    cfg.path("embeddings", "embeddings.aemb")
}

fn interactions_path(cfg: &RunConfig) -> PathBuf {
    cfg.path("interactions", "interactions.tsv")
}

fn codebooks_path(cfg: &RunConfig) -> PathBuf {
    cfg.path("codebooks", "codebooks.mhq")
}

fn codes_path(cfg: &RunConfig) -> PathBuf {
    cfg.path("codes", "codes.tsv")
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let sc = cfg.synth()?;
    sc.validate()?;
    ensure_out_dir(cfg)?;
    let out = synth_dataset(&sc)?;
    let (e, i) = (embeddings_path(cfg), interactions_path(cfg));
    save_embeddings(&out.embeddings, &e)?;
    save_interactions(&out.dataset, &i)?;
    info!(
        "wrote {} items and {} users ({} interactions)",
        out.embeddings.n_items(),
        out.dataset.users().len(),
        out.dataset.total_interactions()
    );
    let mut m = Manifest::default();
    m.output(e);
    m.output(i);
    m.write("synth", cfg)?;
    Ok(())
}

pub fn train_mhq(cfg: &RunConfig) -> Result<()> {
    let e = embeddings_path(cfg);
    require(&e, "embeddings")?;
    let mc = cfg.mhq()?;
    ensure_out_dir(cfg)?;
    let table = load_embeddings(&e)?;
    let (cb, log) = mhq::train(&mc, &table)?;
    let snap = codebooks_path(cfg);
    mhq::save_codebooks(&cb, &snap)?;
    let mut csv = String::from("epoch,rec,bal,reg,total,reseeded\n");
    for ep in &log.epochs {
        let _ = writeln!(
            csv,
            "{},{:?},{:?},{:?},{:?},{}",
            ep.epoch, ep.rec, ep.bal, ep.reg, ep.total, ep.reseeded
        );
    }
    let loss = cfg.out_dir().join("mhq_loss.csv");
    write_text(&loss, &csv)?;
    let mut m = Manifest::default();
    m.input(e);
    m.output(snap);
    m.output(loss);
    m.write("train-mhq", cfg)?;
    Ok(())
}

pub fn assign(cfg: &RunConfig) -> Result<()> {
    let (e, snap) = (embeddings_path(cfg), codebooks_path(cfg));
    require(&e, "embeddings")?;
    require(&snap, "codebook snapshot")?;
    ensure_out_dir(cfg)?;
    let table = load_embeddings(&e)?;
    let cb = mhq::load_codebooks(&snap)?;
    let codes = mhq::assign_all(&cb, &table)?;
    let codes_out = codes_path(cfg);
    mhq::save_codes(&codes, &codes_out)?;

    let report = mhq::collision_report(&codes);
    let mut text = format!(
        "items\t{}\nunique_count\t{}\ncolliding_items\t{}\ngroups\t{}\n",
        codes.len(),
        report.unique_count,
        report.colliding_items(),
        report.groups.len()
    );
    for g in &report.groups {
        let ids: Vec<String> = g.iter().map(usize::to_string).collect();
        let _ = writeln!(text, "group\t{}", ids.join(","));
    }
    let coll = cfg.out_dir().join("collisions.tsv");
    write_text(&coll, &text)?;

    let util = mhq::codebook_utilization(&cb, &table)?;
    let mut csv = String::from("subspace,level,utilization\n");
    for (j, u) in util.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{:?}", j / cb.levels, j % cb.levels, u);
    }
    let util_path = cfg.out_dir().join("utilization.csv");
    write_text(&util_path, &csv)?;
    info!(
        "{} of {} items have unique codes",
        report.unique_count,
        codes.len()
    );

    let mut m = Manifest::default();
    m.input(e);
    m.input(snap);
    m.output(codes_out);
    m.output(coll);
    m.output(util_path);
    m.write("assign", cfg)?;
    Ok(())
}

/// Loads the corpus plus whatever code artifacts the variant needs.
struct Inputs {
    table: EmbeddingTable,
    dataset: InteractionDataset,
    codes: Vec<SemanticCode>,
    codebook_size: usize,
    mhq_hash: [u8; 32],
    used: Vec<PathBuf>,
}

fn load_inputs(cfg: &RunConfig, needs_codes: bool) -> Result<Inputs> {
    let (e, i) = (embeddings_path(cfg), interactions_path(cfg));
    require(&e, "embeddings")?;
    require(&i, "interactions")?;
    let mut used = vec![e.clone(), i.clone()];
    let (snap, codes_file) = (codebooks_path(cfg), codes_path(cfg));
    if needs_codes {
        require(&snap, "codebook snapshot")?;
        require(&codes_file, "codes")?;
        used.push(snap.clone());
        used.push(codes_file.clone());
    }
    let table = load_embeddings(&e)?;
    let dataset = load_interactions(&i, table.n_items())?;
    let (codes, codebook_size, mhq_hash) = if needs_codes {
        let bytes = std::fs::read(&snap).map_err(|source| Error::Io {
            path: snap.clone(),
            source,
        })?;
        let cb = mhq::load_codebooks(&snap)?;
        let codes = mhq::load_codes(&codes_file)?;
        if codes.len() != table.n_items() {
            return Err(Error::Format {
                path: codes_file,
                offset: 0,
                message: format!("{} codes for {} items", codes.len(), table.n_items()),
            });
        }
        if let Some(c) = codes.iter().find(|c| {
            c.len() != cb.code_len() || c.indices().iter().any(|&t| t >= cb.codebook_size())
        }) {
            return Err(Error::Format {
                path: codes_file,
                offset: 0,
                message: format!("code {:?} does not fit the codebooks", c.indices()),
            });
        }
        (codes, cb.codebook_size(), sha256(&bytes))
    } else {
        (Vec::new(), 0, [0u8; 32])
    };
    Ok(Inputs {
        table,
        dataset,
        codes,
        codebook_size,
        mhq_hash,
        used,
    })
}

pub fn train_rec(cfg: &RunConfig) -> Result<()> {
    let rc = cfg.rec()?;
    let needs_codes = rc.variant.uses_codes_out() || rc.variant == recmodel::Variant::DiscreteInput;
    let inp = load_inputs(cfg, needs_codes)?;
    ensure_out_dir(cfg)?;
    let shape = ModelShape {
        input_dim: inp.table.dim(),
        code_len: inp.codes.first().map_or(0, SemanticCode::len),
        codebook_size: inp.codebook_size,
    };
    let catalog = Catalog::new(&inp.table, &inp.codes);
    let (model, log) = recmodel::train(&rc, shape, &inp.dataset, &catalog)?;
    let ckpt_path = cfg.checkpoint_path()?;
    save_checkpoint(
        &Checkpoint {
            model,
            mhq_hash: inp.mhq_hash,
        },
        &ckpt_path,
    )?;
    let mut csv = String::from("epoch,train_loss,valid_ndcg10\n");
    for ep in &log.epochs {
        let _ = writeln!(csv, "{},{:?},{:?}", ep.epoch, ep.train_loss, ep.valid_ndcg10);
    }
    let log_path = cfg.out_dir().join(format!("rec_log-{}.csv", rc.variant));
    write_text(&log_path, &csv)?;
    info!(
        "best epoch {} with validation ndcg@10 {:.4}",
        log.best_epoch, log.best_valid_ndcg10
    );
    let mut m = Manifest::default();
    for p in inp.used {
        m.input(p);
    }
    m.output(ckpt_path);
    m.output(log_path);
    m.write("train-rec", cfg)?;
    Ok(())
}

/// Loads a checkpoint plus matching inputs, checking the codebook reference.
fn load_model(cfg: &RunConfig) -> Result<(RecModel, Inputs, PathBuf)> {
    let ckpt_path = cfg.checkpoint_path()?;
    require(&ckpt_path, "checkpoint")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let v = ckpt.model.config.variant;
    let needs_codes = v.uses_codes_out() || v == recmodel::Variant::DiscreteInput;
    let inp = load_inputs(cfg, needs_codes)?;
    if needs_codes && inp.mhq_hash != ckpt.mhq_hash {
        return Err(Error::Config(format!(
            "checkpoint {} was trained against different codebooks than {}",
            ckpt_path.display(),
            codebooks_path(cfg).display()
        )));
    }
    Ok((ckpt.model, inp, ckpt_path))
}

fn split_name(cfg: &RunConfig) -> &str {
    match cfg.raw("split") {
        "validation" => "valid",
        s => s,
    }
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let split = cfg.split()?;
    let bins = cfg.bins()?;
    let negatives: usize = cfg.get("negatives")?;
    let binned: bool = cfg.get("binned")?;
    let (model, inp, ckpt_path) = load_model(cfg)?;
    ensure_out_dir(cfg)?;
    let catalog = Catalog::new(&inp.table, &inp.codes);
    let result = eval::evaluate(&model, &catalog, &inp.dataset, split, &bins)?;
    let tag = format!("{}-{}", model.config.variant, split_name(cfg));
    let dir = cfg.out_dir();
    let report = dir.join(format!("report-{tag}.tsv"));
    write_report(&result.report, &report)?;
    let bins_path = dir.join(format!("bins-{tag}.csv"));
    write_text(&bins_path, &bins_csv(&result.report.bins))?;
    let preds = dir.join(format!("predictions-{tag}.tsv"));
    save_predictions(&result.predictions, &preds)?;
    info!(
        "{} users: recall@10 {:.4} ndcg@10 {:.4}",
        result.report.users, result.report.recall10, result.report.ndcg10
    );
    let mut m = Manifest::default();
    m.input(ckpt_path);
    for p in inp.used {
        m.input(p);
    }
    m.output(report);
    m.output(bins_path);
    m.output(preds);
    if binned {
        let reps = model.input_representations(&catalog)?;
        let per_bin = eval::binned_input_retrieval(&reps, &inp.dataset, split, &bins, negatives, cfg.seed()?)?;
        let p = dir.join(format!("input_bins-{tag}.csv"));
        write_text(&p, &bins_csv(&per_bin))?;
        m.output(p);
    }
    m.write("eval", cfg)?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<(u64, Vec<usize>)>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let (u, rest) = line
            .split_once('\t')
            .ok_or_else(|| err("expected user<TAB>ids".into()))?;
        let user = u.trim().parse().map_err(|_| err(format!("bad user id '{u}'")))?;
        let ids = rest
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| err(format!("bad item id '{s}'"))))
            .collect::<Result<Vec<usize>>>()?;
        out.push((user, ids));
    }
    Ok(out)
}

pub fn fuse(cfg: &RunConfig) -> Result<()> {
    let (a, b) = (cfg.raw("fuse_a"), cfg.raw("fuse_b"));
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("fuse needs --fuse_a and --fuse_b prediction files".into()));
    }
    let (a, b) = (PathBuf::from(a), PathBuf::from(b));
    require(&a, "predictions")?;
    require(&b, "predictions")?;
    let k0: f64 = cfg.get("k0")?;
    let top_k: usize = cfg.get("top_k")?;
    ensure_out_dir(cfg)?;
    let la = read_predictions(&a)?;
    let lb = read_predictions(&b)?;
    let mut users: Vec<u64> = la.iter().map(|p| p.0).collect();
    for (u, _) in &lb {
        if !users.contains(u) {
            users.push(*u);
        }
    }
    let find = |l: &[(u64, Vec<usize>)], u: u64| -> Vec<usize> {
        l.iter().find(|p| p.0 == u).map(|p| p.1.clone()).unwrap_or_default()
    };
    let fused: Vec<(u64, Vec<usize>)> = users
        .iter()
        .map(|&u| {
            let (x, y) = (find(&la, u), find(&lb, u));
            let f = rrf_fuse(&[&x, &y], k0);
            (u, f.into_iter().take(top_k).map(|p| p.0).collect())
        })
        .collect();
    let out = cfg.out_dir().join("fused.tsv");
    save_predictions(&fused, &out)?;
    let mut m = Manifest::default();
    m.input(a);
    m.input(b);
    m.output(out);
    m.write("fuse", cfg)?;
    Ok(())
}

pub fn spectrum(cfg: &RunConfig) -> Result<()> {
    let split = cfg.split()?;
    let (model, inp, ckpt_path) = load_model(cfg)?;
    ensure_out_dir(cfg)?;
    let catalog = Catalog::new(&inp.table, &inp.codes);
    let contexts: Vec<&[usize]> = inp
        .dataset
        .users()
        .iter()
        .filter_map(|u| u.context(split).map(|c| c.0))
        .collect();
    let z = model.final_hidden(&catalog, &contexts)?;
    let norm = normalized_spectrum(&z)?;
    let er = eval::effective_rank(&z)?;
    let tag = format!("{}-{}", model.config.variant, split_name(cfg));
    let dir = cfg.out_dir();
    let csv = dir.join(format!("spectrum-{tag}.csv"));
    write_text(&csv, &spectrum_csv(&norm))?;
    let summary = dir.join(format!("effective_rank-{tag}.tsv"));
    write_text(
        &summary,
        &format!("effective_rank\t{er:?}\nrows\t{}\ncols\t{}\n", z.rows(), z.cols()),
    )?;
    info!("effective rank {er:.3} over {} contexts", z.rows());
    let mut m = Manifest::default();
    m.input(ckpt_path);
    for p in inp.used {
        m.input(p);
    }
    m.output(csv);
    m.output(summary);
    m.write("spectrum", cfg)?;
    Ok(())
}

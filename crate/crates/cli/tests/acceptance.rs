//! End-to-end acceptance checks. Runs every criterion in order and prints
//! one PASS/FAIL line each; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use asymrec::data::{synth_dataset, EmbeddingTable, FrequencyBins, InteractionDataset, Split, SynthConfig, UserSequence};
use asymrec::eval::{self, effective_rank, ndcg_at_k, recall_at_k, rrf_fuse, RRF_K0};
use asymrec::mhq::{self, losses, objective, Codebook, CodebookSet, MhqConfig, SemanticCode, EMA_EPSILON};
use asymrec::msp::MspParams;
use asymrec::nn::{normal, Parameterized};
use asymrec::numerics::{check_gradients, finite_difference_check, GradCheckReport, GradientTape, Matrix, Var};
use asymrec::oracle;
use asymrec::recmodel::{self, training_samples, Catalog, ModelShape, RecConfig, RecModel, Variant};
use asymrec_cli::manifest::{file_digest, output_digests};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- gradients

fn check_model<M, F>(model: &M, loss: F) -> GradCheckReport
where
    M: Parameterized + Clone,
    F: Fn(&M, &mut GradientTape) -> Var,
{
    let mut tape = GradientTape::new();
    let l = loss(model, &mut tape);
    let grads = tape.backward(l).unwrap();
    let analytic = model.gradients(&tape, &grads);
    let params: Vec<Matrix> = model.parameters().into_iter().map(|(_, p)| p.clone()).collect();
    let value = |ps: &[Matrix]| {
        let mut m = model.clone();
        for (dst, src) in m.parameters_mut().into_iter().zip(ps) {
            *dst = src.clone();
        }
        let mut t = GradientTape::new();
        let l = loss(&m, &mut t);
        t.value(l).item()
    };
    check_gradients(value, &analytic, &params, 1e-5, 1e-4)
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);

    // (a) projection, with codeword choice frozen at the current W.
    let x = normal(&mut rng, 16, 8, 1.0);
    let table = EmbeddingTable::new(x.clone()).unwrap();
    let cfg = MhqConfig { dim: 6, subspaces: 2, levels: 2, codebook_size: 4, epochs: 2, batch: 8, seed: 3, ..Default::default() };
    let (cb, _) = mhq::train(&cfg, &table).unwrap();
    let zhat = Matrix::from_rows(
        &(0..16)
            .map(|i| mhq::reconstruct(&cb, &mhq::assign_code(&cb, x.row(i)).unwrap()))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let a = finite_difference_check(
        |t, v| objective(t, v[0], &x, &zhat, 2, 0.1, 0.1).total,
        &[cb.projection.clone()],
        1e-5,
        1e-4,
    );

    // (b) experts and gate.
    let msp = MspParams::new(&mut rng, 6, 5, 3).unwrap();
    let xin = normal(&mut rng, 7, 6, 1.0);
    let w = normal(&mut rng, 7, 5, 1.0);
    let b = check_model(&msp, |m, t| {
        let xv = t.constant(xin.clone());
        let y = m.forward(t, xv);
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv);
        t.sum(p)
    });

    // (c) cross-entropy through a tiny decoder: d_m 8, 2 layers, T 3, M 2, L 2, K 5.
    let rc = RecConfig { d_m: 8, layers: 2, heads: 2, max_len: 3, dropout: 0.0, experts: 2, ..Default::default() };
    let shape = ModelShape { input_dim: 4, code_len: 4, codebook_size: 5 };
    let model = RecModel::new(&rc, shape).unwrap();
    let emb = EmbeddingTable::new(normal(&mut rng, 6, 4, 1.0)).unwrap();
    let codes: Vec<SemanticCode> = (0..6)
        .map(|i| SemanticCode(vec![i % 5, (i * 2) % 5, (i + 1) % 5, (i * 3 + 2) % 5]))
        .collect();
    let ds = InteractionDataset::new(
        6,
        vec![
            UserSequence { user_id: 1, items: vec![0, 3, 5, 1, 2, 4] },
            UserSequence { user_id: 2, items: vec![2, 2, 4, 0, 1] },
        ],
    )
    .unwrap();
    let cat = Catalog::new(&emb, &codes);
    let samples = training_samples(&ds, 3, true);
    let c = check_model(&model, |m, t| m.loss(t, &cat, &samples).unwrap());

    let el = t0.elapsed();
    let worst = a.max_relative_error.max(b.max_relative_error).max(c.max_relative_error);
    outcome(
        a.passed && b.passed && c.passed && el < Duration::from_secs(60),
        format!(
            "max rel err projection {:.2e}, msp {:.2e}, decoder {:.2e} (worst {:.2e} < 1e-4) in {:.1?}",
            a.max_relative_error, b.max_relative_error, c.max_relative_error, worst, el
        ),
    )
}

// ---------------------------------------------------------------- EMA

fn ema_invariant() -> Outcome {
    let table = synth_dataset(&SynthConfig { n_items: 200, dim: 32, n_users: 50, ..Default::default() })
        .unwrap()
        .embeddings;
    let cfg = MhqConfig { dim: 16, subspaces: 4, levels: 2, codebook_size: 16, epochs: 5, batch: 32, seed: 1, ..Default::default() };
    let mut worst = 0.0f64;
    let mut steps = 0;
    mhq::train_observed(&cfg, &table, |_, _, cb| {
        steps += 1;
        for book in &cb.books {
            for k in 0..book.size() {
                let denom = book.ema_count[k] + EMA_EPSILON;
                for (c, m) in book.centroids.row(k).iter().zip(book.ema_sum.row(k)) {
                    let want = m / denom;
                    let rel = if want == 0.0 { c.abs() } else { (c - want).abs() / want.abs() };
                    worst = worst.max(rel);
                }
            }
        }
    })
    .unwrap();

    // γ = 0 on a single code: N = B, so c = Σr/(B+ε); B = 4000 keeps ε/B below 1e-9.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = normal(&mut rng, 4000, 4, 1.0);
    let mut book = Codebook::zeros(1, 4);
    book.ema_step(0.0, &vec![0; 4000], &r).unwrap();
    let mut toy = 0.0f64;
    for j in 0..4 {
        let mean = (0..4000).map(|i| r.get(i, j)).sum::<f64>() / 4000.0;
        toy = toy.max((book.centroids.get(0, j) - mean).abs() / mean.abs());
    }
    outcome(
        worst <= 1e-9 && toy <= 1e-9 && steps > 0,
        format!("max rel deviation {worst:.2e} over {steps} steps; gamma=0 toy rel err {toy:.2e}"),
    )
}

// ---------------------------------------------------------------- loss identities

fn loss_identities() -> Outcome {
    let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 2.0, 2.0, 0.0], vec![3.0, 0.0, 0.0, 3.0]]).unwrap();
    let mut books = Vec::new();
    for m in 0..2 {
        books.push(Codebook::from_centroids(x.slice_cols(2 * m, 2)));
        books.push(Codebook::from_centroids(Matrix::zeros(3, 2)));
    }
    let cb = CodebookSet::new(Matrix::identity(4), 2, 2, books).unwrap();
    let l = losses(&cb, &x, 0.01, 0.01).unwrap();
    outcome(
        l.bal == 0.0 && l.reg < 1e-9 && l.rec == 0.0,
        format!("L_bal {:e}, L_reg {:e}, L_rec {:e}", l.bal, l.reg, l.rec),
    )
}

// ---------------------------------------------------------------- MHQ vs PQ

fn mhq_beats_pq() -> Outcome {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let table = synth_dataset(&SynthConfig { seed, n_items: 5000, dim: 64, n_users: 10, ..Default::default() })
            .unwrap()
            .embeddings;
        let base = MhqConfig { dim: 48, epochs: 5, batch: 256, codebook_size: 256, seed, ..Default::default() };
        let mse = |m: usize, l: usize| {
            let cfg = MhqConfig { subspaces: m, levels: l, ..base.clone() };
            let (cb, _) = mhq::train(&cfg, &table).unwrap();
            losses(&cb, table.matrix(), 0.0, 0.0).unwrap().rec
        };
        let (h, p) = (mse(8, 3), mse(24, 1));
        pass &= h < p;
        lines.push(format!("seed {seed}: {h:.5} vs {p:.5}"));
    }
    let el = t0.elapsed();
    outcome(
        pass && el < Duration::from_secs(600),
        format!("MSE MHQ(8x3) vs PQ(24x1): {} in {:.1?}", lines.join(", "), el),
    )
}

// ---------------------------------------------------------------- collisions

fn collision_property() -> Outcome {
    let t0 = Instant::now();
    let table = synth_dataset(&SynthConfig { n_items: 12_000, dim: 64, n_users: 10, ..Default::default() })
        .unwrap()
        .embeddings;
    let cfg = MhqConfig { dim: 512, subspaces: 32, levels: 2, codebook_size: 256, epochs: 2, batch: 256, ..Default::default() };
    let (cb, _) = mhq::train(&cfg, &table).unwrap();
    let codes = mhq::assign_all(&cb, &table).unwrap();
    let rep = mhq::collision_report(&codes);
    let frac = rep.unique_count as f64 / codes.len() as f64;
    outcome(
        frac >= 0.999,
        format!("{}/{} unique ({:.4}%) in {:.1?}", rep.unique_count, codes.len(), 100.0 * frac, t0.elapsed()),
    )
}

// ---------------------------------------------------------------- pipeline via the binary

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_asymrec")
}

fn run_cli(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Result<(), String> {
    let o = Command::new(bin())
        .arg(cmd)
        .arg("-c")
        .arg(config)
        .arg("--out_dir")
        .arg(out)
        .args(extra)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{cmd} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)))
    }
}

/// Corpus and model sizes shared by the overfit, collapse and ablation checks.
const FIXTURE: &str = "\
n_items = 100
n_users = 500
dim = 32
clusters = 10
stay_prob = 0.95
mhq_dim = 16
subspaces = 4
levels = 2
codebook_size = 16
mhq_epochs = 20
mhq_batch = 64
d_m = 64
heads = 4
layers = 2
max_len = 20
dropout = 0
lr = 0.003
batch = 32
max_epochs = 40
patience = 40
experts = 3
";

fn report_value(path: &Path, key: &str) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN)
}

fn overfit_smoke(dir: &Path) -> Outcome {
    let t0 = Instant::now();
    let cfg = dir.join("fixture.conf");
    std::fs::write(&cfg, FIXTURE).unwrap();
    let out = dir.join("overfit");
    let steps: [(&str, &[&str]); 5] = [
        ("synth", &[]),
        ("train-mhq", &[]),
        ("assign", &[]),
        ("train-rec", &[]),
        ("eval", &["--split", "train"]),
    ];
    for (cmd, extra) in steps {
        if let Err(e) = run_cli(cmd, &cfg, &out, extra) {
            return outcome(false, e);
        }
    }
    if let Err(e) = run_cli("eval", &cfg, &out, &["--split", "test"]) {
        return outcome(false, e);
    }
    let train = report_value(&out.join("report-full-train.tsv"), "recall@10");
    let test = report_value(&out.join("report-full-test.tsv"), "recall@10");
    let el = t0.elapsed();
    outcome(
        train >= 0.9 && test >= 3.0 * 0.1 && el < Duration::from_secs(900),
        format!("train recall@10 {train:.3} (>= 0.9), test recall@10 {test:.3} (>= 0.3) in {el:.1?}"),
    )
}

// ---------------------------------------------------------------- variants

struct VariantRun {
    ndcg10: f64,
    effective_rank: f64,
    hidden: Matrix,
}

fn fixture_synth(seed: u64) -> SynthConfig {
    SynthConfig { seed, n_items: 100, dim: 32, n_users: 500, cluster_count: 10, stay_prob: 0.95, ..Default::default() }
}

fn train_variants(seeds: u64) -> BTreeMap<(u64, &'static str), VariantRun> {
    let mut runs = BTreeMap::new();
    for seed in 0..seeds {
        let data = synth_dataset(&fixture_synth(seed)).unwrap();
        let mcfg = MhqConfig { dim: 16, subspaces: 4, levels: 2, codebook_size: 16, epochs: 20, batch: 64, seed, ..Default::default() };
        let (cb, _) = mhq::train(&mcfg, &data.embeddings).unwrap();
        let codes = mhq::assign_all(&cb, &data.embeddings).unwrap();
        let cat = Catalog::new(&data.embeddings, &codes);
        let shape = ModelShape { input_dim: 32, code_len: 8, codebook_size: 16 };
        for v in [Variant::Full, Variant::SingleExpert, Variant::DiscreteInput, Variant::ContinuousOutput] {
            let rc = RecConfig {
                d_m: 64,
                heads: 4,
                layers: 2,
                max_len: 20,
                dropout: 0.0,
                lr: 0.003,
                batch: 32,
                max_epochs: 40,
                patience: 40,
                experts: 3,
                variant: v,
                seed,
                ..Default::default()
            };
            let (model, _) = recmodel::train(&rc, shape, &data.dataset, &cat).unwrap();
            let ev = eval::evaluate(&model, &cat, &data.dataset, Split::Test, &FrequencyBins::default()).unwrap();
            let ctx: Vec<&[usize]> = data
                .dataset
                .users()
                .iter()
                .filter_map(|u| u.context(Split::Test).map(|c| c.0))
                .collect();
            let hidden = model.final_hidden(&cat, &ctx).unwrap();
            let er = effective_rank(&hidden).unwrap();
            runs.insert((seed, v.name()), VariantRun { ndcg10: ev.report.ndcg10, effective_rank: er, hidden });
        }
    }
    runs
}

fn collapse_diagnostic(runs: &BTreeMap<(u64, &'static str), VariantRun>) -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    let (mut oracle_err, mut scale_err) = (0.0f64, 0.0f64);
    for seed in 0..3 {
        let (c, f) = (&runs[&(seed, "continuous-output")], &runs[&(seed, "full")]);
        pass &= c.effective_rank < f.effective_rank;
        lines.push(format!("seed {seed}: {:.2} vs {:.2}", c.effective_rank, f.effective_rank));
        for r in [c, f] {
            let o = oracle::effective_rank_from_spectrum(&oracle::singular_values(&r.hidden));
            oracle_err = oracle_err.max((r.effective_rank - o).abs());
            for s in [1e-3, 7.5, 1e3] {
                let er = effective_rank(&r.hidden.scale(s)).unwrap();
                scale_err = scale_err.max((er - r.effective_rank).abs());
            }
        }
    }
    outcome(
        pass && oracle_err < 1e-6 && scale_err < 1e-9,
        format!(
            "ER continuous vs discrete heads: {}; oracle diff {oracle_err:.1e}, scale diff {scale_err:.1e}",
            lines.join(", ")
        ),
    )
}

fn ablation_ordering(runs: &BTreeMap<(u64, &'static str), VariantRun>) -> Outcome {
    let mean = |v: Variant| (0..3).map(|s| runs[&(s, v.name())].ndcg10).sum::<f64>() / 3.0;
    let (f, s, d, c) = (
        mean(Variant::Full),
        mean(Variant::SingleExpert),
        mean(Variant::DiscreteInput),
        mean(Variant::ContinuousOutput),
    );
    outcome(
        f >= s && s >= d && d > c,
        format!("mean ndcg@10 full {f:.4} >= single-expert {s:.4} >= discrete-input {d:.4} > continuous-output {c:.4}"),
    )
}

// ---------------------------------------------------------------- metric oracles

fn metric_oracles() -> Outcome {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.shuffle(&mut rng);
        let target = rng.random_range(0..n + 2);
        let k = rng.random_range(1..20);
        if recall_at_k(&ranked, target, k) != oracle::recall(&ranked, target, k) {
            mismatches += 1;
        }
        if (ndcg_at_k(&ranked, target, k) - oracle::ndcg(&ranked, target, k)).abs() > 1e-12 {
            mismatches += 1;
        }
        let mut other = ranked.clone();
        other.shuffle(&mut rng);
        other.truncate(rng.random_range(0..=n));
        if rrf_fuse(&[&ranked, &other], RRF_K0) != oracle::rrf(&[&ranked, &other], RRF_K0) {
            mismatches += 1;
        }
    }
    let top = rrf_fuse(&[&[7, 1, 2], &[7, 3]], RRF_K0)[0];
    let exact = top == (7, 2.0 / 51.0);
    outcome(
        mismatches == 0 && exact,
        format!("{mismatches} mismatches over 200 instances; rank-1-in-both score {} (2/51 = {})", top.1, 2.0 / 51.0),
    )
}

// ---------------------------------------------------------------- determinism

const SMALL: &str = "\
n_items = 60
n_users = 80
dim = 16
clusters = 6
mhq_dim = 8
subspaces = 2
levels = 2
codebook_size = 8
mhq_epochs = 3
mhq_batch = 32
d_m = 16
heads = 2
layers = 1
max_len = 8
lr = 0.01
batch = 16
max_epochs = 3
patience = 3
experts = 2
binned = true
negatives = 20
";

fn pipeline(cfg: &Path, out: &Path) -> Result<(), String> {
    run_cli("synth", cfg, out, &[])?;
    run_cli("train-mhq", cfg, out, &[])?;
    run_cli("assign", cfg, out, &[])?;
    for v in ["full", "continuous-output"] {
        run_cli("train-rec", cfg, out, &["--variant", v])?;
        run_cli("eval", cfg, out, &["--variant", v])?;
        run_cli("spectrum", cfg, out, &["--variant", v])?;
    }
    let a = out.join("predictions-full-test.tsv");
    let b = out.join("predictions-continuous-output-test.tsv");
    run_cli(
        "fuse",
        cfg,
        out,
        &["--fuse_a", a.to_str().unwrap(), "--fuse_b", b.to_str().unwrap()],
    )
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = dir.join("small.conf");
    std::fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.join("run-a"), dir.join("run-b"));
    for out in [&a, &b] {
        if let Err(e) = pipeline(&cfg, out) {
            return outcome(false, e);
        }
    }
    let (fa, fb) = (files(&a), files(&b));
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    if names(&fa) != names(&fb) {
        return outcome(false, "runs produced different file sets".into());
    }
    let mut differing = Vec::new();
    let mut checked = 0;
    let mut manifests = 0;
    for (pa, pb) in fa.iter().zip(&fb) {
        let name = pa.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("manifest-") {
            manifests += 1;
            // Manifests embed out_dir, so compare their recorded output checksums.
            let (ta, tb) = (std::fs::read_to_string(pa).unwrap(), std::fs::read_to_string(pb).unwrap());
            let (da, db) = (output_digests(&ta), output_digests(&tb));
            let verified = da.iter().all(|(n, h)| file_digest(&a.join(n)).is_ok_and(|d| &d == h));
            if da != db || da.is_empty() || !verified {
                differing.push(name);
            }
        } else {
            checked += 1;
            if std::fs::read(pa).unwrap() != std::fs::read(pb).unwrap() {
                differing.push(name);
            }
        }
    }
    outcome(
        differing.is_empty() && manifests == 7,
        format!("{checked} outputs and {manifests} manifests compared; differing: {differing:?}"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "gradient correctness", gradient_correctness());
    record(2, "EMA invariant", ema_invariant());
    record(3, "loss identities", loss_identities());
    record(4, "MHQ beats flat PQ", mhq_beats_pq());
    record(5, "collision property", collision_property());
    record(6, "overfit smoke test", overfit_smoke(tmp.path()));
    let runs = train_variants(3);
    record(7, "collapse diagnostic", collapse_diagnostic(&runs));
    record(8, "metric oracles", metric_oracles());
    record(9, "ablation ordering", ablation_ordering(&runs));
    record(10, "determinism", determinism(tmp.path()));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria pass{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

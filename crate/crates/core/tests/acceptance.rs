//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line in `cargo test` output; the
//! process exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use contracluster::cps::{sample_prototypes, DrMethod};
use contracluster::cpt::{ntxent_loss, ContrastiveBatch};
use contracluster::eval::{hungarian_accuracy, prototype_accuracy};
use contracluster::numerics::{softmax_xent, Matrix};
use contracluster::pipeline::{Pipeline, PipelineConfig, PipelineMetrics, METRICS};
use contracluster::sft::{consistency_loss, proto_loss, UnlabeledBatchOutput};
use rand::Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t <= limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = common::rng(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pairs = r.random_range(1..5);
        let d = r.random_range(2..6);
        let tau = r.random_range(0.05..1.0);
        let z = common::unit_rows(&common::random_rows(&mut r, 2 * pairs, d, 1.0));
        let (l, _) = ntxent_loss(&ContrastiveBatch::new(matrix(&z)).unwrap(), tau).unwrap();
        worst = worst.max((l - common::ntxent(&z, tau)).abs());

        let (n, k) = (r.random_range(1..8), r.random_range(2..6));
        let q = common::softmax(&common::random_rows(&mut r, n, k, 3.0));
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let (l, _) = proto_loss(&matrix(&q), &y).unwrap();
        worst = worst.max((l - common::xent(&q, &y)).abs());

        let qw = common::softmax(&common::random_rows(&mut r, n, k, 4.0));
        let qs = common::softmax(&common::random_rows(&mut r, n, k, 4.0));
        let c = r.random_range(0.3..1.0);
        let out = UnlabeledBatchOutput::from_probabilities(matrix(&qw), matrix(&qs), c).unwrap();
        let (l, _) = consistency_loss(&out);
        worst = worst.max((l - common::consistency(&qw, &qs, c)).abs());
    }
    let (fast, t) = within(start, Duration::from_secs(10));
    outcome(worst < 1e-9 && fast, format!("max |diff| {worst:.1e}, {t}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for dropout in [0.0, 0.1] {
        worst = worst
            .max(common::grad::ntxent_error(dropout))
            .max(common::grad::proto_error(dropout))
            .max(common::grad::consistency_error(dropout));
    }
    let (fast, t) = within(start, Duration::from_secs(60));
    outcome(worst < 1e-4 && fast, format!("max relative error {worst:.1e}, {t}"))
}

fn closed_forms() -> Outcome {
    let pair = ContrastiveBatch::new(matrix(&[vec![0.6, 0.8], vec![0.0, 1.0]])).unwrap();
    let (b1, _) = ntxent_loss(&pair, 0.5).unwrap();
    let same = ContrastiveBatch::new(matrix(&vec![vec![1.0, 0.0]; 4])).unwrap();
    let (b2, _) = ntxent_loss(&same, 0.5).unwrap();
    let (ce, _) = softmax_xent(&Matrix::zeros(5, 10), &[0, 2, 4, 6, 9]).unwrap();
    let errs = [b1.abs(), (b2 - 3f64.ln()).abs(), (ce - 10f64.ln()).abs()];
    outcome(
        errs.iter().all(|&e| e < 1e-9),
        format!("B=1 {b1:.3e}, identical B=2 {b2:.9}, uniform CE {ce:.9}"),
    )
}

fn clustering_oracles() -> Outcome {
    use contracluster::cps::{kmeans, silhouette};
    let start = Instant::now();
    let mut r = common::rng(104);
    let mut kmeans_ok = 0;
    for _ in 0..50 {
        let n = r.random_range(3..=8);
        let pts = common::random_rows(&mut r, n, 2, 5.0);
        let model = kmeans(&matrix(&pts), 2, 20, r.random()).unwrap();
        let best = common::best_bipartition_inertia(&pts);
        kmeans_ok += usize::from((model.inertia - best).abs() <= 1e-9 * best.max(1.0));
    }
    let mut sil_worst = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(4..30);
        let k = r.random_range(2..5);
        let pts = common::random_rows(&mut r, n, 3, 4.0);
        let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let s = silhouette(&matrix(&pts), &labels).unwrap();
        sil_worst = sil_worst.max((s - common::silhouette(&pts, &labels)).abs());
    }
    let mut hung_ok = 0;
    for _ in 0..50 {
        let k = r.random_range(1..=6);
        let n = r.random_range(1..40);
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let (acc, _) = hungarian_accuracy(&pred, &truth, k).unwrap();
        hung_ok += usize::from((acc - common::accuracy_by_enumeration(&pred, &truth, k)).abs() < 1e-12);
    }
    let (fast, t) = within(start, Duration::from_secs(60));
    outcome(
        kmeans_ok == 50 && sil_worst <= 1e-9 && hung_ok == 50 && fast,
        format!("k-means {kmeans_ok}/50, silhouette max |diff| {sil_worst:.1e}, Hungarian {hung_ok}/50, {t}"),
    )
}

fn preset() -> PipelineConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    PipelineConfig::load(&path).unwrap()
}

#[derive(Clone, Copy)]
enum Variant {
    Full,
    SkipSft,
    Raw,
}

fn run(seed: u64, variant: Variant, threads: Option<usize>) -> (Pipeline, PipelineMetrics, tempfile::TempDir) {
    let mut cfg = preset();
    cfg.seed = seed;
    cfg.threads = threads;
    match variant {
        Variant::Full => {}
        Variant::SkipSft => cfg.ablation.skip_sft = true,
        Variant::Raw => {
            cfg.ablation.skip_cpt = true;
            cfg.ablation.skip_dr = true;
            cfg.ablation.skip_sft = true;
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(cfg).unwrap().with_output(dir.path());
    let m = p.run().unwrap();
    (p, m, dir)
}

struct Desk {
    full: Vec<(f64, f64)>,
    skip_sft: Vec<f64>,
    raw: Vec<f64>,
    /// Purity at N_proto = k, 2k, 10k, n per seed.
    purity: Vec<[f64; 4]>,
    spectral_picks: usize,
    metrics_seed1: Vec<u8>,
    elapsed: Duration,
}

fn desk_runs() -> Desk {
    let start = Instant::now();
    let mut d = Desk {
        full: Vec::new(),
        skip_sft: Vec::new(),
        raw: Vec::new(),
        purity: Vec::new(),
        spectral_picks: 0,
        metrics_seed1: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for seed in SEEDS {
        let (p, m, dir) = run(seed, Variant::Full, None);
        d.full.push((m.report.accuracy, m.report.nmi));
        if seed == SEEDS[0] {
            d.metrics_seed1 = fs::read(dir.path().join(METRICS)).unwrap();
        }

        // prototype purity, scored through the matching of the cluster assignments
        let store = p.load_dataset().unwrap();
        let truth = store.evaluation_labels().unwrap();
        let (sweep, _) = p.in_pool(|| p.sample_prototypes()).unwrap();
        if sweep.best.method == DrMethod::Spectral {
            d.spectral_picks += 1;
        }
        let k = sweep.model.k();
        let (_, matching) = hungarian_accuracy(&sweep.model.assignments, truth, k).unwrap();
        let mut row = [0.0; 4];
        for (slot, n_proto) in [k, 2 * k, 10 * k, truth.len()].into_iter().enumerate() {
            let protos = sample_prototypes(&sweep.z_low, &sweep.model, n_proto).unwrap();
            let proto_truth: Vec<usize> = protos.indices.iter().map(|&i| truth[i]).collect();
            row[slot] = prototype_accuracy(&protos.pseudo_labels, &proto_truth, &matching).unwrap();
        }
        d.purity.push(row);

        d.skip_sft.push(run(seed, Variant::SkipSft, None).1.report.accuracy);
        d.raw.push(run(seed, Variant::Raw, None).1.report.accuracy);
        println!(
            "  seed {seed}: full acc {:.3} nmi {:.3} | skip_sft {:.3} | raw {:.3} | purity {:?} | DR {}",
            m.report.accuracy,
            m.report.nmi,
            d.skip_sft.last().unwrap(),
            d.raw.last().unwrap(),
            row.map(|v| (v * 1000.0).round() / 1000.0),
            sweep.best.method.name(),
        );
    }
    d.elapsed = start.elapsed();
    d
}

fn end_to_end(d: &Desk) -> Outcome {
    let acc = median(d.full.iter().map(|r| r.0).collect());
    let nmi = median(d.full.iter().map(|r| r.1).collect());
    let fast = d.elapsed <= Duration::from_secs(600);
    outcome(
        acc >= 0.95 && nmi >= 0.85 && fast,
        format!("median accuracy {acc:.3}, NMI {nmi:.3}, all ablations {:.0}s", d.elapsed.as_secs_f64()),
    )
}

fn ablations(d: &Desk) -> Outcome {
    let full = median(d.full.iter().map(|r| r.0).collect());
    let skip = median(d.skip_sft.clone());
    let raw = median(d.raw.clone());
    outcome(
        full - skip >= 0.02 && skip - raw >= 0.02,
        format!("median full {full:.3} > skip_sft {skip:.3} > raw {raw:.3}"),
    )
}

fn prototype_quality(d: &Desk) -> Outcome {
    let med: Vec<f64> = (0..4).map(|j| median(d.purity.iter().map(|r| r[j]).collect())).collect();
    let monotone = med.windows(2).all(|w| w[0] >= w[1]);
    outcome(
        med[1] - med[3] >= 0.05 && monotone,
        format!(
            "median purity k {:.3}, 2k {:.3}, 10k {:.3}, n {:.3}",
            med[0], med[1], med[2], med[3]
        ),
    )
}

fn silhouette_selection(d: &Desk) -> Outcome {
    outcome(
        d.spectral_picks >= 2,
        format!("spectral chosen in {}/{} seeds", d.spectral_picks, SEEDS.len()),
    )
}

fn determinism(d: &Desk) -> Outcome {
    let bytes = |threads| {
        let (_, _, dir) = run(SEEDS[0], Variant::Full, Some(threads));
        fs::read(dir.path().join(METRICS)).unwrap()
    };
    let (one, four) = (bytes(1), bytes(4));
    outcome(
        one == four && one == d.metrics_seed1,
        format!("metrics.json identical at 1, 4 and default threads: {}", one == four && one == d.metrics_seed1),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 loss oracles", loss_oracles()),
        ("2 gradient suite", gradient_suite()),
        ("3 closed forms", closed_forms()),
        ("4 clustering oracles", clustering_oracles()),
    ];
    let desk = desk_runs();
    results.push(("5 desk-scale end-to-end", end_to_end(&desk)));
    results.push(("6 ablation directions", ablations(&desk)));
    results.push(("7 prototype quality", prototype_quality(&desk)));
    results.push(("8 silhouette selection", silhouette_selection(&desk)));
    results.push(("9 determinism", determinism(&desk)));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

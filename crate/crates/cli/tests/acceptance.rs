//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use t2ipal::corpus::{self, CategorySet, SynonymMap};
use t2ipal::encoders::{FeatureSet, TextEncoder};
use t2ipal::eval::{self, ModalityGapReport};
use t2ipal::model::{self, HyperParams, PrototypeMatrix};
use t2ipal::numerics::Tensor;
use t2ipal::seed;
use t2ipal::training::{self, Checkpoint, GradcheckOptions, RankingForm, Sgd, TrainConfig};
use t2ipal_cli::{
    cmd_eval, cmd_prepare, cmd_synth, cmd_train, synthesize, EvalArgs, PrepareArgs, SynthArgs, TrainArgs,
};

const TOY_CLASSES: [&str; 8] = ["person", "dog", "cat", "car", "bicycle", "bird", "horse", "boat"];
const ABLATION_SEEDS: u64 = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..20 {
        for check in training::gradient_check(seed, &GradcheckOptions::default()).expect("gradcheck runs") {
            worst = worst.max(check.report.max_rel_error);
            if !check.report.passed {
                failures.push(format!("seed {seed}/{}", check.name));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 10.0,
        format!("20 seeds x 3 tensors, worst rel err {worst:.2e}, {secs:.2}s, failures {failures:?}"),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn brute_force_ranking(scores: &[f64], labels: &[bool], eta: f64) -> f64 {
    let mut total = 0.0;
    for p in 0..scores.len() {
        for n in 0..scores.len() {
            if labels[p] && !labels[n] {
                total += (eta - (scores[p] - scores[n])).max(0.0);
            }
        }
    }
    total
}

fn formula_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut problems = Vec::new();
    for case in 0..500 {
        let (c, n, d) = (rng.random_range(1..7), rng.random_range(1..9), rng.random_range(2..9));
        let scale = 10f64.powi(rng.random_range(-2..4));
        let sim = random_matrix(&mut rng, c, n, scale);
        let tau = rng.random_range(0.005..1.0);
        let h = model::class_heatmap(&sim, tau).unwrap();
        if h.row_iter().any(|r| (r.iter().sum::<f64>() - 1.0).abs() > 1e-10) {
            problems.push(format!("heatmap row sum, case {case}"));
        }
        let agg = model::aggregate_local(&sim, &h).unwrap();
        for i in 0..c {
            let mut direct = 0.0;
            for j in 0..n {
                direct += h.get(i, j) * sim.get(i, j);
            }
            if (agg[i] - direct).abs() > 1e-12 * scale.max(1.0) {
                problems.push(format!("aggregate_local, case {case}"));
            }
        }
        let local = random_matrix(&mut rng, n, d, 1.0);
        let heat = model::class_heatmap(&random_matrix(&mut rng, c, n, 1.0), tau).unwrap();
        let attended = model::attended_features(&heat, &local).unwrap();
        let a = PrototypeMatrix(random_matrix(&mut rng, c, d, 1.0));
        let beta = rng.random_range(0.1..10.0);
        if let Ok(q) = model::adapter_affinity(&attended, &a, beta) {
            if q.iter().any(|&x| x < (-2.0 * beta).exp() * (1.0 - 1e-12) || x > 1.0 + 1e-12) {
                problems.push(format!("affinity bounds, case {case}"));
            }
        }
        let s_local: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let combined = model::combined_logits(&q, &s_local, 0.0).unwrap();
        if combined.iter().zip(&s_local).any(|(x, y)| x.to_bits() != y.to_bits()) {
            problems.push(format!("alpha=0 not bitwise, case {case}"));
        }
        let k = rng.random_range(1..=6);
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
        let eta = rng.random_range(0.0..2.0);
        let l = training::ranking_loss(&scores, &labels, eta, RankingForm::Hinge).unwrap();
        if l != brute_force_ranking(&scores, &labels, eta) {
            problems.push(format!("ranking loss, case {case}"));
        }
    }
    problems.dedup();
    outcome(problems.is_empty(), format!("500 random instances, problems {problems:?}"))
}

fn brute_force_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let outranks = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut terms: Vec<(usize, usize)> = (0..scores.len())
        .filter(|&i| labels[i])
        .map(|i| {
            let rank = 1 + (0..scores.len()).filter(|&j| outranks(j, i)).count();
            let hits = 1 + (0..scores.len()).filter(|&j| labels[j] && outranks(j, i)).count();
            (rank, hits)
        })
        .collect();
    terms.sort_unstable();
    Some(terms.iter().map(|&(rank, hits)| hits as f64 / rank as f64).sum::<f64>() / positives as f64)
}

fn ap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..2000 {
        let n = rng.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if eval::average_precision(&scores, &labels).unwrap() != brute_force_ap(&scores, &labels) {
            mismatches += 1;
        }
    }
    let worked = eval::average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap().unwrap();
    outcome(
        mismatches == 0 && (worked - 5.0 / 6.0).abs() < 1e-15,
        format!("2000 instances, {mismatches} mismatches; worked example AP = {worked:.5}"),
    )
}

fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        d: 64,
        d_tok: 64,
        n_im: 16,
        n_te: 16,
        noise_sigma: 0.3,
        learning_rate: 1e-2,
        epochs: 40,
        ..TrainConfig::default()
    }
}

fn toy_classes() -> CategorySet {
    CategorySet::new(&TOY_CLASSES).unwrap()
}

fn toy_corpus(config: &TrainConfig, count: usize, tag: &str) -> Vec<corpus::CaptionRecord> {
    let classes = toy_classes();
    let captions = corpus::synthetic_captions(&classes, count, 3, &mut seed::stream(config.seed, &format!("captions/{tag}")));
    let filter = corpus::build_noun_filter(&classes, &SynonymMap::new()).unwrap();
    let (records, stats) = corpus::prepare_corpus(&captions, &classes, &filter);
    assert_eq!(stats.kept, count);
    records
}

struct ToyRun {
    untrained: f64,
    trained: f64,
    gap: ModalityGapReport,
    secs: f64,
}

fn toy_run(seed: u64, gamma: f64, alpha: f64, multiplicity: usize) -> ToyRun {
    let start = Instant::now();
    let config = TrainConfig { gamma, alpha, ..toy_config(seed) };
    let classes = toy_classes();
    let train_corpus = toy_corpus(&config, 400, "train");
    let test_corpus = toy_corpus(&config, 200, "test");
    let (image, text) = synthesize(&train_corpus, &classes, &config, multiplicity, "train").unwrap();
    let (test, _) = synthesize(&test_corpus, &classes, &config, 1, "test").unwrap();

    let encoder = TextEncoder::new(&config.encoder_spec()).unwrap();
    let initial = training::init_params(&config, &classes, &encoder).unwrap();
    let untrained_ckpt = Checkpoint::from_params(&config, &classes, &initial).unwrap();
    let untrained = eval::evaluate(&test, &untrained_ckpt, eval::DEFAULT_FUSION_WEIGHT).unwrap().map;

    let trained_run = training::train(&config, &classes, &image, &text).unwrap();
    let trained = eval::evaluate(&test, &trained_run.checkpoint, eval::DEFAULT_FUSION_WEIGHT).unwrap().map;
    let gap = eval::modality_gap_report(&test, &trained_run.checkpoint).unwrap();
    ToyRun { untrained, trained, gap, secs: start.elapsed().as_secs_f64() }
}

fn toy_learning(baseline: &ToyRun) -> Outcome {
    outcome(
        baseline.trained >= 0.95 && baseline.untrained <= 0.60 && baseline.secs < 120.0,
        format!(
            "held-out mAP trained {:.4} (need >= 0.95), untrained {:.4} (need <= 0.60), {:.1}s",
            baseline.trained, baseline.untrained, baseline.secs
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablations(baselines: &[ToyRun]) -> Outcome {
    let base = mean(&baselines.iter().map(|r| r.trained).collect::<Vec<_>>());
    let seeds = 0..ABLATION_SEEDS;
    let no_image = mean(&seeds.clone().map(|s| toy_run(s, 0.0, 1.0, 6).trained).collect::<Vec<_>>());
    let no_adapter = mean(&seeds.clone().map(|s| toy_run(s, 0.2, 0.0, 6).trained).collect::<Vec<_>>());
    let single = mean(&seeds.map(|s| toy_run(s, 0.2, 1.0, 1).trained).collect::<Vec<_>>());
    outcome(
        base >= no_image && base >= no_adapter && base >= single,
        format!(
            "mean over {ABLATION_SEEDS} seeds: default {base:.4}; gamma=0 {no_image:.4}; alpha=0 {no_adapter:.4}; K=1 {single:.4}"
        ),
    )
}

fn modality_gap(baselines: &[ToyRun]) -> Outcome {
    let rows: Vec<String> =
        baselines.iter().map(|r| format!("{:.3}->{:.3}", r.gap.raw, r.gap.attended)).collect();
    outcome(
        baselines.len() >= 5 && baselines.iter().all(|r| r.gap.attended > r.gap.raw),
        format!("raw->attended cosine per seed: {}", rows.join(", ")),
    )
}

fn pipeline(dir: &Path) {
    let captions = corpus::synthetic_captions(&toy_classes(), 60, 3, &mut seed::stream(11, "pipeline"));
    fs::write(dir.join("captions.txt"), captions.join("\n")).unwrap();
    fs::write(dir.join("classes.txt"), TOY_CLASSES.join("\n")).unwrap();
    let config = TrainConfig { epochs: 3, ..toy_config(11) };
    fs::write(dir.join("config.json"), config.to_json_pretty()).unwrap();
    let p = |name: &str| dir.join(name);
    cmd_prepare(&PrepareArgs { captions: p("captions.txt"), classes: p("classes.txt"), synonyms: None, out: p("corpus.jsonl") })
        .unwrap();
    let synth = |out: &str, k: usize, split: &str| {
        cmd_synth(&SynthArgs {
            corpus: p("corpus.jsonl"),
            config: p("config.json"),
            classes: p("classes.txt"),
            multiplicity: k,
            out: p(out),
            text_out: None,
            split: split.into(),
        })
        .unwrap()
    };
    synth("train.t2if", 6, "train");
    synth("test.t2if", 1, "test");
    cmd_train(&TrainArgs {
        config: p("config.json"),
        classes: p("classes.txt"),
        text_features: Some(p("train.t2if.text")),
        image_features: Some(p("train.t2if")),
        out: p("model.t2ic"),
        gamma: None,
    })
    .unwrap();
    cmd_eval(&EvalArgs {
        checkpoint: p("model.t2ic"),
        features: p("test.t2if"),
        out: p("report.json"),
        fusion_weight: eval::DEFAULT_FUSION_WEIGHT,
        gap_out: None,
    })
    .unwrap();
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let artifacts =
        ["corpus.jsonl", "train.t2if", "train.t2if.text", "test.t2if", "model.t2ic", "model.t2ic.log.jsonl", "report.json", "report.json.scores"];
    let differing: Vec<&str> = artifacts
        .iter()
        .copied()
        .filter(|f| fs::read(a.path().join(f)).unwrap() != fs::read(b.path().join(f)).unwrap())
        .collect();
    outcome(differing.is_empty(), format!("{} artifacts compared, differing {differing:?}", artifacts.len()))
}

fn adapter_additivity() -> Outcome {
    let classes = toy_classes();
    let mut bad = Vec::new();
    for (seed, gamma) in [(0u64, 0.2), (1, 0.5), (2, 0.9)] {
        let config = TrainConfig { gamma, epochs: 1, ..toy_config(seed) };
        let records = toy_corpus(&config, 8, "additivity");
        let (image, text) = synthesize(&records, &classes, &config, 1, "additivity").unwrap();
        let frozen = training::frozen_model::<f64>(&config, &classes).unwrap();
        let mut params = training::init_params(&config, &classes, &frozen.encoder).unwrap();
        let before = params.prototypes.clone();
        let image_batch: Vec<&FeatureSet<f64>> = image.iter().collect();
        let text_batch: Vec<&FeatureSet<f64>> = text.iter().collect();
        let pass = frozen.class_pass(&params).unwrap();
        let g_image = training::branch_gradient(&params, &frozen, &pass, &image_batch).unwrap().grads.prototypes;
        let g_text = training::branch_gradient(&params, &frozen, &pass, &text_batch).unwrap().grads.prototypes;
        let joint = training::joint_gradient(&params, &frozen, &image_batch, &text_batch).unwrap();
        let lr = config.learning_rate;
        Sgd::new(0.0, 0.0).step(&mut params, &joint.total, lr).unwrap();
        for k in 0..before.len() {
            let expected = gamma * g_image.data()[k] + (1.0 - gamma) * g_text.data()[k];
            let applied = params.prototypes.data()[k];
            if joint.total.prototypes.data()[k].to_bits() != expected.to_bits()
                || applied.to_bits() != (before.data()[k] + (-lr) * expected).to_bits()
            {
                bad.push(format!("gamma {gamma}, entry {k}"));
                break;
            }
        }
    }
    outcome(bad.is_empty(), format!("gamma in {{0.2, 0.5, 0.9}}, bitwise mismatches {bad:?}"))
}

fn main() -> ExitCode {
    // The toy runs rely on these defaults.
    assert_eq!(HyperParams::default(), HyperParams { gamma: 0.2, alpha: 1.0, beta: 3.5, eta: 1.0, tau: 0.02 });
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("1 gradient suite", gradient_suite());
    report("2 formula oracles", formula_oracles());
    report("3 AP/mAP oracle", ap_oracle());
    let baselines: Vec<ToyRun> = (0..ABLATION_SEEDS).map(|s| toy_run(s, 0.2, 1.0, 6)).collect();
    report("4 toy learning", toy_learning(&baselines[0]));
    report("5 ablation directions", ablations(&baselines));
    report("6 modality gap", modality_gap(&baselines));
    report("7 determinism", determinism());
    report("8 adapter additivity", adapter_additivity());

    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use debias_core::biaspipe::{
    export_bias_artifacts, read_artifacts, train_biased, write_artifacts, BiasArtifact,
};
use debias_core::datagen::{self, generate, SyntheticDataset, SyntheticSpec};
use debias_core::io::{digest_bytes, digest_file, to_jsonl_bytes};
use debias_core::losses::{adjusted_similarity, evaluate as loss_eval, LossConfig, LossVariant};
use debias_core::model::{ClassifierParams, ModelDims};
use debias_core::trainer::{
    evaluate, multi_seed_run, train_main, EvalReport, TrainConfig, ViewKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Loss weights for the similarity-gated run, picked from the
/// alpha ∈ {0.01, 0.1, 0.2, 0.3, 0.5, 1}, beta ∈ {0.1, 0.3, 0.5, 1} grid
/// by a 6-seed pilot sweep on the default data.
const SALS_ALPHA: f64 = 0.1;
const SALS_BETA: f64 = 1.0;

const OOD_GAIN_OVER_CE: f64 = 0.10;
const OOD_GAIN_OVER_POE: f64 = 0.0;
const ID_TOLERANCE: f64 = 0.03;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut checked = 0;
    for (name, err) in common::op_errors(10, 1)
        .into_iter()
        .chain(common::model_errors(10, 2))
    {
        checked += 1;
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let elapsed = t.elapsed();
    outcome(
        worst.1 < 1e-5 && elapsed < Duration::from_secs(60),
        format!(
            "{checked} ops/parameters x 10 points, worst relative error {:.2e} ({}), {:.2?}",
            worst.1, worst.0, elapsed
        ),
    )
}

fn ln_probs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

/// Straight-line probability-space evaluation: (poe, rho_star, total).
fn oracle(pm: &[f64], pb: &[f64], rho: f64, gold: usize, alpha: f64, beta: f64) -> (f64, f64, f64) {
    let mut z = 0.0;
    for c in 0..pm.len() {
        z += pm[c] * pb[c];
    }
    let q = pm[gold] * pb[gold] / z;
    let poe = -q.ln();
    let ce = -pm[gold].ln();
    let p = q.clamp(1e-12, 1.0);
    let rho_star = rho.powf(p.powf(beta));
    (
        poe,
        rho_star,
        rho_star * poe + alpha * (1.0 - rho_star) * ce,
    )
}

fn criterion_2() -> Outcome {
    let cfg = LossConfig::new(LossVariant::PoeSals);
    let b = loss_eval(&ln_probs(&[0.6, 0.4]), &ln_probs(&[0.9, 0.1]), 0.5, 0, &cfg).unwrap();
    let worked = (b.poe - 0.071459).abs() < 1e-5
        && (b.rho_star - 0.524486).abs() < 1e-5
        && (b.total - 0.280385).abs() < 1e-5;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut max_diff = 0.0f64;
    for _ in 0..1000 {
        let y = rng.random_range(2..=5);
        let draw = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..y)
                .map(|_| rng.random_range(0.01..1.0f64).powi(3))
                .collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|r| r / s).collect::<Vec<f64>>()
        };
        let (pm, pb) = (draw(&mut rng), draw(&mut rng));
        let gold = rng.random_range(0..y);
        let rho = rng.random_range(0.0..=1.0);
        let cfg = LossConfig {
            alpha: rng.random_range(0.01..2.0),
            beta: rng.random_range(0.05..2.0),
            ..LossConfig::new(LossVariant::PoeSals)
        };
        let got = loss_eval(&ln_probs(&pm), &ln_probs(&pb), rho, gold, &cfg).unwrap();
        let (poe, rho_star, total) = oracle(&pm, &pb, rho, gold, cfg.alpha, cfg.beta);
        for d in [got.poe - poe, got.rho_star - rho_star, got.total - total] {
            max_diff = max_diff.max(d.abs());
        }
    }
    outcome(
        worked && max_diff < 1e-10,
        format!(
            "worked example poe={:.6} rho*={:.6} total={:.6}; 1000 random cases max |diff| {:.2e}",
            b.poe, b.rho_star, b.total, max_diff
        ),
    )
}

fn criterion_3() -> Outcome {
    let grid = [
        0.001, 0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99, 0.999,
    ];
    let betas = [0.1, 0.3, 0.5, 1.0];
    let certain = 1e-6;
    let mut failures = Vec::new();
    let total = |pm: f64, pb: f64, rho: f64, beta: f64| {
        let cfg = LossConfig {
            alpha: 1.0,
            beta,
            ..LossConfig::new(LossVariant::PoeSals)
        };
        loss_eval(
            &ln_probs(&[pm, 1.0 - pm]),
            &ln_probs(&[pb, 1.0 - pb]),
            rho,
            0,
            &cfg,
        )
        .unwrap()
    };

    for &beta in &betas {
        for &pm in &grid {
            let mut prev_correct: Option<f64> = None;
            let mut prev_wrong: Option<f64> = None;
            for &rho in &grid {
                let u = total(pm, 0.5, rho, beta);
                if (u.total - u.ce).abs() > 1e-10 {
                    failures.push(format!("uniform: pm={pm} rho={rho} beta={beta}"));
                }
                let c = total(pm, 1.0 - certain, rho, beta).total;
                if prev_correct.is_some_and(|p| c >= p) {
                    failures.push(format!(
                        "certain-correct not decreasing: pm={pm} rho={rho} beta={beta}"
                    ));
                }
                prev_correct = Some(c);
                if pm > 0.5 {
                    let w = total(pm, certain, rho, beta).total;
                    if prev_wrong.is_some_and(|p| w <= p) {
                        failures.push(format!(
                            "certain-incorrect not increasing: pm={pm} rho={rho} beta={beta}"
                        ));
                    }
                    prev_wrong = Some(w);
                }
            }
        }
        for &p in &grid {
            let mut prev: Option<f64> = None;
            for &rho in &grid {
                let rs = adjusted_similarity(rho, p, beta, 1e-12).unwrap();
                if rs < rho {
                    failures.push(format!("rho* < rho: rho={rho} p={p} beta={beta}"));
                }
                if prev.is_some_and(|q| rs <= q) {
                    failures.push(format!(
                        "rho* not increasing in rho: rho={rho} p={p} beta={beta}"
                    ));
                }
                prev = Some(rs);
            }
        }
    }
    for &p in &grid {
        for &rho in &grid {
            let along: Vec<f64> = betas
                .iter()
                .map(|&b| adjusted_similarity(rho, p, b, 1e-12).unwrap())
                .collect();
            if along.windows(2).any(|w| w[1] < w[0]) {
                failures.push(format!("rho* not monotone in beta: rho={rho} p={p}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{} x {} x {} grid, all regime properties hold",
                grid.len(),
                grid.len(),
                betas.len()
            )
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    )
}

struct Shared {
    spec: SyntheticSpec,
    data: SyntheticDataset,
    cfg: TrainConfig,
    dims: ModelDims,
    biased: ClassifierParams,
    artifacts: Vec<BiasArtifact>,
}

fn criterion_4() -> (Outcome, Shared) {
    let spec = SyntheticSpec::default();
    let cfg = TrainConfig::default();
    let dims = cfg.dims(spec.vocab_size, spec.num_classes);
    let t = Instant::now();
    let data = generate(&spec).unwrap();
    let biased = train_biased(&data.train, &cfg, dims).unwrap();
    let train_acc = evaluate(&biased, &data.train, ViewKind::BiasSegment).unwrap();
    let ood_acc = evaluate(&biased, &data.ood_test, ViewKind::BiasSegment).unwrap();
    let elapsed = t.elapsed();
    let chance = 1.0 / spec.num_classes as f64;
    let out = outcome(
        train_acc > 0.95 && (ood_acc - chance).abs() <= 0.03 && elapsed < Duration::from_secs(120),
        format!(
            "biased model train acc {:.2}%, decorrelated OOD acc {:.2}%, {:.2?}",
            100.0 * train_acc,
            100.0 * ood_acc,
            elapsed
        ),
    );
    let artifacts = export_bias_artifacts(&biased, &data.train, 1).unwrap();
    (
        out,
        Shared {
            spec,
            data,
            cfg,
            dims,
            biased,
            artifacts,
        },
    )
}

fn run(s: &Shared, variant: LossVariant, alpha: f64, beta: f64) -> EvalReport {
    let mut cfg = s.cfg.clone();
    cfg.loss = LossConfig {
        alpha,
        beta,
        ..LossConfig::new(variant)
    };
    multi_seed_run(&s.data, Some(&s.artifacts), &cfg, s.dims, 1)
        .unwrap()
        .0
}

fn criterion_5(s: &Shared) -> Outcome {
    let t = Instant::now();
    let ce = run(s, LossVariant::Ce, 1.0, 1.0);
    let poe = run(s, LossVariant::Poe, 1.0, 1.0);
    let sals = run(s, LossVariant::PoeSals, SALS_ALPHA, SALS_BETA);
    let elapsed = t.elapsed();
    let gain_ce = sals.ood_test.mean - ce.ood_test.mean;
    let gain_poe = sals.ood_test.mean - poe.ood_test.mean;
    let id_gap = (sals.id_test.mean - ce.id_test.mean).abs();
    let pct = |r: &EvalReport| {
        format!(
            "ID {:.2}, OOD {:.2}",
            100.0 * r.id_test.mean,
            100.0 * r.ood_test.mean
        )
    };
    outcome(
        gain_ce >= OOD_GAIN_OVER_CE
            && gain_poe >= OOD_GAIN_OVER_POE
            && id_gap <= ID_TOLERANCE
            && elapsed <= Duration::from_secs(900),
        format!(
            "{} seeds; CE {}; PoE {}; PoE_Sals(alpha={SALS_ALPHA}, beta={SALS_BETA}) {}; \
             OOD vs CE {:+.2} pts, OOD vs PoE {:+.2} pts, ID gap {:.2} pts, {:.2?}",
            s.cfg.seeds.len(),
            pct(&ce),
            pct(&poe),
            pct(&sals),
            100.0 * gain_ce,
            100.0 * gain_poe,
            100.0 * id_gap,
            elapsed
        ),
    )
}

fn criterion_6(s: &Shared) -> Outcome {
    let small = SyntheticSpec {
        train_size: 600,
        id_test_size: 200,
        ood_test_size: 200,
        ..s.spec.clone()
    };
    let digests = || {
        let data = generate(&small).unwrap();
        let mut d: Vec<String> = datagen::Split::ALL
            .iter()
            .map(|&sp| digest_bytes(&datagen::to_bytes(data.split(sp)).unwrap()))
            .collect();
        let biased = train_biased(&data.train, &s.cfg, s.dims).unwrap();
        let artifacts = export_bias_artifacts(&biased, &data.train, 2).unwrap();
        d.push(digest_bytes(&biased.to_checkpoint_bytes().unwrap()));
        d.push(digest_bytes(&to_jsonl_bytes(&artifacts).unwrap()));
        let mut cfg = s.cfg.clone();
        cfg.loss = LossConfig::new(LossVariant::PoeSals);
        let main = train_main(&data.train, Some(&artifacts), &cfg, s.dims, 1, None).unwrap();
        d.push(digest_bytes(&main.params.to_checkpoint_bytes().unwrap()));
        d
    };
    let (a, b) = (digests(), digests());
    outcome(
        a == b,
        format!("{} digests (3 splits, biased model, artifacts, main model) identical across two runs: {}", a.len(), a == b),
    )
}

fn criterion_7(s: &Shared) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let mut ok = true;

    datagen::write_dataset(&p("d1.jsonl"), &s.data.train).unwrap();
    let back = datagen::read_dataset(&p("d1.jsonl")).unwrap();
    datagen::write_dataset(&p("d2.jsonl"), &back).unwrap();
    ok &= digest_file(&p("d1.jsonl")).unwrap() == digest_file(&p("d2.jsonl")).unwrap();

    write_artifacts(&p("a1.jsonl"), &s.artifacts).unwrap();
    let back = read_artifacts(&p("a1.jsonl")).unwrap();
    write_artifacts(&p("a2.jsonl"), &back).unwrap();
    ok &= digest_file(&p("a1.jsonl")).unwrap() == digest_file(&p("a2.jsonl")).unwrap();
    ok &= back == s.artifacts;

    s.biased.save(&p("m1.json")).unwrap();
    let back = ClassifierParams::load(&p("m1.json")).unwrap();
    back.save(&p("m2.json")).unwrap();
    ok &= digest_file(&p("m1.json")).unwrap() == digest_file(&p("m2.json")).unwrap();
    ok &= back.bit_eq(&s.biased);

    outcome(
        ok,
        "dataset, artifact and checkpoint files write-read-write with identical digests".into(),
    )
}

fn main() {
    let mut results = vec![
        (1, "gradient correctness", criterion_1()),
        (2, "loss oracle equivalence", criterion_2()),
        (3, "loss regime properties", criterion_3()),
    ];
    let (c4, shared) = criterion_4();
    results.push((4, "bias-construction certificate", c4));
    results.push((5, "directional debiasing result", criterion_5(&shared)));
    results.push((6, "determinism", criterion_6(&shared)));
    results.push((7, "round-trip fidelity", criterion_7(&shared)));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!(
            "criterion {n} [{name}]: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any of them fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vra_core::rectify::{SortedColumns, ThresholdMode};
use vra_core::scoring::{forward_logits, score_energy, score_msp, LogitSource, VraPlusPlusParams};
use vra_core::tensor_io::load_manifest;
use vra_core::variational::{binned_objective, density_pair_from_samples, gap_bound_check, optimal_g, sample_gap};
use vra_core::{auroc, fpr_at_95_tpr, ClassifierHead, Matrix, RectifierSpec, Role, ScoreMethod, ThresholdVector};
use vra_kit::config::{Flags, MethodName, RectifierName};
use vra_kit::synth::{generate, write_benchmark, SyntheticSpec};
use vra_kit::{run, Command};

struct Outcome {
    pass: bool,
    detail: String,
}

fn criterion(name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = out.pass && in_time;
    println!(
        "[{}] {name}: {}; runtime {:.1}s (limit {}s{})",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", exceeded" },
    );
    pass
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, mean: f64, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| mean + scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn reduction_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures = Vec::new();
    for fixture in 0..50 {
        let (c, m, n) = (rng.random_range(2..12), rng.random_range(1..40), rng.random_range(1..300));
        let head = ClassifierHead::new(gaussian(&mut rng, c, m, 0.0, 0.5), (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (mean, scale) = (rng.random_range(-1.0..2.0), rng.random_range(0.1..3.0));
        let z = gaussian(&mut rng, n, m, mean, scale);
        let logits = forward_logits(&head, &z).unwrap();
        let identity = RectifierSpec::identity(m);
        let score = |method: ScoreMethod, spec: &RectifierSpec| method.score(&head, &z, |x| spec.apply(x)).unwrap().values;
        let energy = ScoreMethod::Energy { temperature: 1.0 };

        let mut check = |ok: bool, what: &str| {
            if !ok {
                failures.push(format!("fixture {fixture}: {what}"));
            }
        };
        check(score(ScoreMethod::Msp, &identity) == score_msp(&logits).unwrap().values, "identity+msp");
        check(score(energy, &identity) == score_energy(&logits, 1.0).unwrap().values, "identity+energy");

        let beta: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..2.5)).collect();
        let low: Vec<f64> = (0..m).map(|j| z.column(j).into_iter().fold(beta[j], f64::min) - 1.0).collect();
        let react = RectifierSpec::react(beta.clone()).unwrap();
        let open_vra = RectifierSpec::vra(ThresholdVector::new(low, beta.clone()).unwrap());
        check(react.apply(&z).unwrap() == open_vra.apply(&z).unwrap(), "vra without low cut vs react (features)");
        check(score(energy, &react) == score(energy, &open_vra), "vra without low cut vs react (energy)");

        let sorted = SortedColumns::new(&gaussian(&mut rng, 50, m, mean, scale)).unwrap();
        let t = sorted.thresholds(rng.random_range(0.0..0.5), rng.random_range(0.5..1.0), ThresholdMode::PerFeature).unwrap();
        let vra = RectifierSpec::vra(t.clone());
        let plus = RectifierSpec::vra_plus(t, 0.0).unwrap();
        check(vra.apply(&z).unwrap() == plus.apply(&z).unwrap(), "vra+ gamma=0 vs vra");

        let pp = ScoreMethod::VraPlusPlus {
            params: VraPlusPlusParams::new(0.0, rng.random_range(0.0..2.0)).unwrap(),
            logits: LogitSource::Raw,
        };
        check(score(pp, &identity) == score(energy, &identity), "vra++ lambda_v=0 vs energy");
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "50/50 fixtures equal bit-for-bit".into()
        } else {
            format!("{} mismatches, first: {}", failures.len(), failures[0])
        },
    }
}

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for a in id {
        for b in ood {
            s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    s / (id.len() * ood.len()) as f64
}

/// Largest observed ID score that keeps TPR >= 95%, then the OOD share above it.
fn scan_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let mut tau = f64::NEG_INFINITY;
    for &t in id {
        let kept = id.iter().filter(|&&s| s >= t).count();
        if 100 * kept >= 95 * id.len() && t > tau {
            tau = t;
        }
    }
    ood.iter().filter(|&&s| s >= tau).count() as f64 / ood.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut au_bad, mut fpr_bad) = (0, 0);
    for _ in 0..1000 {
        let (n, k) = (rng.random_range(1..=200), rng.random_range(1..=200));
        let levels = rng.random_range(2..40) as f64;
        let draw = |rng: &mut ChaCha8Rng, len: usize, shift: f64| -> Vec<f64> {
            (0..len).map(|_| ((rng.sample::<f64, _>(StandardNormal) + shift) * levels).round() / levels).collect()
        };
        let shift = rng.random_range(-1.0..2.0);
        let id = draw(&mut rng, n, shift);
        let ood = draw(&mut rng, k, 0.0);
        au_bad += (auroc(&id, &ood).unwrap() != pairwise_auroc(&id, &ood)) as usize;
        fpr_bad += (fpr_at_95_tpr(&id, &ood).unwrap() != scan_fpr95(&id, &ood)) as usize;
    }
    Outcome {
        pass: au_bad == 0 && fpr_bad == 0,
        detail: format!("AUROC mismatches {au_bad}/1000, FPR95 mismatches {fpr_bad}/1000"),
    }
}

fn random_pair(rng: &mut ChaCha8Rng) -> (vra_core::variational::DensityPair, f64) {
    let (n_in, n_out) = (rng.random_range(2..400), rng.random_range(2..400));
    let shift = rng.random_range(-3.0..3.0);
    let spread = rng.random_range(0.3..3.0);
    let a: Vec<f64> = (0..n_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let b: Vec<f64> = (0..n_out).map(|_| shift + spread * rng.sample::<f64, _>(StandardNormal)).collect();
    let bins = rng.random_range(1..120);
    let eps = rng.random_range(0.05..2.0);
    let lambda = rng.random_range(0.05..5.0);
    (density_pair_from_samples(&a, &b, bins, eps).unwrap(), lambda)
}

/// Magnitude of the quantities entering the objective, its rounding scale.
fn objective_scale(d: &vra_core::variational::DensityPair, values: &[f64], lambda: f64) -> f64 {
    let (mi, mo, mids) = (d.mass_in(), d.mass_out(), d.midpoints());
    (0..d.bins())
        .map(|b| mi[b] * (1.0 + mids[b].powi(2) + values[b].powi(2)) + 2.0 * lambda * values[b].abs() * (mi[b] + mo[b]))
        .sum()
}

fn variational_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut identity_bad, mut satisfied, mut beaten) = (0, 0, 0);
    let mut worst_excess = f64::INFINITY;
    let mut ratios = Vec::new();
    for _ in 0..1000 {
        let (d, lambda) = random_pair(&mut rng);
        let b = gap_bound_check(&d, lambda).unwrap();
        let scale = b.bound.abs().max(f64::MIN_POSITIVE);
        if (b.improvement - b.bound).abs() > 1e-9 * scale {
            identity_bad += 1;
        }
        if b.bound > 1e-12 {
            ratios.push(b.improvement / b.bound);
        }
        satisfied += b.satisfied as usize;

        let g = optimal_g(&d, lambda).unwrap();
        let best = binned_objective(&d, g.values(), lambda).unwrap();
        for _ in 0..100 {
            let spread = rng.random_range(0.001..3.0);
            let candidate: Vec<f64> = if rng.random_bool(0.5) {
                g.values().iter().map(|v| v + spread * rng.sample::<f64, _>(StandardNormal)).collect()
            } else {
                let c = rng.random_range(-5.0..5.0);
                d.midpoints().iter().map(|z| if rng.random_bool(0.5) { c } else { *z }).collect()
            };
            let excess = binned_objective(&d, &candidate, lambda).unwrap() - best;
            if excess < -1e-12 * objective_scale(&d, &candidate, lambda) {
                beaten += 1;
            }
            worst_excess = worst_excess.min(excess);
        }
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios.get(ratios.len() / 2).copied().unwrap_or(f64::NAN);
    Outcome {
        pass: identity_bad == 0 && beaten == 0,
        detail: format!(
            "improvement == bound within 1e-9 rel failed on {identity_bad}/1000 pairs \
             (median improvement/bound {median:.12}); bound satisfied on {satisfied}/1000; \
             g* beaten by {beaten}/100000 competitors (min excess {worst_excess:.3e})"
        ),
    }
}

fn lambda_linearity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut bins, mut bad) = (0, 0);
    for _ in 0..1000 {
        let (d, lambda) = random_pair(&mut rng);
        let g1 = optimal_g(&d, lambda).unwrap();
        let g2 = optimal_g(&d, 2.0 * lambda).unwrap();
        for (s2, s1) in g2.displacement().iter().zip(g1.displacement()) {
            bins += 1;
            bad += (*s2 != 2.0 * s1) as usize;
        }
    }
    Outcome {
        pass: bad == 0,
        detail: format!("g*_2l - z != 2(g*_l - z) on {bad}/{bins} bins"),
    }
}

fn synth_suite(root: &Path, shift: f64, seed: u64) -> PathBuf {
    let mut spec = SyntheticSpec::shifted(32, 2000, shift, seed);
    spec.ood_tail_df = Some(3.0);
    write_benchmark(&generate(&spec).unwrap(), &root.join(format!("shift{shift}_seed{seed}"))).unwrap()
}

fn report_auroc(dir: &Path) -> f64 {
    let text = fs::read_to_string(dir.join("report.csv")).unwrap();
    let avg = text.lines().find(|l| l.starts_with("Average,")).unwrap();
    avg.split(',').nth(3).unwrap().parse().unwrap()
}

fn flags(manifest: &Path, out: PathBuf) -> Flags {
    Flags {
        manifest: Some(manifest.to_path_buf()),
        output: Some(out),
        ..Default::default()
    }
}

fn oracle_flags(manifest: &Path, out: PathBuf, subsample: Option<u64>) -> Flags {
    let mut f = Flags {
        method: Some(MethodName::FeatureSum),
        ..flags(manifest, out)
    };
    if let Some(seed) = subsample {
        f.rectifier = Some(RectifierName::GstarSubsample);
        f.subsample_fraction = Some(0.01);
        f.seed = Some(seed);
        f.bins = Some(10);
    }
    f
}

fn table4_ordering(root: &Path) -> Outcome {
    let mut holds = 0;
    let mut rows = Vec::new();
    for seed in 0..10 {
        let manifest = synth_suite(root, 1.5, seed);
        let dir = manifest.parent().unwrap().to_path_buf();
        run(Command::Eval, &flags(&manifest, dir.join("energy"))).unwrap();
        let tune = Flags { rectifier: Some(RectifierName::Vra), ..flags(&manifest, dir.join("vra")) };
        run(Command::Tune, &tune).unwrap();
        run(Command::Oracle, &oracle_flags(&manifest, dir.join("sub"), Some(seed))).unwrap();
        run(Command::Oracle, &oracle_flags(&manifest, dir.join("true"), None)).unwrap();
        let a = ["energy", "vra", "sub", "true"].map(|n| report_auroc(&dir.join(n)));
        holds += a.windows(2).all(|w| w[0] <= w[1]) as usize;
        rows.push(format!("{:.3}<={:.3}<={:.3}<={:.3}", a[0], a[1], a[2], a[3]));
    }
    let mut worst_far = f64::INFINITY;
    for seed in 0..10 {
        let manifest = synth_suite(root, 5.0, seed);
        let out = manifest.parent().unwrap().join("true");
        run(Command::Oracle, &oracle_flags(&manifest, out.clone(), None)).unwrap();
        worst_far = worst_far.min(report_auroc(&out));
    }
    Outcome {
        pass: holds >= 8 && worst_far >= 0.99,
        detail: format!(
            "ordering held in {holds}/10 seeds (need 8) [{}]; min gstar-true AUROC at shift 5 = {worst_far:.4} (need 0.99)",
            rows.join(" ")
        ),
    }
}

fn react_gap(root: &Path) -> Outcome {
    let mut held = 0;
    let mut worst = f64::INFINITY;
    for seed in 0..10 {
        let manifest = root.join(format!("shift1.5_seed{seed}/manifest.toml"));
        let manifest = if manifest.exists() { manifest } else { synth_suite(root, 1.5, seed) };
        let (_, data) = load_manifest(&manifest).unwrap();
        let train = data.stacked(Role::IdTrain).unwrap();
        let beta = SortedColumns::new(&train.features).unwrap().upper_cut(0.9, ThresholdMode::Pooled).unwrap();
        let react = RectifierSpec::react(beta).unwrap();
        let g = |z: f64| react.rectify_value(0, z);
        let id = data.stacked(Role::IdTest).unwrap();
        let ood = data.stacked(Role::Ood).unwrap();
        let (gap_g, gap_z) = sample_gap(&g, id.features.as_slice(), ood.features.as_slice()).unwrap();
        held += (gap_g >= gap_z - 1e-9) as usize;
        worst = worst.min(gap_g - gap_z);
    }
    Outcome {
        pass: held == 10,
        detail: format!("gap(ReAct) >= gap(identity) in {held}/10 seeds; min gain {worst:.4}"),
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn determinism(root: &Path) -> Outcome {
    let mut spec = SyntheticSpec::shifted(32, 500, 1.5, 42);
    spec.ood_tail_df = Some(3.0);
    let manifest = write_benchmark(&generate(&spec).unwrap(), &root.join("det_suite")).unwrap();
    let out = root.join("det");
    let mut same = Vec::new();
    let jobs: [(Command, Flags); 3] = [
        (Command::Tune, Flags { method: Some(MethodName::VraPp), ..flags(&manifest, out.clone()) }),
        (Command::Oracle, oracle_flags(&manifest, out.clone(), Some(7))),
        (Command::Oracle, oracle_flags(&manifest, out.clone(), None)),
    ];
    for (cmd, f) in jobs {
        run(cmd, &f).unwrap();
        let first = snapshot(&out);
        fs::remove_dir_all(&out).unwrap();
        run(cmd, &f).unwrap();
        same.push(first == snapshot(&out));
        fs::remove_dir_all(&out).unwrap();
    }
    Outcome {
        pass: same.iter().all(|&s| s),
        detail: format!("byte-identical reruns: tune {}, oracle subsample {}, oracle true {}", same[0], same[1], same[2]),
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let results = [
        criterion("reduction suite", Duration::from_secs(10), reduction_suite),
        criterion("metric oracles", Duration::from_secs(60), metric_oracles),
        criterion("variational identities", Duration::from_secs(120), variational_identities),
        criterion("lambda linearity", Duration::from_secs(120), lambda_linearity),
        criterion("synthetic oracle ordering", Duration::from_secs(300), || table4_ordering(root)),
        criterion("truncation gap check", Duration::from_secs(300), || react_gap(root)),
        criterion("determinism", Duration::from_secs(300), || determinism(root)),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

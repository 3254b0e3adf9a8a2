//! Acceptance criteria. Prints one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test -p ncdg --test acceptance -- 1 4`.
//! A criterion whose input data is absent prints FAIL with a `blocked:`
//! diagnostic and does not fail the process; every other FAIL does.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ncdg::autodiff::Tape;
use ncdg::config::{dataset_paths, RunConfig, DATA_ROOT_ENV};
use ncdg::coverage::{coverage_loss, CoverageRecord, NeuronActMap, NormScope};
use ncdg::data::ImageDataset;
use ncdg::gradcheck::{run_gradcheck, GradcheckSettings};
use ncdg::nn::{checkpoint, forward, init_params, ModelSpec};
use ncdg::run::{
    load_dataset, model_spec, read_jsonl, train_run, ActMapSnapshot, RunManifest, RunOutcome, SnapshotStage, ACT_MAPS,
    CHECKPOINT, COVERAGE, MANIFEST, METRICS, SOURCE_KEY,
};
use ncdg::training::{
    dataset_coverage, evaluate, objective_gradients, BatchInput, Bookkeeping, MetricsRecord, TrainConfig,
};
use ncdg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Input data is missing; the criterion could not be evaluated.
    Blocked(String),
}

use Verdict::{Blocked, Fail, Pass};

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn runs_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs")
}

fn missing(cfg: &RunConfig, split: &str) -> Option<String> {
    let (img, lab) = dataset_paths(&cfg.data.data_root, split).ok()?;
    [img, lab]
        .into_iter()
        .find(|p| !p.is_file())
        .map(|p| format!("{} not found", p.display()))
}

/// The desk protocol: digits.cfg with the given overrides.
fn desk_config(sets: &[(&str, &str)]) -> RunConfig {
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/digits.cfg");
    let mut sets: Vec<(String, String)> = sets.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    sets.insert(0, ("data_root".into(), data_root().display().to_string()));
    RunConfig::resolve(Some(&file), None, &sets).expect("desk config resolves")
}

struct Run {
    dir: PathBuf,
    outcome: RunOutcome,
    elapsed: Duration,
}

#[derive(Default)]
struct Ctx {
    runs: BTreeMap<String, Run>,
}

impl Ctx {
    /// Trains a named desk-scale run once and caches it.
    fn run(&mut self, name: &str, cfg: &RunConfig) -> &Run {
        if !self.runs.contains_key(name) {
            let dir = runs_dir().join(name);
            let _ = fs::remove_dir_all(&dir);
            eprintln!("  training {name} into {}", dir.display());
            let start = Instant::now();
            let outcome = train_run(cfg, &dir).unwrap_or_else(|e| panic!("run {name}: {e}"));
            let elapsed = start.elapsed();
            eprintln!(
                "  {name}: {} steps in {:.0} s",
                outcome.metrics.len(),
                elapsed.as_secs_f64()
            );
            self.runs.insert(name.to_string(), Run { dir, outcome, elapsed });
        }
        &self.runs[name]
    }

    fn ncdg(&mut self) -> &Run {
        self.run("ncdg-seed0", &desk_config(&[]))
    }
}

fn c1_gradient_correctness(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let s = GradcheckSettings::preset("mlp-small").unwrap();
    let r = run_gradcheck(&s).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (a, b) = (r.first_order.max_rel_err, r.second_order.max_rel_err);
    verdict(
        r.params <= 500 && a < 1e-5 && b < 1e-4 && secs < 120.0,
        format!(
            "{} params, L_cov rel err {a:.2e} (< 1e-5), full objective rel err {b:.2e} (< 1e-4), {secs:.2} s",
            r.params
        ),
    )
}

fn c2_zero_similarity(_: &mut Ctx) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = ModelSpec::digits_convnet(10, 3, &TrainConfig::default().widths).unwrap();
    let params = init_params::<f32>(&spec, 0);
    let (b, size) = (8, 32);
    let images: Vec<f32> = (0..b * 3 * size * size).map(|_| rng.random::<f32>()).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..10)).collect();
    let tape = Tape::<f32>::new();
    let vars = params.register(&tape);
    let x = Tensor::new(vec![b, 3, size, size], images).unwrap();
    let raw = BatchInput {
        images: tape.constant(x.clone()),
        labels: &labels,
    };
    let aug = BatchInput {
        images: tape.constant(x),
        labels: &labels,
    };
    let mut map = NeuronActMap::new(&spec);
    let cfg = TrainConfig::default().objective();
    let out = objective_gradients(&tape, &spec, &vars, &raw, Some(&aug), &cfg, Bookkeeping::Live(&mut map)).unwrap();
    let sim_grads = out.sim_grads.expect("second-order pass");
    let nonzero = sim_grads.iter().flat_map(|g| g.data()).filter(|&&v| v != 0.0).count();
    verdict(
        out.sim == 0.0 && nonzero == 0,
        format!(
            "digits ConvNet, batch {b}: l_sim = {:?}, {nonzero} nonzero of {} sim-gradient entries",
            out.sim,
            spec.param_count()
        ),
    )
}

fn c3_coverage_bookkeeping(ctx: &mut Ctx) -> Verdict {
    let cfg = desk_config(&[]);
    if let Some(m) = missing(&cfg, "mnist-train") {
        return Blocked(m);
    }
    let run = ctx.ncdg();
    let layers = model_spec(&cfg).unwrap().tracked_layers;
    let snaps: Vec<ActMapSnapshot> = read_jsonl(&run.dir.join(ACT_MAPS)).unwrap();
    let metrics: Vec<MetricsRecord> = read_jsonl(&run.dir.join(METRICS)).unwrap();
    let coverage: Vec<CoverageRecord> = read_jsonl(&run.dir.join(COVERAGE)).unwrap();
    let mut problems = Vec::new();
    let mut prev: Option<NeuronActMap> = None;
    let mut epochs = 0;
    let mut zero_checks = 0;
    let mut step = 0;
    for snap in &snaps {
        let map = snap.to_map(&layers);
        match snap.stage {
            SnapshotStage::EpochStart => {
                if map.activated_count() != 0 {
                    problems.push(format!(
                        "epoch {} starts with {} active",
                        snap.epoch,
                        map.activated_count()
                    ));
                }
                if let (Some(p), Some(c)) = (&prev, coverage.get(epochs.max(1) - 1)) {
                    if epochs > 0 && ncdg::coverage::coverage_ratio(p).per_layer != c.per_layer {
                        problems.push(format!("coverage report for epoch {} disagrees with the log", c.epoch));
                    }
                }
                epochs += 1;
            }
            SnapshotStage::Step => {
                let before = prev.as_ref().expect("a step follows an epoch start");
                if !before.is_subset_of(&map) {
                    problems.push(format!("iteration {}: activated set shrank", snap.iteration));
                }
                let m = &metrics[step];
                if m.iteration != snap.iteration || m.epoch != snap.epoch {
                    problems.push(format!("metrics line {step} is misaligned"));
                }
                if ncdg::coverage::coverage_ratio(&map).global_ratio != m.coverage_ratio {
                    problems.push(format!("iteration {}: logged ratio differs", m.iteration));
                }
                if before.activated_count() == before.total() {
                    zero_checks += 1;
                    if m.cov_raw != 0.0 || m.cov_aug != 0.0 {
                        problems.push(format!("iteration {}: full map but nonzero coverage loss", m.iteration));
                    }
                } else if map.activated_count() == map.total() {
                    zero_checks += 1;
                    if m.cov_aug != 0.0 {
                        problems.push(format!(
                            "iteration {}: full map but cov_aug = {}",
                            m.iteration, m.cov_aug
                        ));
                    }
                }
                step += 1;
            }
        }
        prev = Some(map);
    }
    if let (Some(p), Some(c)) = (&prev, coverage.last()) {
        if ncdg::coverage::coverage_ratio(p).per_layer != c.per_layer {
            problems.push("final coverage report disagrees with the log".into());
        }
    }
    if epochs != cfg.train.epochs || step != metrics.len() || coverage.len() != epochs {
        problems.push(format!(
            "{epochs} epochs, {step} steps, {} coverage lines",
            coverage.len()
        ));
    }

    // Direct check on the trained model: an all-active map leaves nothing to sum.
    let spec = model_spec(&cfg).unwrap();
    let params = checkpoint::load(&run.dir.join(CHECKPOINT), &spec).unwrap();
    let (ds, _) = load_dataset(&cfg, SOURCE_KEY).unwrap();
    let batch = ncdg::data::make_batch(&ds, &(0..32).collect::<Vec<_>>()).unwrap();
    let tape = Tape::<f32>::new();
    let vars = params.register(&tape);
    let x = tape.constant(batch.images);
    let out = forward(&tape, &spec, &vars, x).unwrap();
    let mut full = NeuronActMap::new(&spec);
    full.activated.iter_mut().for_each(|l| l.fill(true));
    let (loss, _) = coverage_loss(&tape, &out.layer_outputs, &mut full, cfg.train.t, NormScope::PerSample).unwrap();
    let direct = tape.value(loss).item();
    if direct != 0.0 {
        problems.push(format!("all-active map gives coverage loss {direct}"));
    }

    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} snapshots over {epochs} epochs replayed: monotone within epochs, empty at each reset; \
                 {zero_checks} logged steps had an empty inactive set (all with zero coverage loss); \
                 all-active map on the trained model gives coverage loss exactly 0",
                snaps.len()
            )
        } else {
            problems.join("; ")
        },
    )
}

/// Layer outputs `[layer][sample][neuron]`, an initial map, and a threshold.
type Case = (Vec<Vec<Vec<f64>>>, Vec<Vec<bool>>, f64);

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let layers = rng.random_range(1..=3);
    let batch = rng.random_range(1..=6);
    let discrete = rng.random_bool(0.3);
    let mut outputs = Vec::new();
    let mut map = Vec::new();
    for _ in 0..layers {
        let neurons = rng.random_range(1..=8);
        let layer: Vec<Vec<f64>> = (0..batch)
            .map(|_| {
                (0..neurons)
                    .map(|_| {
                        if discrete {
                            rng.random_range(0..3) as f64
                        } else {
                            rng.random_range(-3.0..3.0)
                        }
                    })
                    .collect()
            })
            .collect();
        outputs.push(layer);
        map.push((0..neurons).map(|_| rng.random_bool(0.25)).collect());
    }
    (outputs, map, rng.random_range(0.01..0.99))
}

fn c4_algorithm1_oracle(_: &mut Ctx) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..1000 {
        let (outputs, map0, t) = random_case(&mut rng);
        let sizes: Vec<usize> = map0.iter().map(Vec::len).collect();
        let names = (0..sizes.len()).map(|i| format!("l{i}")).collect();
        let mut map = NeuronActMap::with_sizes(names, &sizes);
        map.activated = map0.clone();
        let mut oracle_map = map0;
        // Two calls in sequence share one map, as within an epoch.
        for call in 0..2 {
            let tape = Tape::<f64>::new();
            let vars: Vec<_> = outputs
                .iter()
                .map(|l| {
                    let x = Tensor::new(vec![l.len(), l[0].len()], l.concat()).unwrap();
                    tape.constant(if call == 0 { x } else { x.map(|v| 0.5 * v + 0.1) })
                })
                .collect();
            let (loss, _) = coverage_loss(&tape, &vars, &mut map, t, NormScope::PerSample).unwrap();
            let got = tape.value(loss).item();
            let input: Vec<Vec<Vec<f64>>> = outputs
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|r| r.iter().map(|&v| if call == 0 { v } else { 0.5 * v + 0.1 }).collect())
                        .collect()
                })
                .collect();
            let want = common::algorithm1(&input, &mut oracle_map, t);
            let err = (got - want).abs();
            worst = worst.max(err);
            if !common::close(got, want, 1e-12) || map.activated != oracle_map {
                failures.push(format!("case {case} call {call}: {got} vs {want}"));
            }
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("1000 random cases x 2 sequential calls match; max |diff| {worst:.1e}, maps identical")
        } else {
            format!("{} mismatches, first: {}", failures.len(), failures[0])
        },
    )
}

fn accuracy_on(run: &Run, cfg: &RunConfig, target: &ImageDataset) -> f64 {
    let spec = model_spec(cfg).unwrap();
    evaluate(&spec, &run.outcome.params, target).unwrap().accuracy
}

fn c5_desk_usps(ctx: &mut Ctx) -> Verdict {
    let base = desk_config(&[]);
    for split in ["mnist-train", "usps-test"] {
        if let Some(m) = missing(&base, split) {
            return Blocked(format!("{m}; USPS IDX files can be made with scripts/usps_to_idx.py"));
        }
    }
    let (usps, _) = load_dataset(&base, "usps-test").unwrap();
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut slowest = 0.0f64;
    for seed in ["0", "1", "2"] {
        let configs = [
            ("ncdg", desk_config(&[("seed", seed)])),
            (
                "vanilla",
                desk_config(&[("seed", seed), ("lambda", "0"), ("beta", "0")]),
            ),
            (
                "erm",
                desk_config(&[("seed", seed), ("lambda", "0"), ("beta", "0"), ("augment", "none")]),
            ),
        ];
        for (name, cfg) in configs {
            let run = ctx.run(&format!("{name}-seed{seed}"), &cfg);
            slowest = slowest.max(run.elapsed.as_secs_f64());
            acc.entry(name).or_default().push(accuracy_on(run, &cfg, &usps));
        }
    }
    let mean = |k: &str| 100.0 * acc[k].iter().sum::<f64>() / acc[k].len() as f64;
    let (n, v, e) = (mean("ncdg"), mean("vanilla"), mean("erm"));
    verdict(
        n >= v + 1.0 && v > e && slowest < 1800.0,
        format!("USPS mean accuracy over 3 seeds: NCDG {n:.2}, Vanilla {v:.2}, ERM {e:.2}; slowest run {slowest:.0} s"),
    )
}

fn c6_full_protocol(ctx: &mut Ctx) -> Verdict {
    let base = desk_config(&[]);
    for split in ["mnist-train", "usps-test"] {
        if let Some(m) = missing(&base, split) {
            return Blocked(format!("{m}; USPS IDX files can be made with scripts/usps_to_idx.py"));
        }
    }
    if std::env::var_os("NCDG_FULL_PROTOCOL").is_none() {
        return Blocked("not run: set NCDG_FULL_PROTOCOL=1 (10,000 iterations, several hours)".into());
    }
    let cfg = desk_config(&[("train_samples", "10000"), ("iterations", "10000")]);
    let (usps, _) = load_dataset(&cfg, "usps-test").unwrap();
    let run = ctx.run("full-protocol", &cfg);
    let a = 100.0 * accuracy_on(run, &cfg, &usps);
    verdict(
        (a - 92.6).abs() <= 3.0,
        format!("NCDG USPS accuracy {a:.2} (target 92.6 +/- 3)"),
    )
}

fn c7_coverage_effect(ctx: &mut Ctx) -> Verdict {
    let cfg = desk_config(&[]);
    if let Some(m) = missing(&cfg, "mnist-train") {
        return Blocked(m);
    }
    let erm_cfg = desk_config(&[("lambda", "0"), ("beta", "0"), ("augment", "none")]);
    let spec = model_spec(&cfg).unwrap();
    let (ds, _) = load_dataset(&cfg, SOURCE_KEY).unwrap();
    let ncdg_params = ctx.ncdg().outcome.params.clone();
    let erm_params = ctx.run("erm-seed0", &erm_cfg).outcome.params.clone();
    let scope = cfg.train.norm_scope;
    let n = dataset_coverage(&spec, &ncdg_params, &ds, 0.005, scope)
        .unwrap()
        .global_ratio;
    let e = dataset_coverage(&spec, &erm_params, &ds, 0.005, scope)
        .unwrap()
        .global_ratio;
    verdict(
        n >= e,
        format!("coverage at t=0.005 on the 1000 training images: NCDG {n:.4}, ERM {e:.4}"),
    )
}

fn c8_ablations(ctx: &mut Ctx) -> Verdict {
    let base = desk_config(&[]);
    if let Some(m) = missing(&base, "mnist-train") {
        return Blocked(m);
    }
    let expected = 5 * 1000usize.div_ceil(32);
    let mut problems = Vec::new();
    let mut detail = Vec::new();
    for (name, ablation) in [("no-grad", "no_grad"), ("no-cov", "no_cov")] {
        let cfg = desk_config(&[("ablation", ablation)]);
        let run = ctx.run(name, &cfg);
        let logged: Vec<MetricsRecord> = read_jsonl(&run.dir.join(METRICS)).unwrap();
        if logged.len() != expected || !run.dir.join(CHECKPOINT).is_file() {
            problems.push(format!("{name}: {} steps logged, expected {expected}", logged.len()));
        }
        let bad = match ablation {
            "no_grad" => logged.iter().filter(|m| m.sim != 0.0).count(),
            _ => logged
                .iter()
                .filter(|m| m.cov_raw != 0.0 || m.cov_aug != 0.0 || m.lcov_raw != m.ce_raw || m.lcov_aug != m.ce_aug)
                .count(),
        };
        if bad > 0 {
            problems.push(format!("{name}: {bad} steps with a nonzero ablated term"));
        }
        let other_live = match ablation {
            "no_grad" => logged.iter().any(|m| m.cov_raw != 0.0 || m.cov_aug != 0.0),
            _ => logged.iter().all(|m| m.sim > 0.0),
        };
        detail.push(format!(
            "{name}: {} steps, ablated term exactly 0 on every step, other term active: {other_live}",
            logged.len()
        ));
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            detail.join("; ")
        } else {
            problems.join("; ")
        },
    )
}

fn c9_determinism(ctx: &mut Ctx) -> Verdict {
    let cfg = desk_config(&[]);
    if let Some(m) = missing(&cfg, "mnist-train") {
        return Blocked(m);
    }
    let first_dir = ctx.ncdg().dir.clone();
    let manifest = RunManifest::load(&first_dir.join(MANIFEST)).unwrap();
    let replay_cfg = manifest.run_config().unwrap();
    let second_dir = ctx.run("ncdg-seed0-replay", &replay_cfg).dir.clone();
    let second = RunManifest::load(&second_dir.join(MANIFEST)).unwrap();
    let mut problems = Vec::new();
    if second.config != manifest.config
        || second.datasets != manifest.datasets
        || second.spec_hash != manifest.spec_hash
    {
        problems.push("manifests differ beyond the output directory".to_string());
    }
    let bytes = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    if bytes(&first_dir, CHECKPOINT) != bytes(&second_dir, CHECKPOINT) {
        problems.push("checkpoints differ".into());
    }
    let m1: Vec<MetricsRecord> = read_jsonl(&first_dir.join(METRICS)).unwrap();
    let m2: Vec<MetricsRecord> = read_jsonl(&second_dir.join(METRICS)).unwrap();
    if m1.len() != m2.len() || !m1.iter().zip(&m2).all(|(a, b)| a.same_values(b)) {
        problems.push("metrics differ".into());
    }
    for f in [COVERAGE, ACT_MAPS] {
        if bytes(&first_dir, f) != bytes(&second_dir, f) {
            problems.push(format!("{f} differs"));
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "checkpoint ({} bytes), {} metrics lines (wall_ms excluded), coverage and act_map logs identical",
                bytes(&first_dir, CHECKPOINT).len(),
                m1.len()
            )
        } else {
            problems.join("; ")
        },
    )
}

type Criterion = (u32, &'static str, fn(&mut Ctx) -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "gradient correctness", c1_gradient_correctness),
    (2, "zero similarity on identical batches", c2_zero_similarity),
    (3, "coverage bookkeeping", c3_coverage_bookkeeping),
    (4, "pseudocode oracle equivalence", c4_algorithm1_oracle),
    (5, "desk-scale MNIST to USPS ordering", c5_desk_usps),
    (6, "full-protocol USPS accuracy", c6_full_protocol),
    (7, "coverage effect", c7_coverage_effect),
    (8, "ablation structure", c8_ablations),
    (9, "determinism", c9_determinism),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx::default();
    let mut failed = 0;
    let mut blocked = 0;
    for &(n, name, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(|| f(&mut ctx)))
            .unwrap_or_else(|e| Fail(format!("panicked: {}", panic_message(&e))));
        let secs = start.elapsed().as_secs_f64();
        let line = match v {
            Pass(d) => format!("PASS criterion {n} ({name}): {d} [{secs:.1} s]"),
            Fail(d) => {
                failed += 1;
                format!("FAIL criterion {n} ({name}): {d} [{secs:.1} s]")
            }
            Blocked(d) => {
                blocked += 1;
                format!("FAIL criterion {n} ({name}): blocked: {d}")
            }
        };
        println!("{line}");
        let _ = std::io::stdout().flush();
    }
    println!("acceptance: {failed} failed, {blocked} blocked by missing data");
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

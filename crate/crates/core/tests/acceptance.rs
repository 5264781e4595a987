//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Training results are cached under the cargo target tmpdir, keyed by the
//! config text and a digest of the library sources; set
//! `CROMAC_ACCEPTANCE_FRESH=1` to retrain. The process exits non-zero on a
//! failed criterion only when `CROMAC_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cromac::attacks::AttackSpec;
use cromac::diffcore::Checkpoint;
use cromac::harness::{run_evaluation, run_training, EvalReport, Method, RunConfig, CHECKPOINT_FILE, METRICS_FILE};
use cromac::verify::run_suite;
use sha2::{Digest, Sha256};

const PRESET: &str = "hallway-small";
const EPISODES: usize = 200;
const SEEDS: [u64; 3] = [0, 1, 2];
const TIMING_FILE: &str = "timing.json";

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Budgets {
    evals: usize,
    worst: f64,
    violations: Vec<String>,
}

impl Budgets {
    fn note(&mut self, label: &str, r: &EvalReport) {
        self.evals += 1;
        let budget = r.attack.budget();
        if budget > 0.0 {
            self.worst = self.worst.max(r.max_deviation / budget);
        }
        if r.max_deviation > budget {
            self.violations.push(format!("{label}: {} > {budget}", r.max_deviation));
        }
    }
}

fn source_digest() -> String {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).expect("source dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.push(p);
            }
        }
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut files = Vec::new();
    walk(&root, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(&root).expect("under root").to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).expect("source file"));
    }
    format!("{:x}", h.finalize())
}

/// Checkpoint and training wall time for one run, trained on a cache miss.
fn trained(method: Method, seed: u64, digest: &str) -> (Checkpoint, f64) {
    let mut cfg = RunConfig::preset(PRESET).unwrap().with_method(method).unwrap();
    cfg.seed = seed;
    cfg.validate().unwrap();
    let text = cfg.to_text();
    let key = format!("{:x}", Sha256::digest(format!("{digest}\n{text}").as_bytes()));
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(&key[..16]);
    let fresh = std::env::var("CROMAC_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1");
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let timing_path = dir.join(TIMING_FILE);
    if !fresh && ckpt_path.exists() && timing_path.exists() {
        let timing: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&timing_path).unwrap()).unwrap();
        let ckpt = Checkpoint::load(&ckpt_path).unwrap();
        if ckpt.config_text == text {
            let secs = timing["train_secs"].as_f64().unwrap();
            println!("  cached {} seed {seed} (trained in {secs:.0} s)", method.as_str());
            return (ckpt, secs);
        }
    }
    std::fs::create_dir_all(&dir).unwrap();
    println!("  training {} seed {seed} for {} env steps", method.as_str(), cfg.total_steps);
    let start = Instant::now();
    let out = run_training(&cfg, Some(&dir)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    std::fs::write(&timing_path, serde_json::json!({ "train_secs": secs, "env_steps": out.env_steps }).to_string()).unwrap();
    println!("  trained in {secs:.0} s");
    (out.checkpoint, secs)
}

fn eval(ckpt: &Checkpoint, spec: &AttackSpec, seed: u64, label: &str, budgets: &mut Budgets) -> EvalReport {
    let r = run_evaluation(ckpt, spec, EPISODES, &[seed]).unwrap();
    budgets.note(label, &r);
    r
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn suite(id: u32, name: &'static str, suite: &str, cases: usize, limit_secs: f64) -> Outcome {
    let r = run_suite(suite, cases, 0).unwrap();
    let secs = r.elapsed.as_secs_f64();
    Outcome { id, name, pass: r.passed() && secs < limit_secs, detail: format!("{r}; limit {limit_secs} s") }
}

fn determinism(budgets: &mut Budgets) -> Outcome {
    let mut cfg = RunConfig::preset("hallway-2x2").unwrap();
    cfg.seed = 5;
    cfg.total_steps = 3000;
    cfg.t_r = 1500;
    cfg.validate().unwrap();
    let run = |budgets: &mut Budgets| {
        let dir = tempfile::tempdir().unwrap();
        run_training(&cfg, Some(dir.path())).unwrap();
        let csv = std::fs::read(dir.path().join(METRICS_FILE)).unwrap();
        let ckpt = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        let r = run_evaluation(&ckpt, &AttackSpec::fgsm(cfg.epsilon).unwrap(), 50, &[0, 1]).unwrap();
        budgets.note("determinism", &r);
        (csv, ckpt.encode(), r)
    };
    let (a, b) = (run(budgets), run(budgets));
    let same = (a.0 == b.0, a.1 == b.1, a.2 == b.2);
    Outcome {
        id: 10,
        name: "determinism",
        pass: same == (true, true, true),
        detail: format!(
            "metrics csv {} bytes identical {}, checkpoint identical {}, fgsm eval identical {}",
            a.0.len(),
            same.0,
            same.1,
            same.2
        ),
    }
}

fn main() {
    let mut out = vec![
        suite(1, "POE correctness", "poe", 1000, 5.0),
        suite(2, "IBP soundness", "ibp", 10_000, 60.0),
        suite(3, "harmonic-mean certification", "bounds", 1000, 10.0),
        suite(4, "gradient fidelity", "grad", 100, 60.0),
    ];
    let mut budgets = Budgets::default();
    let digest = source_digest();
    let eps = RunConfig::preset(PRESET).unwrap().epsilon;
    let (natural, fgsm, strong) = (AttackSpec::natural(), AttackSpec::fgsm(eps).unwrap(), AttackSpec::fgsm(1.4 * eps).unwrap());

    let (ckpt, secs) = trained(Method::NoAdv, 0, &digest);
    let r = eval(&ckpt, &natural, 0, "no-adv natural", &mut budgets);
    out.push(Outcome {
        id: 5,
        name: "learning sanity",
        pass: r.mean >= 0.85 && secs <= 3600.0,
        detail: format!("no-adv natural win rate {:.3} over {EPISODES} episodes (need ≥ 0.85), trained in {secs:.0} s (limit 3600 s)", r.mean),
    });

    let mut rates = |method: Method, specs: &[&AttackSpec]| -> Vec<Vec<f64>> {
        let mut per_spec = vec![Vec::new(); specs.len()];
        for seed in SEEDS {
            let (ckpt, _) = trained(method, seed, &digest);
            for (k, spec) in specs.iter().enumerate() {
                let label = format!("{} seed {seed} {} {}", method.as_str(), spec.kind.as_str(), spec.budget());
                per_spec[k].push(eval(&ckpt, spec, seed, &label, &mut budgets).mean);
            }
        }
        per_spec
    };
    let cromac = rates(Method::Cromac, &[&natural, &fgsm, &strong]);
    let no_robust = rates(Method::NoRobust, &[&fgsm]);
    let ame = rates(Method::Ame, &[&strong]);

    let gap = mean(&cromac[1]) - mean(&no_robust[0]);
    out.push(Outcome {
        id: 6,
        name: "robustness ordering",
        pass: gap >= 0.2,
        detail: format!(
            "fgsm {eps}: cromac {} (mean {:.3}) vs no-robust {} (mean {:.3}); gap {gap:.3} (need ≥ 0.2)",
            fmt(&cromac[1]),
            mean(&cromac[1]),
            fmt(&no_robust[0]),
            mean(&no_robust[0])
        ),
    });
    let drop = mean(&cromac[0]) - mean(&cromac[1]);
    out.push(Outcome {
        id: 7,
        name: "degradation bound",
        pass: drop <= 0.15,
        detail: format!("cromac natural {:.3} → fgsm {eps} {:.3}; drop {drop:.3} (need ≤ 0.15)", mean(&cromac[0]), mean(&cromac[1])),
    });
    let strict = cromac[2].iter().zip(&ame[0]).all(|(c, a)| c > a);
    out.push(Outcome {
        id: 8,
        name: "baseline ordering",
        pass: strict,
        detail: format!(
            "fgsm {}: cromac {} vs ame {} per seed (need cromac > ame on every seed)",
            strong.budget(),
            fmt(&cromac[2]),
            fmt(&ame[0])
        ),
    });

    let det = determinism(&mut budgets);
    out.push(Outcome {
        id: 9,
        name: "budget soundness",
        pass: budgets.violations.is_empty(),
        detail: if budgets.violations.is_empty() {
            format!("{} evaluations, largest deviation/budget ratio {:.6}", budgets.evals, budgets.worst)
        } else {
            budgets.violations.join("; ")
        },
    });
    out.push(det);

    println!();
    for o in &out {
        println!("{} {:>2} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let failed = out.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria pass", out.len() - failed, out.len());
    if failed > 0 && std::env::var("CROMAC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dac_core::ablora::{AdaptedLinear, AdapterConfig, MergedLinear};
use dac_core::dataio::manifest::Manifest;
use dac_core::dataio::synth::MANIFEST_FILE;
use dac_core::dataio::{gen_synthetic, generate, load_manifest, SynthConfig};
use dac_core::encoder::{DualEncoder, EncoderTower, ViewSet};
use dac_core::fusion::{fuse, FusionConfig, FusionScheme};
use dac_core::numcore::{activation, sample_normal, Activation, Rng};
use dac_core::pipeline::{embed_dataset, embed_objects, evaluate_set, EmbedOptions};
use dac_core::retrieval::metrics::{average_precision, ndcg, nmrr, relevant_ranks};
use dac_core::retrieval::{validate_open_set_split, EvalOptions, MetricsReport, OpenSetDataset, Split};
use dac_core::training::{
    grad_check_model, relative_error, train, LoraMode, TrainConfig, TrainItem, TrainSet, DEFAULT_GRAD_EPS,
};
use dac_core::DacError;

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Shared state for the synthetic-experiment criteria.
struct Runs {
    data: dac_core::dataio::SynthData,
    frozen: DualEncoder,
    plain: DualEncoder,
    ablora: DualEncoder,
    ablora_time: Duration,
    total_time: Duration,
}

fn default_runs() -> Runs {
    let start = Instant::now();
    let data = generate(&SynthConfig::default()).expect("generate");
    let set = TrainSet::from_dataset(&data.dataset).expect("train set");
    let mut models = Vec::new();
    let mut ablora_time = Duration::ZERO;
    for mode in [LoraMode::Frozen, LoraMode::PlainLora, LoraMode::Ablora] {
        let t = Instant::now();
        let cfg = TrainConfig { lora_mode: mode, ..Default::default() };
        models.push(train(&data.backbone, &set, &cfg).expect("train").0);
        if mode == LoraMode::Ablora {
            ablora_time = t.elapsed();
        }
    }
    let ablora = models.pop().unwrap();
    let plain = models.pop().unwrap();
    let frozen = models.pop().unwrap();
    Runs { data, frozen, plain, ablora, ablora_time, total_time: start.elapsed() }
}

fn map_of(model: &DualEncoder, ds: &OpenSetDataset, opts: EmbedOptions) -> f64 {
    let set = embed_dataset(model, ds, &opts).expect("embed");
    evaluate_set(&set, &EvalOptions::default()).expect("evaluate").map
}

fn image_only() -> EmbedOptions {
    EmbedOptions { image_only: true, ..Default::default() }
}

fn fused(alpha: f64, scheme: FusionScheme) -> EmbedOptions {
    EmbedOptions {
        fusion: FusionConfig { alpha, scheme, ..Default::default() },
        ..Default::default()
    }
}

fn zero_init_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut checked = 0;
    for layer in 0..200 {
        let d1 = 2 + rng.below(15);
        let d2 = 2 + rng.below(15);
        let rank = 1 + rng.below(d1.min(d2) - 1);
        let frozen = MergedLinear::new(sample_normal(&mut rng, d1, d2), rng.normal_vec(d1)).unwrap();
        let cfg = AdapterConfig { rank, ..Default::default() };
        let adapted = AdaptedLinear::init(frozen.clone(), &cfg, &mut rng).unwrap();
        for _ in 0..20 {
            let z = rng.normal_vec(d2);
            let (a, f) = (adapted.forward_eval(&z).unwrap(), frozen.forward(&z).unwrap());
            let same = a.len() == f.len() && a.iter().zip(&f).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return outcome(false, format!("layer {layer} ({d1}x{d2}, r={rank}) differs from frozen forward"));
            }
            checked += 1;
        }
    }
    let t = start.elapsed();
    outcome(t < Duration::from_secs(1), format!("{checked} probes bit-identical in {t:.2?} (limit 1s)"))
}

fn merge_equivalence(runs: &Runs) -> Outcome {
    let start = Instant::now();
    let model = &runs.ablora;
    let merged = model.merged();
    let probes: Vec<Vec<f64>> = runs
        .data
        .dataset
        .objects()
        .flat_map(|o| o.views.views().map(<[f64]>::to_vec).collect::<Vec<_>>())
        .take(500)
        .collect();
    let mut worst = 0.0f64;
    for x in &probes {
        for (a, m) in [(&model.visual, &merged.visual), (&model.text, &merged.text)] {
            worst = worst.max(relative_error(&a.embed(x).unwrap(), &m.embed(x).unwrap()));
        }
    }
    let t = runs.ablora_time + start.elapsed();
    outcome(
        probes.len() == 500 && worst < 1e-10 && t < Duration::from_secs(30),
        format!("{} probes per tower, max relative deviation {worst:.2e} (< 1e-10), {t:.2?} incl. 30-epoch training", probes.len()),
    )
}

fn toy_instance(rng: &mut Rng, k: usize) -> (DualEncoder, Vec<TrainItem>, Vec<Vec<f64>>, TrainConfig) {
    let d = 2 + rng.below(7);
    let hidden = 2 + rng.below(7);
    let embed = 2 + rng.below(7);
    let rank = 1 + rng.below(3.min(d.min(hidden).min(embed) - 1));
    let views = 1 + rng.below(4);
    let classes = 2 + rng.below(4);
    let n = 1 + rng.below(4);
    let acts = [Activation::ALL[k % 4], Activation::Identity];
    let mut tower = || EncoderTower::random(&[d, hidden, embed], &acts, &[true, true], rng).unwrap();
    let (visual, text) = (tower(), tower());
    let mut model = DualEncoder::new(visual, text).unwrap();
    let acfg = AdapterConfig { rank, gamma: 0.5 + rng.uniform(), dropout_p: 0.0 };
    model.visual.attach_adapters(&acfg, rng).unwrap();
    model.text.attach_adapters(&acfg, rng).unwrap();
    for tower in [&mut model.visual, &mut model.text] {
        for (_, a) in tower.adapters_mut() {
            let (_, b, phi) = a.params_mut();
            b.data_mut().iter_mut().for_each(|v| *v = 0.3 * rng.normal());
            phi.iter_mut().for_each(|v| *v = 0.3 * rng.normal());
        }
    }
    if k % 5 == 4 {
        model.visual.to_plain_lora();
        model.text.to_plain_lora();
    }
    let items = (0..n)
        .map(|i| TrainItem {
            views: ViewSet::new(sample_normal(rng, views, d)).unwrap(),
            class: i % classes,
        })
        .collect();
    let descs = (0..classes).map(|_| rng.normal_vec(d)).collect();
    let tau = [0.07, 0.2, 0.5, 1.0][k % 4];
    let cfg = TrainConfig { temperature: tau, normalize_pooled: k.is_multiple_of(3), ..Default::default() };
    (model, items, descs, cfg)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(3);
    let mut worst = 0.0f64;
    let (mut count, mut degenerate) = (0, 0);
    let mut k = 0;
    while count < 60 {
        let (model, items, descs, cfg) = toy_instance(&mut rng, k);
        k += 1;
        let batch: Vec<&TrainItem> = items.iter().collect();
        match grad_check_model(&model, &batch, &descs, &cfg, DEFAULT_GRAD_EPS) {
            Ok(check) => {
                worst = worst.max(check.max_rel_error);
                count += 1;
            }
            // A dead ReLU layer can zero an embedding; redraw.
            Err(DacError::Degenerate { .. }) => degenerate += 1,
            Err(e) => return outcome(false, format!("instance {k}: {e}")),
        }
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-5 && t < Duration::from_secs(60),
        format!("{count} toy instances ({degenerate} zero-norm draws redrawn), max relative error {worst:.2e} (< 1e-5), {t:.2?}"),
    )
}

fn oracle_ap(rel: &[bool]) -> Option<f64> {
    let hits: Vec<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
    if hits.is_empty() {
        return None;
    }
    let precisions: f64 = hits
        .iter()
        .map(|&i| rel[..=i].iter().filter(|&&r| r).count() as f64 / (i + 1) as f64)
        .sum();
    Some(precisions / hits.len() as f64)
}

fn oracle_ndcg(rel: &[bool]) -> Option<f64> {
    let gain = |v: &[bool]| -> f64 {
        v.iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = rel.to_vec();
    ideal.sort_by(|a, b| b.cmp(a));
    let best = gain(&ideal);
    (best > 0.0).then(|| gain(rel) / best)
}

fn oracle_nmrr(rel: &[bool], gtm: usize) -> Option<f64> {
    let ng = rel.iter().filter(|&&r| r).count();
    if ng == 0 {
        return None;
    }
    let k = (4 * ng).min(2 * gtm) as f64;
    let modified = |ranks: Vec<f64>| -> f64 {
        let mean = ranks.iter().map(|&r| if r <= k { r } else { 1.25 * k }).sum::<f64>() / ng as f64;
        mean - 0.5 - ng as f64 / 2.0
    };
    let got: Vec<f64> = (0..rel.len()).filter(|&i| rel[i]).map(|i| (i + 1) as f64).collect();
    let worst: Vec<f64> = (1..=ng).map(|j| k + j as f64).collect();
    Some(modified(got) / modified(worst))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let agree = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        _ => false,
    };
    let mut cases = 0;
    for n in 1..=8usize {
        for mask in 0u32..1 << n {
            let rel: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let ng = rel.iter().filter(|&&r| r).count();
            let ok = agree(average_precision(&rel), oracle_ap(&rel))
                && agree(ndcg(&rel, None), oracle_ndcg(&rel))
                && agree(nmrr(&relevant_ranks(&rel), ng, ng.max(1)), oracle_nmrr(&rel, ng.max(1)));
            if !ok {
                return outcome(false, format!("disagreement on {rel:?}"));
            }
            cases += 1;
        }
    }
    let ap = format!("{:.4}", average_precision(&[true, false, true]).unwrap());
    let nd = format!("{:.5}", ndcg(&[true, false, true], None).unwrap());
    let nm = format!("{:.5}", nmrr(&[1, 3], 2, 2).unwrap());
    let examples = ap == "0.8333" && nd == "0.91972" && nm == "0.14286";
    let t = start.elapsed();
    outcome(
        examples && t < Duration::from_secs(10),
        format!("{cases} patterns agree to 1e-12; AP {ap}, NDCG {nd}, NMRR {nm}; {t:.2?}"),
    )
}

fn lora_ablation(runs: &Runs) -> Outcome {
    let start = Instant::now();
    let ds = &runs.data.dataset;
    let f = map_of(&runs.frozen, ds, image_only());
    let p = map_of(&runs.plain, ds, image_only());
    let a = map_of(&runs.ablora, ds, image_only());
    let t = runs.total_time + start.elapsed();
    outcome(
        a >= p && p >= f - 1.0 && a - f >= 5.0 && t < Duration::from_secs(300),
        format!("image-only mAP frozen {f:.2}, plain_lora {p:.2}, ablora {a:.2}; {t:.2?}"),
    )
}

fn fusion_ablation(runs: &Runs) -> Outcome {
    let start = Instant::now();
    let ds = &runs.data.dataset;
    let base = map_of(&runs.ablora, ds, fused(0.0, FusionScheme::Add));
    let mut best: Option<(f64, f64, f64)> = None;
    let mut table = Vec::new();
    for step in 1..=9 {
        let alpha = step as f64 / 10.0;
        let add = map_of(&runs.ablora, ds, fused(alpha, FusionScheme::Add));
        let concat = map_of(&runs.ablora, ds, fused(alpha, FusionScheme::Concat));
        table.push(format!("{alpha:.1}:{add:.1}/{concat:.1}"));
        if add - base >= 2.0 && add >= concat && best.is_none_or(|(_, b, _)| add > b) {
            best = Some((alpha, add, concat));
        }
    }
    let t = start.elapsed();
    let detail = match best {
        Some((alpha, add, concat)) => format!(
            "alpha=0 {base:.2}; best alpha {alpha:.1}: add {add:.2} >= concat {concat:.2}; add/concat [{}]; {t:.2?}",
            table.join(" ")
        ),
        None => format!("no alpha gains 2 points with add >= concat over {base:.2}: [{}]", table.join(" ")),
    };
    outcome(best.is_some() && t < Duration::from_secs(180), detail)
}

fn fusion_reduction(runs: &Runs) -> Outcome {
    let ds = &runs.data.dataset;
    let mut objects = Vec::new();
    objects.extend(ds.train.iter().cloned());
    objects.extend(ds.query.iter().cloned());
    objects.extend(ds.target.iter().cloned());
    let mut entries = 0usize;
    for model in [&runs.frozen, &runs.ablora] {
        let embs = embed_objects(model, &objects, false).unwrap();
        for e in &embs {
            let zero = FusionConfig { alpha: 0.0, ..Default::default() };
            let h = fuse(&e.g, e.f_t.as_deref(), &zero).unwrap();
            let want = activation(&e.g, Activation::Tanh);
            if h.iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits()) || h.len() != want.len() {
                return outcome(false, format!("alpha=0 descriptor of {} is not tanh(g)", e.id));
            }
            for step in 0..=10 {
                for scheme in [FusionScheme::Add, FusionScheme::Concat] {
                    let cfg = FusionConfig { alpha: step as f64 / 10.0, scheme, ..Default::default() };
                    let h = fuse(&e.g, e.f_t.as_deref(), &cfg).unwrap();
                    if let Some(v) = h.iter().find(|v| !(v.abs() < 1.0)) {
                        return outcome(false, format!("{} has fused entry {v} at alpha {:.1}", e.id, cfg.alpha));
                    }
                    entries += h.len();
                }
            }
        }
    }
    outcome(true, format!("alpha=0 equals tanh(g) bit-exact on {} objects; {entries} fused entries in (-1, 1)", objects.len()))
}

fn split_guard() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { seen: 3, unseen: 3, items_per_class: 8, views: 2, dim: 8, ..Default::default() };
    gen_synthetic(&cfg, dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    if let Err(e) = load_manifest(&path) {
        return outcome(false, format!("clean manifest rejected: {e}"));
    }
    // Relabel one query object with a seen class.
    let mut m = Manifest::read(&path).unwrap();
    let seen = m.objects.iter().find(|o| o.split == Split::Train).unwrap().label.clone();
    let victim = m.objects.iter_mut().find(|o| o.split == Split::Query).unwrap();
    victim.label = seen.clone();
    m.save(&path).unwrap();
    let lib = matches!(load_manifest(&path), Err(DacError::Split(msg)) if msg.contains(&seen));
    let out = Command::new(env!("CARGO_BIN_EXE_dac"))
        .args(["adapt", "--manifest", path.to_str().unwrap(), "--epochs", "1", "--out"])
        .arg(dir.path().join("run"))
        .env_remove("DAC_OUT_DIR")
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr);
    let cli = !out.status.success() && stderr.contains(&seen) && !dir.path().join("run").exists();

    // Independently, the in-memory validator flags the same overlap.
    let mut ds = generate(&cfg).unwrap().dataset;
    let mut moved = ds.train[0].clone();
    moved.split = Split::Target;
    ds.target.push(moved);
    let report = validate_open_set_split(&ds);
    let mem = !report.is_ok() && report.overlapping_labels.contains(&ds.train[0].label);
    outcome(
        lib && cli && mem,
        format!("overlap on '{seen}' rejected: loader {lib}, CLI exit {:?} {cli}, validator {mem}", out.status.code()),
    )
}

fn run_pipeline(dir: &Path) -> Result<(Vec<u8>, MetricsReport, String), String> {
    let bin = env!("CARGO_BIN_EXE_dac");
    let d = dir.to_str().unwrap();
    let manifest = format!("{d}/{MANIFEST_FILE}");
    let run = format!("{d}/run");
    let adapters = format!("{run}/adapters.dacf");
    let descriptors = format!("{run}/descriptors.dacf");
    let steps: [Vec<&str>; 4] = [
        vec!["gen-synth", "--out", d, "--seed", "7"],
        vec!["adapt", "--manifest", &manifest, "--seed", "7", "--out", &run],
        vec!["embed", "--manifest", &manifest, "--adapters", &adapters, "--out", &run],
        vec!["eval", "--descriptors", &descriptors, "--out", &run],
    ];
    let mut last = String::new();
    for args in &steps {
        let out = Command::new(bin).args(args).env_remove("DAC_OUT_DIR").output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
        last = String::from_utf8_lossy(&out.stdout).into_owned();
    }
    let bytes = fs::read(&adapters).map_err(|e| e.to_string())?;
    let metrics: MetricsReport =
        serde_json::from_str(&fs::read_to_string(dir.join("run/metrics.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    Ok((bytes, metrics, last))
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    let (ra, rb) = match (run_pipeline(a.path()), run_pipeline(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let same_bytes = ra.0 == rb.0;
    let same_metrics = ra.1 == rb.1 && ra.2 == rb.2;
    outcome(
        same_bytes && same_metrics,
        format!(
            "adapters {} bytes identical: {same_bytes}; MetricsReport identical: {same_metrics} (mAP / NDCG / ANMRR {}); {:.2?}",
            ra.0.len(),
            ra.1.triple(),
            start.elapsed()
        ),
    )
}

fn main() -> ExitCode {
    let runs = default_runs();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("zero-init identity", Box::new(zero_init_identity)),
        ("merge equivalence", Box::new(|| merge_equivalence(&runs))),
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("metric oracles", Box::new(metric_oracles)),
        ("LoRA ablation ordering", Box::new(|| lora_ablation(&runs))),
        ("fusion ablation", Box::new(|| fusion_ablation(&runs))),
        ("fusion reduction and bounds", Box::new(|| fusion_reduction(&runs))),
        ("open-set split guard", Box::new(split_guard)),
        ("pipeline determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

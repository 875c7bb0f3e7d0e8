//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Runs as a plain binary so the lines are always shown.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use artemis::datasets::{
    generate_synthetic, read_feature_bank, write_feature_bank, FeatureBank, Split, SynthSpec,
};
use artemis::evaluation::EvalOptions;
use artemis::evaluation::{
    aggregate_suite, build_queries, round_half_up_2, score_matrix, Convention, MetricTable,
};
use artemis::harness::{bench_latency, gradient_suite, run_ablation, BenchConfig, GradSuiteConfig};
use artemis::head::{
    decode_checkpoint, encode_checkpoint, head_mac_count, head_param_count, load_checkpoint,
    save_checkpoint,
};
use artemis::training::{bbc_loss, bbc_loss_from_scores, TrainConfig, Triplet};
use artemis::{Flavor, HeadDims, HeadParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tolerances and sizes pinned by the criteria.
const PARAMS_512: u64 = 1_313_281;
const MACS_512: u64 = 1_313_792;
const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-10;
const UNIFORM_LOSS_TOL: f64 = 1e-12;
const FIXTURE_LOSS_TOL: f64 = 1e-6;
const MIN_ARTEMIS_R10: f64 = 80.0;
const MIN_MARGIN_R10: f64 = 5.0;
const MAX_LATENCY_RATIO: f64 = 1.5;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: f64, what: &str) -> Result<f64, String> {
    let s = start.elapsed().as_secs_f64();
    ensure(s < limit, || format!("{what} took {s:.1}s, limit {limit}s"))?;
    Ok(s)
}

fn parameter_accounting() -> Check {
    let start = Instant::now();
    let dims = HeadDims::square(512);
    let params = HeadParams::zeros(dims).map_err(|e| e.to_string())?;
    let count = head_param_count(&params);
    let macs = head_mac_count(dims);
    ensure(count == PARAMS_512, || {
        format!("parameter count {count}, expected {PARAMS_512}")
    })?;
    ensure(macs == MACS_512, || {
        format!("MAC count {macs}, expected {MACS_512}")
    })?;
    let millions = round_half_up_2(count as f64 / 1e6);
    ensure((millions - 1.31).abs() < 1e-9, || {
        format!("{count} parameters is {millions} M, expected 1.31 M")
    })?;
    let gmacs = (macs as f64 / 1e6).round() / 1e3;
    ensure(gmacs == 0.001, || {
        format!("{macs} MACs is {gmacs} GMAC, expected 0.001")
    })?;
    let s = within_time(start, 1.0, "accounting")?;
    Ok(format!(
        "{count} parameters (+1.31 M), {macs} MACs (+0.001 GMAC), {s:.3}s"
    ))
}

fn cells(pairs: &[(&str, &[(&str, f64)])]) -> MetricTable {
    pairs
        .iter()
        .map(|(cat, metrics)| {
            (
                cat.to_string(),
                metrics.iter().map(|(m, v)| (m.to_string(), *v)).collect(),
            )
        })
        .collect()
}

fn aggregation_oracle() -> Check {
    let start = Instant::now();
    let fashion = cells(&[
        ("dress", &[("R@10", 27.16), ("R@50", 52.40)]),
        ("shirt", &[("R@10", 21.78), ("R@50", 43.64)]),
        ("toptee", &[("R@10", 29.20), ("R@50", 54.83)]),
    ]);
    let shoes = cells(&[("all", &[("R@1", 18.72), ("R@10", 53.11), ("R@50", 79.31)])]);
    let cirr = cells(&[("all", &[("R@5", 46.10), ("Rs@1", 39.99)])]);
    let cases = [
        ("fashioniq", Convention::Fashioniq, &fashion, 38.17),
        ("shoes", Convention::Shoes, &shoes, 50.38),
        ("cirr", Convention::Cirr, &cirr, 43.05),
    ];
    let mut got = Vec::new();
    for (name, convention, table, expected) in cases {
        let value = aggregate_suite(table, convention).map_err(|e| e.to_string())?;
        ensure(value == expected, || {
            format!("{name} aggregate {value}, expected {expected}")
        })?;
        got.push(format!("{name} {value:.2}"));
    }
    let direct = [
        (round_half_up_2((26.05 + 50.29) / 2.0), 38.17),
        (round_half_up_2((18.72 + 53.11 + 79.31) / 3.0), 50.38),
        (round_half_up_2((46.10 + 39.99) / 2.0), 43.05),
    ];
    for (value, expected) in direct {
        ensure(value == expected, || {
            format!("rounded mean {value}, expected {expected}")
        })?;
    }
    let s = within_time(start, 1.0, "aggregation")?;
    Ok(format!("{}, {s:.3}s", got.join(", ")))
}

fn gradient_suite_check() -> Check {
    let start = Instant::now();
    let small = GradSuiteConfig {
        dims: 8,
        instances: 100,
        tol: GRAD_TOL,
        ..GradSuiteConfig::default()
    };
    let large = GradSuiteConfig {
        dims: 512,
        instances: 3,
        tol: GRAD_TOL,
        per_block: Some(4),
        ..GradSuiteConfig::default()
    };
    let mut parts = Vec::new();
    for cfg in [small, large] {
        let report = gradient_suite(&cfg).map_err(|e| e.to_string())?;
        let functions = report.functions();
        ensure(functions.len() == 2 + Flavor::ALL.len(), || {
            format!("checked functions {functions:?}")
        })?;
        if let Some(f) = report.failures().next() {
            return Err(format!(
                "dims {}: {} failed on instance {} (max rel error {:.3e})",
                cfg.dims, f.function, f.instance, f.max_rel_error
            ));
        }
        let worst = report
            .entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max);
        let coords: usize = report.entries.iter().map(|e| e.coordinates).sum();
        parts.push(format!(
            "dims {} x {} instances, {coords} coordinates, max rel {worst:.1e}",
            cfg.dims, cfg.instances
        ));
    }
    let s = within_time(start, 60.0, "gradient suite")?;
    Ok(format!("{}; tol {GRAD_TOL:e}, {s:.1}s", parts.join("; ")))
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let spec = SynthSpec {
            dim_image: 32,
            dim_text: 32,
            n_train: 0,
            n_eval: 50,
            gallery: 200,
            seed,
            ..SynthSpec::default()
        };
        let ds = generate_synthetic(&spec)
            .and_then(|d| d.dataset())
            .map_err(|e| e.to_string())?;
        let params = common::random_head(HeadDims::square(32), 1000 + seed);
        let queries = build_queries(&ds.triplets, Split::Val, false);
        ensure(queries.len() == 50 && ds.gallery.len() == 200, || {
            "instance is not 50 x 200".into()
        })?;
        for flavor in Flavor::ALL {
            let matrix =
                score_matrix(&queries, &ds, &params, flavor, 1).map_err(|e| e.to_string())?;
            for (q, spec) in queries.iter().enumerate() {
                let r = ds.images.get(&spec.ref_id).expect("reference");
                let m = ds.modifiers.get(&spec.mod_id).expect("modifier");
                for (g, id) in ds.gallery.iter().enumerate() {
                    let expected =
                        common::score(&params, r, m, ds.images.get(id).expect("target"), flavor);
                    let diff = (matrix.row(q)[g] - expected).abs();
                    ensure(diff <= ORACLE_TOL, || {
                        format!("seed {seed} {flavor} ({q}, {g}) off by {diff:e}")
                    })?;
                    worst = worst.max(diff);
                }
            }
        }
    }
    let s = within_time(start, 30.0, "oracle comparison")?;
    Ok(format!(
        "3 seeds x 6 flavors x 50 x 200, max deviation {worst:.1e} <= {ORACLE_TOL:e}, {s:.1}s"
    ))
}

fn loss_properties() -> Check {
    let start = Instant::now();
    for b in [2usize, 4, 8, 32] {
        let scores = vec![vec![0.37; b]; b];
        let loss = bbc_loss_from_scores(&scores, 7.5).map_err(|e| e.to_string())?;
        ensure((loss - (b as f64).ln()).abs() <= UNIFORM_LOSS_TOL, || {
            format!("B={b}: {loss} vs ln B")
        })?;
    }
    // Through the tape: identical targets make every row constant.
    let spec = SynthSpec {
        n_attributes: 6,
        flip_count: 2,
        dim_image: 8,
        dim_text: 8,
        n_train: 4,
        n_eval: 0,
        gallery: 0,
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec)
        .and_then(|d| d.dataset())
        .map_err(|e| e.to_string())?;
    let params = common::random_head(HeadDims::square(8), 5);
    let shared_target = ds
        .images
        .get(&ds.triplets.records[0].tgt_id)
        .expect("target");
    let batch: Vec<Triplet> = ds
        .triplets
        .records
        .iter()
        .map(|t| Triplet {
            r: ds.images.get(&t.ref_id).expect("ref"),
            m: ds.modifiers.get(&t.mod_id).expect("mod"),
            t: shared_target,
        })
        .collect();
    for flavor in Flavor::ALL {
        let (loss, _) = bbc_loss(&batch, &params, flavor).map_err(|e| e.to_string())?;
        ensure((loss - 4f64.ln()).abs() <= UNIFORM_LOSS_TOL, || {
            format!("{flavor}: equal-score batch loss {loss}")
        })?;
    }

    let fixture =
        bbc_loss_from_scores(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).map_err(|e| e.to_string())?;
    let closed = (1.0 + (-1f64).exp()).ln();
    ensure((fixture - closed).abs() <= FIXTURE_LOSS_TOL, || {
        format!("B=2 fixture {fixture} vs {closed}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..50 {
        let b = rng.gen_range(2..10);
        let gamma = rng.gen_range(0.5..20.0);
        let scores: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let base = bbc_loss_from_scores(&scores, gamma).map_err(|e| e.to_string())?;
        let shifted: Vec<Vec<f64>> = scores
            .iter()
            .map(|row| {
                let c: f64 = rng.gen_range(-3.0..3.0);
                row.iter().map(|s| s + c).collect()
            })
            .collect();
        let moved = bbc_loss_from_scores(&shifted, gamma).map_err(|e| e.to_string())?;
        ensure((moved - base).abs() <= 1e-12, || {
            format!("trial {trial}: row shift moved loss {base} -> {moved}")
        })?;
        for i in 0..b {
            let mut up = scores.clone();
            up[i][i] += 0.05;
            let lower = bbc_loss_from_scores(&up, gamma).map_err(|e| e.to_string())?;
            ensure(lower < base, || {
                format!("trial {trial}: raising s[{i}][{i}] gave {lower} >= {base}")
            })?;
        }
    }
    let s = within_time(start, 10.0, "loss properties")?;
    Ok(format!("ln B within {UNIFORM_LOSS_TOL:e}, B=2 fixture {fixture:.6}, shift invariance and diagonal monotonicity on 50 trials, {s:.2}s"))
}

fn synthetic_learnability() -> Check {
    let start = Instant::now();
    let ds = generate_synthetic(&SynthSpec::default())
        .and_then(|d| d.dataset())
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let report = run_ablation(&ds, &cfg, &EvalOptions::default(), Split::Val, |_, _| {})
        .map_err(|e| e.to_string())?;
    let r10 = |f: Flavor| report.metric(f, "R@10").unwrap_or(f64::NAN);
    let full = r10(Flavor::Artemis);
    eprint!("{}", report.to_table());
    ensure(full >= MIN_ARTEMIS_R10, || {
        format!("artemis R@10 {full:.2} < {MIN_ARTEMIS_R10}")
    })?;
    for f in Flavor::ALL.into_iter().filter(|&f| f != Flavor::Artemis) {
        let other = r10(f);
        ensure(full - other >= MIN_MARGIN_R10, || {
            format!("artemis R@10 {full:.2} vs {f} {other:.2}: margin below {MIN_MARGIN_R10}")
        })?;
    }
    ensure(r10(Flavor::IsOnly) > r10(Flavor::ImageOnly), || {
        "is_only does not beat image_only".into()
    })?;
    ensure(r10(Flavor::EmOnly) > r10(Flavor::TextOnly), || {
        "em_only does not beat text_only".into()
    })?;
    let s = within_time(start, 600.0, "ablation")?;
    let row = Flavor::ALL
        .iter()
        .map(|&f| format!("{f} {:.0}", r10(f)))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!("R@10: {row}; {s:.1}s"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_artemis"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "`artemis {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    run_cli(&[
        "synth",
        "--out",
        &p("data"),
        "--train",
        "600",
        "--val",
        "60",
        "--gallery",
        "400",
        "--seed",
        "3",
    ])?;
    for run in ["a", "b"] {
        let train = p(&format!("train_{run}"));
        run_cli(&[
            "train",
            "--data",
            &p("data"),
            "--out",
            &train,
            "--epochs",
            "4",
            "--seed",
            "9",
            "--set",
            "batch_size=16",
        ])?;
        let ckpt = format!("{train}/checkpoint.ahp");
        run_cli(&[
            "eval",
            "--data",
            &p("data"),
            "--checkpoint",
            &ckpt,
            "--out",
            &p(&format!("eval_{run}")),
            "--rankings",
            "5",
        ])?;
    }
    let mut compared = 0;
    for file in [
        "train_{}/checkpoint.ahp",
        "train_{}/best_val.ahp",
        "train_{}/metrics.json",
        "eval_{}/metrics.json",
        "eval_{}/rankings.jsonl",
    ] {
        let a = read(&dir.path().join(file.replace("{}", "a")))?;
        let b = read(&dir.path().join(file.replace("{}", "b")))?;
        ensure(a == b, || {
            format!("{} differs between runs", file.replace("{}", "*"))
        })?;
        compared += a.len();
    }
    let s = within_time(start, 120.0, "determinism runs")?;
    Ok(format!("checkpoints, metric JSON and rankings bit-identical across two runs ({compared} bytes), {s:.1}s"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn format_fidelity() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let golden_bank = read(&fixtures().join("bank_2x3.afb"))?;
    let expected = FeatureBank::new(
        3,
        vec!["alpha".into(), "beta".into()],
        vec![0.5, -1.0, 2.0, 0.25, -0.125, 1.5],
    )
    .map_err(|e| e.to_string())?;
    ensure(expected.encode() == golden_bank, || {
        "bank encoding differs from the pinned fixture".into()
    })?;
    let loaded = read_feature_bank(&fixtures().join("bank_2x3.afb")).map_err(|e| e.to_string())?;
    ensure(loaded == expected, || {
        "pinned bank fixture decodes to different content".into()
    })?;
    let copy = dir.path().join("copy.afb");
    write_feature_bank(&loaded, &copy).map_err(|e| e.to_string())?;
    ensure(read(&copy)? == golden_bank, || {
        "bank rewrite is not bit-identical".into()
    })?;
    ensure(
        read(&dir.path().join("copy.afb.ids.jsonl"))?
            == read(&fixtures().join("bank_2x3.afb.ids.jsonl"))?,
        || "id sidecar rewrite differs".into(),
    )?;

    let golden_head = read(&fixtures().join("head_t1_i2_h1.ahp"))?;
    let flat: Vec<f64> = (0..17)
        .map(|i| 0.25 * f64::from(i + 1) * if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let params = HeadParams::from_flat(HeadDims::new(1, 2, 1), &flat).map_err(|e| e.to_string())?;
    ensure(encode_checkpoint(&params) == golden_head, || {
        "checkpoint encoding differs from the pinned fixture".into()
    })?;
    let decoded =
        decode_checkpoint(&golden_head, Path::new("fixture")).map_err(|e| e.to_string())?;
    ensure(decoded == params, || {
        "pinned checkpoint decodes to different parameters".into()
    })?;

    let mut files = 0;
    for seed in 0..5u64 {
        let data = generate_synthetic(&SynthSpec {
            n_train: 50,
            n_eval: 10,
            gallery: 80,
            seed,
            ..SynthSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("bank{seed}.afb"));
        write_feature_bank(&data.images, &path).map_err(|e| e.to_string())?;
        let back = read_feature_bank(&path).map_err(|e| e.to_string())?;
        let bits = |b: &FeatureBank| b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(
            bits(&back) == bits(&data.images) && back.ids() == data.images.ids(),
            || format!("bank {seed} round trip differs"),
        )?;

        let head = common::random_head(HeadDims::new(16, 24, 12), seed);
        let path = dir.path().join(format!("head{seed}.ahp"));
        save_checkpoint(&head, &path).map_err(|e| e.to_string())?;
        let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
        let hbits = |h: &HeadParams| h.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(
            hbits(&back) == hbits(&head) && back.dims == head.dims,
            || format!("checkpoint {seed} round trip differs"),
        )?;
        ensure(encode_checkpoint(&back) == read(&path)?, || {
            format!("checkpoint {seed} re-encoding differs")
        })?;
        files += 2;
    }
    let s = within_time(start, 30.0, "format checks")?;
    Ok(format!("2 pinned fixtures match byte for byte, {files} seeded files round-trip bit-identically, {s:.2}s"))
}

fn latency_ordering() -> Check {
    let start = Instant::now();
    let spec = SynthSpec {
        n_attributes: 16,
        dim_image: 512,
        dim_text: 512,
        n_train: 0,
        n_eval: 200,
        gallery: 15_000,
        class_confusers: 0,
        near_misses: 0,
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec)
        .and_then(|d| d.dataset())
        .map_err(|e| e.to_string())?;
    let params = HeadParams::init(HeadDims::square(512), 0).map_err(|e| e.to_string())?;
    let report = bench_latency(
        &ds,
        &params,
        &BenchConfig {
            repeats: 5,
            ..BenchConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    eprint!("{}", report.to_table());
    let total = |f: Flavor| report.timing(f).map(|t| t.total.min).unwrap_or(f64::NAN);
    let (full, late) = (total(Flavor::Artemis), total(Flavor::LateFusion));
    ensure(full >= late, || {
        format!("artemis {full:.3}s faster than late_fusion {late:.3}s")
    })?;
    let ratio = full / late;
    ensure(ratio <= MAX_LATENCY_RATIO, || {
        format!("artemis / late_fusion = {ratio:.3} > {MAX_LATENCY_RATIO}")
    })?;
    let s = start.elapsed().as_secs_f64();
    Ok(format!(
        "{} queries x {} gallery at dims 512, min of 5 totals: artemis {full:.3}s, late_fusion {late:.3}s, ratio {ratio:.3} <= {MAX_LATENCY_RATIO}, {s:.1}s",
        report.queries, report.gallery
    ))
}

type Criterion = (&'static str, fn() -> Check);

fn main() {
    let criteria: [Criterion; 9] = [
        ("parameter accounting", parameter_accounting),
        ("metric aggregation", aggregation_oracle),
        ("gradient suite", gradient_suite_check),
        ("oracle equivalence", oracle_equivalence),
        ("loss properties", loss_properties),
        ("synthetic learnability", synthetic_learnability),
        ("determinism", determinism),
        ("format fidelity", format_fidelity),
        ("latency ordering", latency_ordering),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

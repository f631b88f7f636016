//! Acceptance suite: one PASS/FAIL line per criterion, in order.
//!
//! Criteria 7, 8 and 10 train real models on the desk configuration and
//! take most of the runtime (about half an hour on one core).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use glca_core::attention::{glca_fuse, scaled_dot_attention, AttentionMask};
use glca_core::harness::ablate::ablate;
use glca_core::harness::config::RunConfig;
use glca_core::harness::dataset::load_split;
use glca_core::harness::gradcheck::{micro_config, run_gradcheck, TOLERANCE};
use glca_core::harness::memory::{bench_memory, growth};
use glca_core::harness::opcheck::{op_gradchecks, OP_TOLERANCE};
use glca_core::harness::synth::{generate_scene, SceneSpec, TEST_DIR, TRAIN_DIR};
use glca_core::model::{focal_loss, forward_train, AblationFlags, InferMode};
use glca_core::tiling::{extract_patch, plan_grid, stitch};
use glca_core::{ConfusionMatrix, ModelParams, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// ---------------------------------------------------------------- 1

fn brute_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&AttentionMask>) -> Vec<f64> {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let (nk, dv) = (k.shape()[0], v.shape()[1]);
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let keys: Vec<usize> = (0..nk).filter(|&j| mask.is_none_or(|m| m.allows(i, j))).collect();
        let scores: Vec<f64> = keys
            .iter()
            .map(|&j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = weights.iter().sum();
        for (w, &j) in weights.iter().zip(&keys) {
            for c in 0..dv {
                out[i * dv + c] += w / z * v.at(&[j, c]);
            }
        }
    }
    out
}

fn random_mask(nq: usize, nk: usize, rng: &mut ChaCha8Rng) -> AttentionMask {
    let mut allowed: Vec<bool> = (0..nq * nk).map(|_| rng.gen_bool(0.6)).collect();
    for i in 0..nq {
        let j = rng.gen_range(0..nk);
        allowed[i * nk + j] = true;
    }
    AttentionMask::new(nq, nk, allowed).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let (nq, nk, d) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=4));
        let t = |n: usize, rng: &mut ChaCha8Rng| Tensor::uniform(&[n, d], -2.0, 2.0, rng);
        let (q, k, v) = (t(nq, &mut rng), t(nk, &mut rng), t(nk, &mut rng));
        let (kg, vg) = (t(nq, &mut rng), t(nq, &mut rng));
        let ql = t(nk, &mut rng);
        let masked = case % 2 == 1;
        let m_gl = masked.then(|| random_mask(nq, nk, &mut rng));
        let m_lg = masked.then(|| random_mask(nk, nq, &mut rng));

        let tape = Tape::new();
        let c = |x: &Tensor| Var::constant(x.clone());
        let sda = scaled_dot_attention(&tape, &c(&q), &c(&k), &c(&v), m_gl.as_ref()).unwrap();
        worst = worst.max(max_diff(sda.value().data(), &brute_attention(&q, &k, &v, m_gl.as_ref())));

        let (fg, fl) =
            glca_fuse(&tape, &c(&q), &c(&k), &c(&v), &c(&ql), &c(&kg), &c(&vg), m_gl.as_ref(), m_lg.as_ref()).unwrap();
        let want_g: Vec<f64> =
            brute_attention(&q, &k, &v, m_gl.as_ref()).iter().zip(q.data()).map(|(a, b)| a + b).collect();
        let want_l: Vec<f64> =
            brute_attention(&ql, &kg, &vg, m_lg.as_ref()).iter().zip(ql.data()).map(|(a, b)| a + b).collect();
        worst = worst.max(max_diff(fg.value().data(), &want_g));
        worst = worst.max(max_diff(fl.value().data(), &want_l));
    }
    verdict(worst <= 1e-10, format!("200 instances, max abs diff {worst:.2e} (bound 1e-10)"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut residual_exact = true;
    let mut mask_exact = true;
    for _ in 0..50 {
        let (ng, nl, d) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=4));
        let qg = Tensor::uniform(&[ng, d], -2.0, 2.0, &mut rng);
        let ql = Tensor::uniform(&[nl, d], -2.0, 2.0, &mut rng);
        let kl = Tensor::uniform(&[nl, d], -2.0, 2.0, &mut rng);
        let kg = Tensor::uniform(&[ng, d], -2.0, 2.0, &mut rng);
        let tape = Tape::new();
        let c = |x: &Tensor| Var::constant(x.clone());
        let zl = c(&Tensor::zeros(&[nl, d]));
        let zg = c(&Tensor::zeros(&[ng, d]));
        let (fg, fl) = glca_fuse(&tape, &c(&qg), &c(&kl), &zl, &c(&ql), &c(&kg), &zg, None, None).unwrap();
        residual_exact &= fg.value().data() == qg.data() && fl.value().data() == ql.data();

        let v = Tensor::uniform(&[nl, d], -2.0, 2.0, &mut rng);
        let plain = scaled_dot_attention(&tape, &c(&qg), &c(&kl), &c(&v), None).unwrap();
        let all = AttentionMask::all(ng, nl);
        let masked = scaled_dot_attention(&tape, &c(&qg), &c(&kl), &c(&v), Some(&all)).unwrap();
        mask_exact &= plain.value().data() == masked.value().data();
    }
    verdict(
        residual_exact && mask_exact,
        format!("zero values return queries exactly: {residual_exact}; all-true mask bit-identical: {mask_exact}"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let cfg = micro_config(4);
    let shape_ok = cfg.patch == 8 && cfg.d_model() == 4 && cfg.num_classes == 2;
    let model = run_gradcheck(&cfg, 0, None).unwrap();
    let ops = op_gradchecks(0).unwrap();
    let worst_op = ops.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let elapsed = start.elapsed();
    verdict(
        shape_ok && model.max_rel_error < TOLERANCE && worst_op.max_rel_error < OP_TOLERANCE && elapsed < Duration::from_secs(60),
        format!(
            "model {:.2e} in {} (< 1e-4), {} ops worst {:.2e} in {} (< 1e-5), {:.1}s (< 60s)",
            model.max_rel_error,
            model.worst,
            ops.len(),
            worst_op.max_rel_error,
            worst_op.op,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut identity = true;
    let mut covered = true;
    for _ in 0..50 {
        let patch = rng.gen_range(1..=40);
        let overlap = rng.gen_range(0..patch);
        let (h, w) = (rng.gen_range(1..=96), rng.gen_range(1..=96));
        let grid = plan_grid(h, w, patch, overlap).unwrap();
        let image = Tensor::uniform(&[2, h, w], -1.0, 1.0, &mut rng);
        let parts: Vec<Tensor> = (0..grid.len()).map(|i| extract_patch(&image, &grid, i).unwrap()).collect();
        identity &= stitch(&parts, &grid).unwrap().data() == image.data();
        covered &= grid.coverage().iter().all(|&c| c >= 1);
    }
    let uhr = plan_grid(2448, 2448, 500, 50).unwrap();
    let rows: HashSet<usize> = uhr.origins.iter().map(|o| o.0).collect();
    let last = uhr.origins.iter().map(|o| o.0).max().unwrap();
    let uhr_ok = uhr.len() == 36 && rows.len() == 6 && last == 1948;
    let elapsed = start.elapsed();
    verdict(
        identity && covered && uhr_ok && elapsed < Duration::from_secs(5),
        format!(
            "50 configs: exact identity {identity}, coverage ≥ 1 {covered}; 2448/500/50 → {} patches, {} per axis, last origin {last}; {:.2}s",
            uhr.len(),
            rows.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = true;
    for _ in 0..100 {
        let k = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=16) * rng.gen_range(1..=16);
        let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &gt, None).unwrap();

        let mut oracle = Vec::new();
        for c in 0..k as u8 {
            let p: HashSet<usize> = (0..n).filter(|&i| pred[i] == c).collect();
            let g: HashSet<usize> = (0..n).filter(|&i| gt[i] == c).collect();
            let union = p.union(&g).count();
            oracle.push((union > 0).then(|| p.intersection(&g).count() as f64 / union as f64));
        }
        let defined: Vec<f64> = oracle.iter().flatten().copied().collect();
        let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let oa = (0..n).filter(|&i| pred[i] == gt[i]).count() as f64 / n as f64;
        exact &= cm.iou_per_class() == oracle && cm.miou() == miou && cm.overall_accuracy() == Some(oa);
    }
    let elapsed = start.elapsed();
    verdict(
        exact && elapsed < Duration::from_secs(5),
        format!("100 random maps: exact agreement {exact}; {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Verdict {
    let run = RunConfig::default();
    let m = &run.model;
    let constants = m.gamma == 6.0 && m.lambda == 0.15;

    let scene = generate_scene(&SceneSpec { height: 64, width: 64, num_classes: 3, seed: 0 }, 0).unwrap();
    let params = ModelParams::init(m, 0).unwrap();
    let grid = plan_grid(64, 64, m.patch, m.overlap).unwrap();
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let b = forward_train(&tape, &bound, m, &scene.image, &scene.labels, &grid).unwrap().breakdown;
    let unit = b.lambda == 0.15 && b.total == b.main + b.aux_global + b.aux_local + 0.15 * b.coupling;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = Tensor::uniform(&[4, 5, 5], -3.0, 3.0, &mut rng);
    let targets: Vec<u8> = (0..25).map(|_| rng.gen_range(0..4)).collect();
    let ce: f64 = (0..25)
        .map(|p| {
            let z: Vec<f64> = (0..4).map(|c| logits.data()[c * 25 + p]).collect();
            let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + z.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            lse - z[usize::from(targets[p])]
        })
        .sum::<f64>()
        / 25.0;
    let ce_err = (focal_loss(&logits, &targets, 0.0).unwrap() - ce).abs();
    let single = focal_loss(&Tensor::zeros(&[2, 1, 1]), &[0], 6.0).unwrap();
    let single_err = (single - 0.5f64.powi(6) * 2f64.ln()).abs();

    verdict(
        constants && unit && ce_err <= 1e-12 && single_err <= 1e-12,
        format!(
            "γ={} λ={} unit-weight total {unit}; focal(γ=0) − CE {ce_err:.1e}; single pixel − (0.5)⁶·ln2 {single_err:.1e}",
            m.gamma, m.lambda
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Verdict {
    let start = Instant::now();
    let cfg = RunConfig::load(&configs_dir().join("memory.conf")).unwrap();
    let rows = bench_memory(&cfg.model, &[128, 256], 0).unwrap();
    let patch = growth(&rows, InferMode::Patch, 128, 256).unwrap();
    let global = growth(&rows, InferMode::Global, 128, 256).unwrap();
    let at = |mode| rows.iter().find(|r| r.mode == mode && r.side == 256).unwrap().transient_peak_bytes;
    let (p256, g256) = (at(InferMode::Patch), at(InferMode::Global));
    let elapsed = start.elapsed();
    verdict(
        patch < 1.25 && global >= 3.0 && p256 < g256 && elapsed < Duration::from_secs(120),
        format!(
            "patch ×{patch:.2} (< 1.25), global ×{global:.2} (≥ 3), at 256² patch {p256} B < global {g256} B; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 7 and 10

fn glca(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_glca"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn glca");
    assert!(out.status.success(), "glca {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn same_files(a: &Path, b: &Path) -> bool {
    let names = |d: &Path| -> Vec<_> {
        let mut v: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let (na, nb) = (names(a), names(b));
    na == nb && na.iter().all(|n| fs::read(a.join(n)).unwrap() == fs::read(b.join(n)).unwrap())
}

struct DeskRuns {
    criterion_7: Verdict,
    criterion_10: Verdict,
}

fn desk_runs(work: &Path, conf: &str) -> DeskRuns {
    let cfg = RunConfig::load(Path::new(conf)).unwrap();
    let m = &cfg.model;
    let setup_ok = cfg.steps == 500
        && (cfg.data.scene.height, cfg.data.scene.width) == (64, 64)
        && m.num_classes == 3
        && (m.patch, m.overlap, m.global_size) == (32, 8, 32)
        && m.flags == AblationFlags::ALL[3];

    let start = Instant::now();
    glca(work, &["--config", conf, "gen-data", "--out", "data"]);
    let train = glca(work, &["--config", conf, "--seed", "0", "--deterministic", "train", "--data", "data", "--out", "run1"]);
    let elapsed = start.elapsed();
    let stdout = String::from_utf8(train.stdout).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    let miou = metrics["miou"].as_f64().unwrap();
    let criterion_7 = verdict(
        setup_ok && miou >= 0.85 && elapsed < Duration::from_secs(600),
        format!(
            "held-out mIoU {miou:.4} (≥ 0.85) after {} steps, λ={}, lr {}/{}; {:.0}s incl. data generation (< 600s)",
            cfg.steps,
            m.lambda,
            cfg.adam.lr_global,
            cfg.adam.lr_local,
            elapsed.as_secs_f64()
        ),
    );

    glca(work, &["--config", conf, "--seed", "0", "--deterministic", "train", "--data", "data", "--out", "run2"]);
    glca(work, &["--config", conf, "gen-data", "--out", "data2"]);
    let runs_same = same_files(&work.join("run1"), &work.join("run2"));
    let data_same = [TRAIN_DIR, TEST_DIR].iter().all(|s| same_files(&work.join("data").join(s), &work.join("data2").join(s)));
    let criterion_10 = verdict(
        runs_same && data_same,
        format!("train logs+checkpoints byte-identical {runs_same}; gen-data byte-identical {data_same}"),
    );
    DeskRuns { criterion_7, criterion_10 }
}

// ---------------------------------------------------------------- 8

fn criterion_8(data: &Path, conf: &str) -> Verdict {
    let cfg = RunConfig::load(Path::new(conf)).unwrap();
    let train_set = load_split(&data.join(TRAIN_DIR)).unwrap();
    let test_set = load_split(&data.join(TEST_DIR)).unwrap();
    let start = Instant::now();
    let table = ablate(&cfg, &train_set, &test_set).unwrap();
    let [none, sa, mask, full] = AblationFlags::ALL;
    let (w_none, w_sa, w_mask) = (table.wins(full, none), table.wins(full, sa), table.wins(full, mask));
    let cells: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{} [{}]", r.variant, r.miou.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")))
        .collect();
    verdict(
        table.seeds.len() == 5 && w_none >= 4 && w_sa >= 3 && w_mask >= 3,
        format!(
            "full ≥ no-attention on {w_none}/5 (need 4), ≥ self-attention {w_sa}/5, ≥ mask {w_mask}/5 (need 3); {}; {:.0}s",
            cells.join("; "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let titles = [
        "attention oracle equivalence",
        "residual identity and all-true mask",
        "gradient suite",
        "tiling round-trip",
        "metrics oracle",
        "loss constants",
        "desk-scale convergence",
        "ablation ordering",
        "memory scaling",
        "determinism",
    ];
    let mut results: Vec<Option<Verdict>> = (0..10).map(|_| None).collect();
    let mut report = |n: usize, v: Verdict| {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag}  {}: {}", titles[n - 1], v.detail);
        results[n - 1] = Some(v);
    };

    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    report(9, criterion_9());

    let work = tempfile::tempdir().unwrap();
    let conf = configs_dir().join("desk.conf");
    let conf = conf.to_str().unwrap();
    let desk = desk_runs(work.path(), conf);
    report(7, desk.criterion_7);
    report(10, desk.criterion_10);
    report(8, criterion_8(&work.path().join("data"), conf));

    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.as_ref().is_some_and(|v| v.passed))
        .map(|(i, _)| i + 1)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all 10 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}

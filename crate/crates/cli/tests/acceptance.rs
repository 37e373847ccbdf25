//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always show up in `cargo test` output.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;
#[path = "../../core/tests/support/synth.rs"]
mod synth;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use oracle::{OracleMask, OracleWeights};
use proxyseg_core::bundle::{read_manifest, validate_manifest, Grid, WindowFeatures};
use proxyseg_core::evalkit::{coherence, miou, PatchLabels, Thresholds};
use proxyseg_core::pam::{
    apply_pam, attention_from_similarity, attention_scores, build_mask, build_mask_unforced, normalize_similarity,
    similarity, Attention, AttentionResult,
};
use proxyseg_core::segmenter::{pipeline_canvas, tile_windows};
use proxyseg_core::tensor::{mean_all, softmax_masked};
use proxyseg_core::{
    load_bundle, load_text, load_weights, BundleError, ClipHeadWeights, ConfusionMatrix, MaskMode, PamConfig, Tensor,
    TensorError, WindowRect,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn tensor(m: &oracle::Mat) -> Tensor {
    Tensor::new(vec![m.len(), m[0].len()], oracle::flatten(m)).unwrap()
}

fn shared(r: &AttentionResult) -> &Tensor {
    match &r.attn {
        Attention::Shared(t) => t,
        Attention::PerHead(_) => panic!("proxy attention is shared across heads"),
    }
}

fn window(x: Tensor, grid: Grid, v: Tensor, v_grid: Grid) -> WindowFeatures {
    WindowFeatures {
        rect: WindowRect {
            x0: 0,
            y0: 0,
            w: 1,
            h: 1,
        },
        x_vfm: x,
        vfm_grid: grid,
        v_clip: v,
        clip_grid: v_grid,
        q_clip: None,
        k_clip: None,
    }
}

fn random_weights(rng: &mut ChaCha8Rng, d: usize, dj: usize) -> (ClipHeadWeights, OracleWeights) {
    let opw = oracle::random_mat(rng, d, d);
    let opb = oracle::random_mat(rng, 1, d);
    let lnw = oracle::random_mat(rng, 1, d);
    let lnb = oracle::random_mat(rng, 1, d);
    let proj = oracle::random_mat(rng, d, dj);
    let vec1 = |m: &oracle::Mat| Tensor::new(vec![d], oracle::flatten(m)).unwrap();
    (
        ClipHeadWeights {
            out_proj_weight: tensor(&opw),
            out_proj_bias: vec1(&opb),
            ln_post_weight: vec1(&lnw),
            ln_post_bias: vec1(&lnb),
            ln_eps: 1e-5,
            visual_proj: tensor(&proj),
        },
        OracleWeights {
            out_proj_weight: opw,
            out_proj_bias: opb[0].clone(),
            ln_weight: lnw[0].clone(),
            ln_bias: lnb[0].clone(),
            ln_eps: 1e-5f32 as f64,
            visual_proj: proj,
        },
    )
}

fn random_grid(rng: &mut ChaCha8Rng, max_len: usize) -> Grid {
    loop {
        let (h, w) = (rng.gen_range(1..=max_len), rng.gen_range(1..=max_len));
        if h * w <= max_len {
            return Grid { h, w };
        }
    }
}

fn pam_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..200 {
        let grid = random_grid(&mut rng, 8);
        let v_grid = Grid {
            h: rng.gen_range(1..=grid.h),
            w: rng.gen_range(1..=grid.w),
        };
        let dx = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=2);
        let dv = rng.gen_range(1..=8 / n);
        let dj = rng.gen_range(1..=4);
        let (mode, omode) = match i % 3 {
            0 => (MaskMode::Adaptive, OracleMask::Adaptive),
            1 => (MaskMode::Hard { alpha: 0.3 }, OracleMask::Hard(0.3)),
            _ => (MaskMode::None, OracleMask::None),
        };
        let x = oracle::random_mat(&mut rng, grid.len(), dx);
        let v: Vec<oracle::Mat> = (0..n).map(|_| oracle::random_mat(&mut rng, v_grid.len(), dv)).collect();
        let vt = Tensor::new(vec![n, v_grid.len(), dv], v.iter().flat_map(oracle::flatten).collect()).unwrap();
        let (weights, ow) = random_weights(&mut rng, n * dv, dj);
        let cfg = PamConfig {
            mask_mode: mode,
            ..PamConfig::default()
        };
        let w = window(tensor(&x), grid, vt.clone(), v_grid);
        let attn = attention_scores(&w, &cfg).map_err(|e| e.to_string())?;
        let z = apply_pam(&attn, &vt, v_grid, &weights).map_err(|e| e.to_string())?;
        let a = oracle::proxy_attention(&x, 1.2, 3.0, omode);
        let want = oracle::pam(&[a], &v, (v_grid.h, v_grid.w), (grid.h, grid.w), &ow);
        worst = worst.max(oracle::max_abs_diff(&want, z.data()));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < 1e-5, "max |z - oracle| = {worst:.3e}");
    ensure!(secs < 5.0, "took {secs:.2}s");
    Ok(format!("max abs diff {worst:.2e}, {secs:.3}s"))
}

fn beta_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let grid = random_grid(&mut rng, 8);
        let d = rng.gen_range(1..=4);
        let x = tensor(&oracle::random_mat(&mut rng, grid.len(), d));
        let run = |beta| {
            let cfg = PamConfig {
                beta,
                gamma: 3.0,
                mask_mode: MaskMode::None,
                ..PamConfig::default()
            };
            let w = window(x.clone(), grid, Tensor::zeros(&[1, 1, 1]).unwrap(), Grid { h: 1, w: 1 });
            attention_scores(&w, &cfg).unwrap()
        };
        let (a, b) = (run(0.0), run(5.0));
        worst = worst.max(shared(&a).max_abs_diff(shared(&b)).unwrap());
    }
    ensure!(worst < 1e-6, "max diff {worst:.3e}");
    Ok(format!("max diff {worst:.2e} over 100 instances"))
}

fn mask_duality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..100 {
        let l = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=4);
        let s = similarity(&tensor(&oracle::random_mat(&mut rng, l, d))).unwrap();
        let a = normalize_similarity(&s, 1.2, 3.0).unwrap();
        let alpha = 1.2 * mean_all(&s).unwrap();
        let adaptive = build_mask(&a, 0.0).unwrap();
        let hard = build_mask(&s, alpha).unwrap();
        ensure!(adaptive == hard, "instance {k}: mask sets differ");
    }
    Ok("100/100 identical mask sets".into())
}

fn worked_example() -> Check {
    let s = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let a = normalize_similarity(&s, 1.2, 3.0).unwrap();
    let want_a = [1.2, -1.8, -1.8, 1.2];
    for (g, w) in a.data().iter().zip(want_a) {
        ensure!((g - w).abs() < 1e-6, "A = {:?}", a.data());
    }
    let mask = build_mask(&a, 0.0).unwrap();
    ensure!(mask.is_masked(0, 1) && mask.is_masked(1, 0), "off-diagonals not masked");
    let (attn, frac) = attention_from_similarity(&s, &PamConfig::default()).unwrap();
    for (g, w) in attn.data().iter().zip([1.0, 0.0, 0.0, 1.0]) {
        ensure!((g - w).abs() < 1e-6, "attention = {:?}", attn.data());
    }
    ensure!(frac == 0.5, "mask fraction {frac}");
    Ok("A = [[1.2,-1.8],[-1.8,1.2]], attention = I".into())
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden")
}

fn degeneracy() -> Check {
    let x = Tensor::new(vec![6, 3], vec![0.7; 18]).unwrap();
    let w = window(
        x,
        Grid { h: 2, w: 3 },
        Tensor::zeros(&[1, 1, 1]).unwrap(),
        Grid { h: 1, w: 1 },
    );
    let r = attention_scores(&w, &PamConfig::default()).map_err(|e| e.to_string())?;
    let a = shared(&r);
    for i in 0..6 {
        for j in 0..6 {
            let want = if i == j { 1.0 } else { 0.0 };
            ensure!(
                a.data()[i * 6 + j] == want,
                "attention[{i}][{j}] = {}",
                a.data()[i * 6 + j]
            );
        }
    }
    // Zero features too, then the whole golden pipeline on constant input.
    let z = window(
        Tensor::zeros(&[4, 2]).unwrap(),
        Grid { h: 2, w: 2 },
        Tensor::zeros(&[1, 1, 1]).unwrap(),
        Grid { h: 1, w: 1 },
    );
    let rz = attention_scores(&z, &PamConfig::default()).map_err(|e| e.to_string())?;
    ensure!(
        shared(&rz).data().iter().all(|v| v.is_finite()),
        "zero features give non-finite attention"
    );

    let mut b = load_bundle(&golden_dir().join("bundles/scene_a/manifest.json")).unwrap();
    for win in &mut b.windows {
        let shape = win.x_vfm.shape().to_vec();
        win.x_vfm = Tensor::new(shape.clone(), vec![0.25; shape.iter().product()]).unwrap();
    }
    let weights = load_weights(&b.weights_path).unwrap();
    let text = load_text(&golden_dir().join("text.json")).unwrap();
    let logits = pipeline_canvas(&b, &weights, &text, &PamConfig::default())
        .and_then(|c| c.mean_logits())
        .map_err(|e| e.to_string())?;
    ensure!(logits.data().iter().all(|v| v.is_finite()), "non-finite logits");
    Ok("identity attention, finite pipeline output".into())
}

fn softmax_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=4);
        let s = similarity(&tensor(&oracle::random_mat(&mut rng, l, d))).unwrap();
        let a = normalize_similarity(&s, 1.2, 3.0).unwrap();
        let mask = build_mask(&a, 0.0).unwrap();
        let p = softmax_masked(&a, Some(&mask)).unwrap();
        for i in 0..l {
            let row = &p.data()[i * l..(i + 1) * l];
            worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            for (j, &v) in row.iter().enumerate() {
                ensure!(!mask.is_masked(i, j) || v == 0.0, "masked entry ({i},{j}) = {v}");
            }
        }
    }
    ensure!(worst < 1e-6, "row sum off by {worst:.3e}");
    // Constant features give A < 0 everywhere; without the diagonal rule
    // every row is masked.
    let s = similarity(&Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap()).unwrap();
    let a = normalize_similarity(&s, 1.2, 3.0).unwrap();
    let unforced = build_mask_unforced(&a, 0.0).unwrap();
    match softmax_masked(&a, Some(&unforced)) {
        Err(TensorError::FullyMasked { .. }) => {}
        other => return Err(format!("expected a fully-masked error, got {other:?}")),
    }
    Ok(format!(
        "row sums within {worst:.1e}, masked = 0, fully-masked row rejected"
    ))
}

fn miou_oracle() -> Check {
    let cm = ConfusionMatrix::from_counts(2, 255, vec![2, 2, 0, 4]).unwrap();
    let m = miou(&cm).unwrap().mean;
    ensure!((m - 0.58333).abs() < 1e-5 && (m - 7.0 / 12.0).abs() < 1e-6, "mIoU {m}");
    let perfect = ConfusionMatrix::from_counts(3, 255, vec![5, 0, 0, 0, 3, 0, 0, 0, 9]).unwrap();
    ensure!(miou(&perfect).unwrap().mean == 1.0, "perfect fixture");
    let gap = ConfusionMatrix::from_counts(3, 255, vec![2, 2, 0, 0, 4, 0, 0, 0, 0]).unwrap();
    let r = miou(&gap).unwrap();
    ensure!(
        r.per_class[2].is_none() && (r.mean - 7.0 / 12.0).abs() < 1e-12,
        "zero-union class counted"
    );
    Ok(format!("mIoU {m:.6}, perfect 1.0, empty class excluded"))
}

fn exhaustive_ap(scores: &[f32], labels: &[Option<u32>]) -> f64 {
    let l = labels.len();
    let mut pairs = Vec::new();
    for i in 0..l {
        for j in 0..l {
            if let (true, Some(a), Some(b)) = (i != j, labels[i], labels[j]) {
                pairs.push((scores[i * l + j] as f64, a == b));
            }
        }
    }
    let total = pairs.iter().filter(|p| p.1).count() as f64;
    let mut ts: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in ts {
        let tp = pairs.iter().filter(|p| p.0 >= t && p.1).count() as f64;
        let n = pairs.iter().filter(|p| p.0 >= t).count() as f64;
        ap += (tp / total - prev) * tp / n;
        prev = tp / total;
    }
    ap
}

fn coherence_ap() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 50 {
        let labels: Vec<Option<u32>> = (0..12)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    None
                } else {
                    Some(rng.gen_range(0..3))
                }
            })
            .collect();
        let scores: Vec<f32> = (0..144).map(|_| rng.gen_range(0..30) as f32 / 30.0).collect();
        let pl = PatchLabels {
            grid_h: 3,
            grid_w: 4,
            labels: labels.clone(),
        };
        let Ok(curve) = coherence(
            &Tensor::new(vec![12, 12], scores.clone()).unwrap(),
            &pl,
            &Thresholds::Auto,
        ) else {
            continue;
        };
        worst = worst.max((curve.ap - exhaustive_ap(&scores, &labels)).abs());
        n += 1;
    }
    ensure!(worst < 1e-9, "AP off by {worst:.3e}");

    let labels: Vec<Option<u32>> = (0..12).map(|i| Some(i % 3)).collect();
    let pl = PatchLabels {
        grid_h: 3,
        grid_w: 4,
        labels: labels.clone(),
    };
    let perfect: Vec<f32> = (0..144)
        .map(|k| if labels[k / 12] == labels[k % 12] { 0.8 } else { 0.2 })
        .collect();
    let ap = coherence(&Tensor::new(vec![12, 12], perfect).unwrap(), &pl, &Thresholds::Auto)
        .unwrap()
        .ap;
    ensure!(ap == 1.0, "perfect AP {ap}");
    let c = coherence(
        &Tensor::new(vec![12, 12], vec![0.4; 144]).unwrap(),
        &pl,
        &Thresholds::Auto,
    )
    .unwrap();
    let rho = c.positives as f64 / c.pairs as f64;
    ensure!((c.ap - rho).abs() < 1e-12, "constant AP {} vs rho {rho}", c.ap);
    Ok(format!(
        "50 fixtures within {worst:.1e}, perfect 1.0, constant = rho {rho:.4}"
    ))
}

fn tiling() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let (h, w) = (rng.gen_range(336..=1200), rng.gen_range(336..=1200));
        let stride = [112, 224, 336][rng.gen_range(0..3)];
        let rects = tile_windows(h, w, 336, stride).map_err(|e| e.to_string())?;
        let mut covered = vec![false; h * w];
        for r in &rects {
            ensure!(r.x0 + r.w <= w && r.y0 + r.h <= h, "{h}x{w}: rect {r:?} out of bounds");
            for y in r.y0..r.y0 + r.h {
                covered[y * w + r.x0..y * w + r.x0 + r.w].fill(true);
            }
        }
        if let Some(p) = covered.iter().position(|c| !c) {
            return Err(format!(
                "{h}x{w} stride {stride}: pixel ({}, {}) uncovered",
                p % w,
                p / w
            ));
        }
    }
    let n = tile_windows(336, 448, 336, 112).unwrap().len();
    ensure!(n == 2, "336x448 gave {n} windows");
    Ok("500 sizes fully covered, 336x448 -> 2 windows".into())
}

fn bundle_format() -> Check {
    let dir = tempfile::tempdir().unwrap();
    synth::write_dataset(dir.path(), &[("rt", 10, 13)], 8, 4);
    let mpath = dir.path().join("bundles/rt/manifest.json");
    let original = synth::manifest("rt", 10, 13, 8, 4);
    let m = read_manifest(&mpath).map_err(|e| e.to_string())?;
    ensure!(m.windows == original.windows, "manifest windows changed on round trip");
    let b = load_bundle(&mpath).map_err(|e| e.to_string())?;
    for (i, (w, e)) in b.windows.iter().zip(&m.windows).enumerate() {
        let s = 1000 + i as u64 * 10;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(
            bits(&w.x_vfm) == bits(&synth::tensor(&[e.hx * e.wx, e.dx], s)),
            "x of window {i} differs"
        );
        ensure!(
            bits(&w.v_clip) == bits(&synth::tensor(&[synth::N_HEADS, e.hv * e.wv, e.dv], s + 1)),
            "v of window {i} differs"
        );
    }

    let mut named = Vec::new();
    let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
    json["windows"][0].as_object_mut().unwrap().remove("v_path");
    fs::write(&mpath, json.to_string()).unwrap();
    match load_bundle(&mpath) {
        Err(BundleError::MissingKey { key }) if key == "windows[0].v_path" => named.push(key),
        other => return Err(format!("missing key: {other:?}")),
    }
    let mut bad = original.clone();
    bad.windows[1].dv = 3;
    match validate_manifest(&bad) {
        Err(e @ BundleError::ShapeInconsistency { .. }) if e.field() == Some("windows[1].dv") => {
            named.push("windows[1].dv".into())
        }
        other => return Err(format!("head split: {other:?}")),
    }
    let mut bad = original.clone();
    bad.windows.pop();
    match validate_manifest(&bad) {
        Err(BundleError::CoverageGap { x, y }) => named.push(format!("coverage gap at ({x},{y})")),
        other => return Err(format!("coverage: {other:?}")),
    }
    Ok(format!("bit-identical round trip; rejected: {}", named.join(", ")))
}

fn golden_fixture() -> Check {
    let g = golden_dir();
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (k, jobs) in ["1", "4", "1", "4"].iter().enumerate() {
        let out = dir.path().join(k.to_string());
        let o = Command::new(env!("CARGO_BIN_EXE_proxyseg"))
            .args(["segment", "--bundles"])
            .arg(g.join("bundles"))
            .arg("--text")
            .arg(g.join("text.json"))
            .arg("--out")
            .arg(&out)
            .args(["--jobs", jobs])
            .output()
            .unwrap();
        ensure!(
            o.status.success(),
            "segment failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        outputs.push(out);
    }
    for id in ["scene_a", "scene_b"] {
        let want = fs::read(g.join(format!("golden/{id}.pgm"))).unwrap();
        for out in &outputs {
            ensure!(
                fs::read(out.join(format!("{id}.pgm"))).unwrap() == want,
                "{id} differs in {}",
                out.display()
            );
        }
    }
    Ok("2 images byte-identical over 4 runs (--jobs 1 and 4)".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("PAM oracle equivalence", pam_oracle_equivalence),
        ("beta invariance", beta_invariance),
        ("adaptive/hard mask duality", mask_duality),
        ("worked example", worked_example),
        ("degeneracy", degeneracy),
        ("softmax contract", softmax_contract),
        ("mIoU oracle", miou_oracle),
        ("coherence AP", coherence_ap),
        ("tiling", tiling),
        ("bundle format", bundle_format),
        ("end-to-end golden fixture", golden_fixture),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

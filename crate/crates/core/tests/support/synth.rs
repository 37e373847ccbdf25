//! Small synthetic feature bundles written to disk for loader and CLI tests.
#![allow(dead_code)]

use std::path::Path;

use proxyseg_core::bundle::{write_json, write_tensor, Manifest, TextManifest, WeightsManifest, WindowEntry};
use proxyseg_core::tensor::Tensor;

pub const HX: usize = 2;
pub const DX: usize = 3;
pub const HV: usize = 2;
pub const N_HEADS: usize = 2;
pub const DV: usize = 2;
pub const D: usize = N_HEADS * DV;
pub const D_JOINT: usize = 3;
pub const CLASSES: [&str; 3] = ["road", "tree", "car"];

/// Sliding-window offsets along one axis, written out independently of the
/// engine's tiler.
pub fn offsets(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = dim - window;
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    out.push(last);
    out
}

pub fn manifest(image_id: &str, h: usize, w: usize, window: usize, stride: usize) -> Manifest {
    let mut windows = Vec::new();
    for y0 in offsets(h, window, stride) {
        for x0 in offsets(w, window, stride) {
            let i = windows.len();
            windows.push(WindowEntry {
                x0,
                y0,
                w: window,
                h: window,
                x_path: format!("w{i}_x.npy"),
                hx: HX,
                wx: HX,
                dx: DX,
                v_path: format!("w{i}_v.npy"),
                hv: HV,
                wv: HV,
                dv: DV,
                q_path: Some(format!("w{i}_q.npy")),
                k_path: Some(format!("w{i}_k.npy")),
            });
        }
    }
    Manifest {
        schema_version: 1,
        image_id: image_id.to_owned(),
        resized_h: h,
        resized_w: w,
        window,
        stride,
        clip_model: "synthetic-clip".into(),
        vfm_model: "synthetic-vfm".into(),
        clip_patch: window / HV,
        vfm_patch: window / HX,
        d: D,
        d_joint: D_JOINT,
        n_heads: N_HEADS,
        weights_path: "../weights.json".into(),
        windows,
    }
}

pub fn values(n: usize, seed: u64) -> Vec<f32> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 20_000) as f32 / 10_000.0 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape.to_vec(), values(shape.iter().product(), seed)).unwrap()
}

/// Writes `manifest.json` and its arrays into `dir`.
pub fn write_bundle(dir: &Path, m: &Manifest, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, w) in m.windows.iter().enumerate() {
        let s = seed * 1000 + i as u64 * 10;
        write_tensor(dir, &w.x_path, &tensor(&[w.hx * w.wx, w.dx], s), "x").unwrap();
        let lv = w.hv * w.wv;
        write_tensor(dir, &w.v_path, &tensor(&[m.n_heads, lv, w.dv], s + 1), "v").unwrap();
        if let Some(q) = &w.q_path {
            write_tensor(dir, q, &tensor(&[m.n_heads, lv, w.dv], s + 2), "q").unwrap();
        }
        if let Some(k) = &w.k_path {
            write_tensor(dir, k, &tensor(&[m.n_heads, lv, w.dv], s + 3), "k").unwrap();
        }
    }
    write_json(&dir.join("manifest.json"), m).unwrap();
}

pub fn write_weights(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    write_tensor(dir, "opw.npy", &tensor(&[D, D], 91), "w").unwrap();
    write_tensor(dir, "opb.npy", &tensor(&[D], 92), "w").unwrap();
    let lnw = Tensor::new(vec![D], values(D, 93).iter().map(|v| 1.0 + 0.1 * v).collect()).unwrap();
    write_tensor(dir, "lnw.npy", &lnw, "w").unwrap();
    write_tensor(dir, "lnb.npy", &tensor(&[D], 94), "w").unwrap();
    write_tensor(dir, "proj.npy", &tensor(&[D, D_JOINT], 95), "w").unwrap();
    let m = WeightsManifest {
        schema_version: 1,
        d: D,
        d_joint: D_JOINT,
        ln_eps: Some(1e-5),
        out_proj_weight: "opw.npy".into(),
        out_proj_bias: "opb.npy".into(),
        ln_post_weight: "lnw.npy".into(),
        ln_post_bias: "lnb.npy".into(),
        visual_proj: "proj.npy".into(),
    };
    write_json(&dir.join("weights.json"), &m).unwrap();
}

pub fn write_text(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let raw = values(CLASSES.len() * D_JOINT, 96);
    let mut data = Vec::with_capacity(raw.len());
    for row in raw.chunks(D_JOINT) {
        let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| (*v as f64 / n) as f32));
    }
    write_tensor(
        dir,
        "text.npy",
        &Tensor::new(vec![CLASSES.len(), D_JOINT], data).unwrap(),
        "t",
    )
    .unwrap();
    let m = TextManifest {
        schema_version: 1,
        class_names: CLASSES.iter().map(|s| s.to_string()).collect(),
        embeddings_path: "text.npy".into(),
    };
    write_json(&dir.join("text.json"), &m).unwrap();
}

/// `root/weights.json`, `root/text.json` and one bundle per entry under
/// `root/bundles/<image_id>/`.
pub fn write_dataset(root: &Path, images: &[(&str, usize, usize)], window: usize, stride: usize) {
    write_weights(root);
    write_text(root);
    for (k, (id, h, w)) in images.iter().enumerate() {
        let mut m = manifest(id, *h, *w, window, stride);
        m.weights_path = "../../weights.json".into();
        write_bundle(&root.join("bundles").join(id), &m, k as u64 + 1);
    }
}

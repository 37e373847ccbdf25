use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use proxyseg_core::bundle::{read_manifest, validate_manifest, Manifest, WeightsManifest};
use proxyseg_core::export::read_label_map;
use proxyseg_core::{load_bundle, load_text, load_weights, ClipHeadWeights, FeatureBundle, LabelMap, TextEmbeddings};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::args::Settings;
use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Resolves `--bundles` to manifest paths, sorted.
pub fn discover(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !path.exists() {
        return Err(CliError::invalid(format!(
            "`bundles`: {} does not exist",
            path.display()
        )));
    }
    if path.is_file() {
        return Ok(vec![path.to_owned()]);
    }
    let mut found = Vec::new();
    for entry in WalkDir::new(path).follow_links(true).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Io(format!("walking {}: {e}", path.display())))?;
        if entry.file_type().is_file() && entry.file_name() == MANIFEST_NAME {
            found.push(entry.into_path());
        }
    }
    if found.is_empty() {
        return Err(CliError::invalid(format!(
            "`bundles`: no {MANIFEST_NAME} under {}",
            path.display()
        )));
    }
    Ok(found)
}

pub struct Job {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub weights_path: PathBuf,
}

/// Reads and validates every manifest up front, so bad input fails before
/// any compute starts.
pub fn plan(settings: &Settings) -> Result<Vec<Job>, CliError> {
    let root = Settings::require(&settings.bundles, "bundles")?;
    let mut jobs = Vec::new();
    let mut ids = BTreeMap::new();
    for path in discover(root)? {
        let in_file = |e: CliError| CliError::invalid(format!("{}: {e}", path.display()));
        let manifest = read_manifest(&path).map_err(|e| in_file(e.into()))?;
        validate_manifest(&manifest).map_err(|e| in_file(e.into()))?;
        if manifest.image_id.is_empty() || manifest.image_id.contains(['/', '\\']) || manifest.image_id.starts_with('.')
        {
            return Err(in_file(CliError::invalid(format!(
                "`image_id`: '{}' is not usable as a file name",
                manifest.image_id
            ))));
        }
        if let Some(prev) = ids.insert(manifest.image_id.clone(), path.clone()) {
            return Err(CliError::invalid(format!(
                "`image_id`: '{}' appears in both {} and {}",
                manifest.image_id,
                prev.display(),
                path.display()
            )));
        }
        let weights_path = match &settings.weights {
            Some(w) => w.clone(),
            None => path.parent().unwrap_or(Path::new(".")).join(&manifest.weights_path),
        };
        // Bundles sharing one weights file load it once.
        let weights_path = fs::canonicalize(&weights_path).unwrap_or(weights_path);
        jobs.push(Job {
            manifest_path: path,
            manifest,
            weights_path,
        });
    }
    Ok(jobs)
}

fn weights_field(settings: &Settings) -> &'static str {
    if settings.weights.is_some() {
        "weights"
    } else {
        "weights_path"
    }
}

/// Loads each distinct weights file once.
pub fn load_all_weights(
    jobs: &[Job],
    settings: &Settings,
) -> Result<BTreeMap<PathBuf, Arc<ClipHeadWeights>>, CliError> {
    let mut out = BTreeMap::new();
    for job in jobs {
        if out.contains_key(&job.weights_path) {
            continue;
        }
        let w = load_weights(&job.weights_path).map_err(|e| CliError::from(e).in_field(weights_field(settings)))?;
        if w.d() != job.manifest.d || w.d_joint() != job.manifest.d_joint {
            return Err(CliError::invalid(format!(
                "`{}`: weights are d={} d_joint={}, bundle {} expects d={} d_joint={}",
                weights_field(settings),
                w.d(),
                w.d_joint(),
                job.manifest.image_id,
                job.manifest.d,
                job.manifest.d_joint
            )));
        }
        out.insert(job.weights_path.clone(), Arc::new(w));
    }
    Ok(out)
}

pub fn text(settings: &Settings) -> Result<TextEmbeddings, CliError> {
    let path = Settings::require(&settings.text, "text")?;
    load_text(path).map_err(|e| CliError::from(e).in_field("text"))
}

/// Loads bundles on the current pool, preserving order.
pub fn load_bundles(jobs: &[Job]) -> Result<Vec<FeatureBundle>, CliError> {
    jobs.par_iter()
        .map(|j| {
            load_bundle(&j.manifest_path)
                .map_err(|e| CliError::from(e).in_field(&j.manifest_path.display().to_string()))
        })
        .collect()
}

pub fn check_text(text: &TextEmbeddings, jobs: &[Job]) -> Result<(), CliError> {
    let dj = text.z_t.shape()[1];
    match jobs.iter().find(|j| j.manifest.d_joint != dj) {
        Some(j) => Err(CliError::invalid(format!(
            "`text`: embeddings have width {dj}, bundle {} has d_joint {}",
            j.manifest.image_id, j.manifest.d_joint
        ))),
        None => Ok(()),
    }
}

/// Ground truth for an image: `gt` itself when it is a file, otherwise
/// `<gt>/<image_id>.npy` or `<gt>/<image_id>.pgm`.
pub fn gt_path(gt: &Path, image_id: &str) -> Result<PathBuf, CliError> {
    if gt.is_file() {
        return Ok(gt.to_owned());
    }
    if !gt.is_dir() {
        return Err(CliError::invalid(format!("`gt`: {} does not exist", gt.display())));
    }
    ["npy", "pgm"]
        .iter()
        .map(|ext| gt.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::invalid(format!("`gt`: no {image_id}.npy or {image_id}.pgm in {}", gt.display())))
}

pub fn read_gt(gt: &Path, image_id: &str) -> Result<LabelMap, CliError> {
    let p = gt_path(gt, image_id)?;
    read_label_map(&p).map_err(|e| CliError::from(e).in_field("gt"))
}

/// Referenced input files of a run, for the run manifest.
pub fn input_files(jobs: &[Job], text_path: &Path) -> Vec<PathBuf> {
    let mut files = vec![text_path.to_owned()];
    if let Some(rel) = json_field(text_path, "embeddings_path") {
        files.push(text_path.parent().unwrap_or(Path::new(".")).join(rel));
    }
    for job in jobs {
        let dir = job.manifest_path.parent().unwrap_or(Path::new("."));
        files.push(job.manifest_path.clone());
        for w in &job.manifest.windows {
            files.push(dir.join(&w.x_path));
            files.push(dir.join(&w.v_path));
            files.extend(w.q_path.iter().chain(&w.k_path).map(|p| dir.join(p)));
        }
        files.push(job.weights_path.clone());
        let wdir = job.weights_path.parent().unwrap_or(Path::new("."));
        if let Some(m) = fs::read_to_string(&job.weights_path)
            .ok()
            .and_then(|t| serde_json::from_str::<WeightsManifest>(&t).ok())
        {
            for rel in [
                &m.out_proj_weight,
                &m.out_proj_bias,
                &m.ln_post_weight,
                &m.ln_post_bias,
                &m.visual_proj,
            ] {
                files.push(wdir.join(rel));
            }
        }
    }
    let mut files: Vec<PathBuf> = files.into_iter().map(|p| fs::canonicalize(&p).unwrap_or(p)).collect();
    files.sort();
    files.dedup();
    files
}

fn json_field(path: &Path, key: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
    v.get(key)?.as_str().map(str::to_owned)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

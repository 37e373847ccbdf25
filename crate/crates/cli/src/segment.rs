use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use proxyseg_core::export::{output_path, write_color_png, write_pgm16, Palette};
use proxyseg_core::{
    run_pipeline, ClipHeadWeights, FeatureBundle, FinalizeOptions, LabelMap, PamConfig, TextEmbeddings,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::Settings;
use crate::error::CliError;
use crate::inputs::{self, Job};

pub const RUN_MANIFEST: &str = "run_manifest.json";

pub struct Segmented {
    pub map: LabelMap,
    pub seconds: f64,
}

/// Segments every bundle on the current pool; results keep bundle order.
pub fn segment_all(
    bundles: &[FeatureBundle],
    jobs: &[Job],
    weights: &BTreeMap<PathBuf, Arc<ClipHeadWeights>>,
    text: &TextEmbeddings,
    cfg: &PamConfig,
    opts: &FinalizeOptions,
) -> Result<Vec<Segmented>, CliError> {
    bundles
        .par_iter()
        .zip(jobs)
        .map(|(b, job)| {
            let start = Instant::now();
            let map = run_pipeline(b, &weights[&job.weights_path], text, cfg, opts)
                .map_err(|e| CliError::invalid(format!("{}: {e}", b.image_id)))?;
            let seconds = start.elapsed().as_secs_f64();
            log::info!("{}: {} windows in {:.3}s", b.image_id, b.windows.len(), seconds);
            Ok(Segmented { map, seconds })
        })
        .collect()
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    bundles: Option<&'a PathBuf>,
    weights: Option<&'a PathBuf>,
    text: Option<&'a PathBuf>,
    palette: Option<&'a PathBuf>,
    pam: &'a PamConfig,
    background_threshold: Option<f32>,
    jobs: Option<usize>,
}

#[derive(Serialize)]
struct ImageRecord {
    image_id: String,
    manifest: PathBuf,
    windows: usize,
    output: PathBuf,
    seconds: f64,
}

#[derive(Serialize)]
struct InputRecord {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: ConfigEcho<'a>,
    inputs: Vec<InputRecord>,
    images: Vec<ImageRecord>,
}

pub fn run(settings: &Settings) -> Result<(), CliError> {
    let out = Settings::require(&settings.out, "out")?.to_owned();
    let jobs = inputs::plan(settings)?;
    let text = inputs::text(settings)?;
    inputs::check_text(&text, &jobs)?;
    let palette = settings
        .palette
        .as_deref()
        .map(|p| Palette::load(p).map_err(|e| CliError::from(e).in_field("palette")))
        .transpose()?;
    let weights = inputs::load_all_weights(&jobs, settings)?;
    let opts = FinalizeOptions {
        background_threshold: settings.background_threshold,
    };

    let pool = settings.pool()?;
    let (bundles, results) = pool.install(|| -> Result<_, CliError> {
        let bundles = inputs::load_bundles(&jobs)?;
        let results = segment_all(&bundles, &jobs, &weights, &text, &settings.pam, &opts)?;
        Ok((bundles, results))
    })?;

    fs::create_dir_all(&out).map_err(|e| CliError::write(&out, e))?;
    let mut images = Vec::with_capacity(results.len());
    for ((b, job), r) in bundles.iter().zip(&jobs).zip(&results) {
        let pgm = output_path(&out, &b.image_id, "pgm");
        write_pgm16(&pgm, &r.map)?;
        if let Some(p) = &palette {
            write_color_png(&output_path(&out, &b.image_id, "png"), &r.map, p)?;
        }
        println!("{}\t{}", b.image_id, pgm.display());
        images.push(ImageRecord {
            image_id: b.image_id.clone(),
            manifest: job.manifest_path.clone(),
            windows: b.windows.len(),
            output: pgm,
            seconds: r.seconds,
        });
    }

    let text_path = Settings::require(&settings.text, "text")?;
    let inputs = inputs::input_files(&jobs, text_path)
        .into_iter()
        .map(|path| {
            Ok(InputRecord {
                sha256: inputs::sha256_file(&path)?,
                path,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let record = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: "segment",
        config: ConfigEcho {
            bundles: settings.bundles.as_ref(),
            weights: settings.weights.as_ref(),
            text: settings.text.as_ref(),
            palette: settings.palette.as_ref(),
            pam: &settings.pam,
            background_threshold: settings.background_threshold,
            jobs: settings.jobs,
        },
        inputs,
        images,
    };
    let path = out.join(RUN_MANIFEST);
    let json = serde_json::to_string_pretty(&record).expect("run manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| CliError::write(&path, e))
}

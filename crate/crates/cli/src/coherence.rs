use std::fs::{self, File};
use std::io::BufWriter;

use proxyseg_core::evalkit::{patch_majority, CoherenceAccumulator, Thresholds};
use proxyseg_core::pam::coherence_scores;
use proxyseg_core::{AttnSource, FeatureBundle, LabelMap, WindowFeatures};
use rayon::prelude::*;

use crate::args::Settings;
use crate::error::CliError;
use crate::inputs;

fn crop(gt: &LabelMap, w: &WindowFeatures) -> LabelMap {
    let r = w.rect;
    let labels = (r.y0..r.y0 + r.h)
        .flat_map(|y| (r.x0..r.x0 + r.w).map(move |x| gt.get(x, y)))
        .collect();
    LabelMap {
        height: r.h,
        width: r.w,
        labels,
    }
}

/// Scored pairs of one bundle for each requested source.
fn bundle_pairs(
    b: &FeatureBundle,
    gt: &LabelMap,
    sources: &[AttnSource],
    scale_qk: bool,
    ignore_index: u32,
) -> Result<Vec<CoherenceAccumulator>, CliError> {
    if (gt.height, gt.width) != (b.resized_h, b.resized_w) {
        return Err(CliError::invalid(format!(
            "{}: ground truth is {}x{}, bundle is {}x{}",
            b.image_id, gt.height, gt.width, b.resized_h, b.resized_w
        )));
    }
    let mut accs = vec![CoherenceAccumulator::new(); sources.len()];
    for (i, w) in b.windows.iter().enumerate() {
        let cropped = crop(gt, w);
        for (acc, &source) in accs.iter_mut().zip(sources) {
            let (scores, grid) = coherence_scores(w, source, scale_qk)
                .map_err(|e| CliError::invalid(format!("{} window {i}: {e}", b.image_id)))?;
            if w.rect.h % grid.h != 0 || w.rect.w % grid.w != 0 || w.rect.h / grid.h != w.rect.w / grid.w {
                return Err(CliError::invalid(format!(
                    "{} window {i}: {}x{} rect does not split into square patches on a {}x{} grid",
                    b.image_id, w.rect.h, w.rect.w, grid.h, grid.w
                )));
            }
            let labels = patch_majority(&cropped, w.rect.h / grid.h, ignore_index);
            acc.add(&scores, &labels)?;
        }
    }
    Ok(accs)
}

pub fn run(settings: &Settings) -> Result<(), CliError> {
    let gt = Settings::require(&settings.gt, "gt")?;
    let jobs = inputs::plan(settings)?;
    let sources = &settings.sources;
    if sources.is_empty() {
        return Err(CliError::invalid(
            "`sources`: at least one attention source is required",
        ));
    }
    let pool = settings.pool()?;
    let per_bundle = pool.install(|| -> Result<Vec<_>, CliError> {
        let bundles = inputs::load_bundles(&jobs)?;
        bundles
            .par_iter()
            .map(|b| {
                let g = inputs::read_gt(gt, &b.image_id)?;
                bundle_pairs(b, &g, sources, settings.pam.scale_qk, settings.ignore_index)
            })
            .collect()
    })?;

    if let Some(out) = &settings.out {
        fs::create_dir_all(out).map_err(|e| CliError::write(out, e))?;
    }
    for (k, source) in sources.iter().enumerate() {
        let mut acc = CoherenceAccumulator::new();
        for accs in &per_bundle {
            acc.merge(accs[k].clone());
        }
        let curve = acc
            .curve(&Thresholds::Auto)
            .map_err(|e| CliError::invalid(format!("{source}: {e}")))?;
        println!(
            "{source}\tAP\t{:.6}\tpairs\t{}\tpositives\t{}",
            curve.ap, curve.pairs, curve.positives
        );
        if let Some(out) = &settings.out {
            let path = out.join(format!("pr_{source}.csv"));
            let f = File::create(&path).map_err(|e| CliError::write(&path, e))?;
            curve
                .write_csv(BufWriter::new(f))
                .map_err(|e| CliError::write(&path, e))?;
        }
    }
    Ok(())
}

use std::fs;

use proxyseg_core::evalkit::miou;
use proxyseg_core::{ConfusionMatrix, FinalizeOptions, MaskMode, PamConfig};

use crate::args::{Settings, SweepParam};
use crate::error::CliError;
use crate::eval::accumulate;
use crate::inputs;
use crate::segment::segment_all;

fn config_for(base: &PamConfig, param: SweepParam, value: f64) -> PamConfig {
    let mut cfg = *base;
    match param {
        SweepParam::Beta => cfg.beta = value,
        SweepParam::Gamma => cfg.gamma = value,
        SweepParam::Alpha => cfg.mask_mode = MaskMode::Hard { alpha: value },
    }
    cfg
}

pub fn run(settings: &Settings) -> Result<(), CliError> {
    let param = settings
        .param
        .ok_or_else(|| CliError::invalid("`param`: required, one of beta, gamma, alpha"))?;
    let values = settings.values.clone().unwrap_or_else(|| param.default_values());
    if values.is_empty() {
        return Err(CliError::invalid("`values`: empty grid"));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let cfg = config_for(&settings.pam, param, v);
            cfg.validate()
                .map(|_| cfg)
                .map_err(|e| CliError::invalid(format!("{}={v}: {e}", param.name())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let gt_root = Settings::require(&settings.gt, "gt")?;
    let jobs = inputs::plan(settings)?;
    let text = inputs::text(settings)?;
    inputs::check_text(&text, &jobs)?;
    let weights = inputs::load_all_weights(&jobs, settings)?;
    let opts = FinalizeOptions {
        background_threshold: settings.background_threshold,
    };
    let pool = settings.pool()?;
    let bundles = pool.install(|| inputs::load_bundles(&jobs))?;
    let gts = bundles
        .iter()
        .map(|b| inputs::read_gt(gt_root, &b.image_id))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::with_capacity(values.len());
    for (v, cfg) in values.iter().zip(&configs) {
        let maps = pool.install(|| segment_all(&bundles, &jobs, &weights, &text, cfg, &opts))?;
        let mut cm = ConfusionMatrix::new(text.num_classes(), settings.ignore_index);
        for ((b, m), g) in bundles.iter().zip(&maps).zip(&gts) {
            accumulate(&mut cm, &b.image_id, &m.map, g)?;
        }
        let m = miou(&cm)?.mean;
        println!("{}={v}\tmIoU\t{m:.6}", param.name());
        rows.push((*v, m));
    }

    if let Some(out) = &settings.out {
        fs::create_dir_all(out).map_err(|e| CliError::write(out, e))?;
        let path = out.join(format!("sweep_{}.csv", param.name()));
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
        w.write_record([param.name(), "miou"]).map_err(csv_err)?;
        for (v, m) in rows {
            w.write_record([v.to_string(), format!("{m:.6}")]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::write(&path, e))?;
    }
    Ok(())
}

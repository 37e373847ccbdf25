use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use proxyseg_core::evalkit::{miou, write_iou_csv, MiouReport};
use proxyseg_core::export::read_label_map;
use proxyseg_core::{ConfusionMatrix, LabelMap};

use crate::args::Settings;
use crate::error::CliError;
use crate::inputs;

pub const IOU_CSV: &str = "iou.csv";

/// `(image_id, prediction path)` pairs from a file or a directory of PGMs.
fn predictions(pred: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let stem = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    if pred.is_file() {
        return Ok(vec![(stem(pred), pred.to_owned())]);
    }
    if !pred.is_dir() {
        return Err(CliError::invalid(format!("`pred`: {} does not exist", pred.display())));
    }
    let mut out = Vec::new();
    let entries = fs::read_dir(pred).map_err(|e| CliError::Io(format!("cannot list {}: {e}", pred.display())))?;
    for entry in entries {
        let p = entry.map_err(|e| CliError::Io(e.to_string()))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "pgm") {
            out.push((stem(&p), p));
        }
    }
    if out.is_empty() {
        return Err(CliError::invalid(format!(
            "`pred`: no .pgm files in {}",
            pred.display()
        )));
    }
    out.sort();
    Ok(out)
}

/// Adds one prediction/ground-truth pair, naming the image on failure.
pub fn accumulate(cm: &mut ConfusionMatrix, image_id: &str, pred: &LabelMap, gt: &LabelMap) -> Result<(), CliError> {
    cm.accumulate(pred, gt)
        .map_err(|e| CliError::invalid(format!("{image_id}: {e}")))
}

pub fn print_report(names: &[String], report: &MiouReport) {
    for (name, iou) in names.iter().zip(&report.per_class) {
        match iou {
            Some(v) => println!("{name}\t{v:.6}"),
            None => println!("{name}\tn/a"),
        }
    }
    println!("mIoU\t{:.6}", report.mean);
}

pub fn run(settings: &Settings) -> Result<(), CliError> {
    let pred = Settings::require(&settings.pred, "pred")?;
    let gt = Settings::require(&settings.gt, "gt")?;
    let text = inputs::text(settings)?;
    let mut cm = ConfusionMatrix::new(text.num_classes(), settings.ignore_index);
    for (id, path) in predictions(pred)? {
        let p = read_label_map(&path).map_err(|e| CliError::from(e).in_field("pred"))?;
        let g = inputs::read_gt(gt, &id)?;
        accumulate(&mut cm, &id, &p, &g)?;
    }
    let report = miou(&cm)?;
    print_report(&text.class_names, &report);
    if let Some(out) = &settings.out {
        fs::create_dir_all(out).map_err(|e| CliError::write(out, e))?;
        let path = out.join(IOU_CSV);
        let f = File::create(&path).map_err(|e| CliError::write(&path, e))?;
        write_iou_csv(BufWriter::new(f), &text.class_names, &report).map_err(|e| CliError::write(&path, e))?;
    }
    Ok(())
}

//! The end-to-end run: ground-truth (or user-supplied) masks select
//! fashion items, style transfer restyles the whole frame, and the
//! compositor merges the result back per category.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::annotations::{parse_annotations, rasterize, AnnotationRecord, CategoryTable, PadRecord};
use crate::compositor::{composite, CompositeJob};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::nst::{optimize, FeatureExtractor, NstConfig};
use crate::raster::{BinaryMask, ImageTensor};

/// Environment variable capping pipeline parallelism.
pub const THREADS_ENV: &str = "FITROOM_THREADS";

/// A run request: which image, which fashion items, which styles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub content_image: PathBuf,
    /// Annotation file providing the masks, rasterized per category.
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    /// Alternative mask source: a directory of `<category_id>.png` masks
    /// already in the preprocessed frame (e.g. from an external detector).
    #[serde(default)]
    pub masks_dir: Option<PathBuf>,
    /// Restrict annotation records to one image id.
    #[serde(default)]
    pub image_id: Option<i64>,
    /// Selected category ids, each paired with a style image.
    pub styles: BTreeMap<u32, PathBuf>,
    #[serde(default)]
    pub category_table: Option<PathBuf>,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub nst: Option<NstConfig>,
    #[serde(default = "default_target")]
    pub target_size: usize,
    #[serde(default)]
    pub feather_radius: usize,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

fn default_target() -> usize {
    256
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            offset: 0,
            line: e.line(),
            msg: format!("manifest: {e}"),
        })
    }
}

/// Artifacts written by [`run_pipeline`].
#[derive(Debug)]
pub struct RunOutput {
    pub preprocessed: PathBuf,
    pub composite: PathBuf,
    pub before_detections: PathBuf,
    pub after_detections: PathBuf,
    pub per_category: Vec<(u32, PathBuf)>,
}

fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
}

fn category_masks(
    manifest: &RunManifest,
    records: &[AnnotationRecord],
    pad: &PadRecord,
    table: &CategoryTable,
) -> Result<BTreeMap<u32, BinaryMask>> {
    let target = manifest.target_size;
    let mut masks = BTreeMap::new();
    for &cat in manifest.styles.keys() {
        if let Some(dir) = &manifest.masks_dir {
            let path = dir.join(format!("{cat}.png"));
            let mask = BinaryMask::load_png(&path)?;
            if mask.height != target || mask.width != target {
                return Err(Error::ShapeMismatch(format!(
                    "mask {} is {}x{}, expected {target}x{target}",
                    path.display(),
                    mask.width,
                    mask.height
                )));
            }
            masks.insert(cat, mask);
            continue;
        }
        let polygons: Vec<_> = records
            .iter()
            .filter(|r| r.category_id == cat)
            .flat_map(|r| r.segmentation.iter())
            .map(|p| pad.map_polygon(p))
            .collect();
        if polygons.is_empty() {
            let mut available: Vec<String> = records
                .iter()
                .map(|r| r.category_id)
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .map(|c| match table.name(c) {
                    Some(name) => format!("{c} ({name})"),
                    None => c.to_string(),
                })
                .collect();
            available.dedup();
            return Err(Error::domain(format!(
                "selected category {cat} has no annotations; available: [{}]",
                available.join(", ")
            )));
        }
        masks.insert(cat, rasterize(&polygons, target, target));
    }
    Ok(masks)
}

/// Run the whole pipeline for one manifest. Styled regions are merged in
/// ascending category-id order; pixels outside the union of selected
/// masks stay bit-identical to the preprocessed input when
/// `feather_radius` is 0.
pub fn run_pipeline(manifest: &RunManifest) -> Result<RunOutput> {
    std::fs::create_dir_all(&manifest.output_dir)
        .map_err(|e| Error::io(&manifest.output_dir, e))?;

    let table = match &manifest.category_table {
        Some(path) => CategoryTable::load(path)?,
        None => CategoryTable::modanet_default(),
    };
    let raw = ImageTensor::load_png(&manifest.content_image)?;
    let (pre, pad) = crate::annotations::preprocess(&raw, manifest.target_size)?;

    let records: Vec<AnnotationRecord> = match &manifest.annotations {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_annotations(&bytes, &table)?
                .into_iter()
                .filter(|r| manifest.image_id.map_or(true, |id| r.image_id == id))
                .collect()
        }
        None => Vec::new(),
    };
    if manifest.annotations.is_none() && manifest.masks_dir.is_none() && !manifest.styles.is_empty()
    {
        return Err(Error::domain("manifest needs annotations or masks_dir to build masks"));
    }

    let masks = category_masks(manifest, &records, &pad, &table)?;

    let ex = match &manifest.weights {
        Some(path) => crate::nst::load_extractor(path)?,
        None => FeatureExtractor::reference(manifest.seed),
    };
    let cfg = manifest.nst.clone().unwrap_or_else(|| NstConfig::default_for(&ex));
    cfg.validate()?;

    // One style-transfer job per category, processed concurrently under
    // the FITROOM_THREADS cap.
    let jobs: Vec<(u32, PathBuf)> =
        manifest.styles.iter().map(|(c, p)| (*c, p.clone())).collect();
    let results: Mutex<Vec<Option<Result<(u32, ImageTensor)>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = thread_cap().min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (cat, style_path) = &jobs[i];
                let outcome = (|| {
                    let style_raw = ImageTensor::load_png(style_path)?;
                    let (style, _) =
                        crate::annotations::preprocess(&style_raw, manifest.target_size)?;
                    let run = optimize(&pre, &style, &ex, &cfg)?;
                    Ok((*cat, run.final_image))
                })();
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    let mut stylized: BTreeMap<u32, ImageTensor> = BTreeMap::new();
    for slot in results.into_inner().unwrap() {
        let (cat, img) = slot.expect("every job ran")?;
        stylized.insert(cat, img);
    }

    // merge in ascending category-id order
    let mut merged = pre.clone();
    let mut per_category = Vec::new();
    for (cat, styled) in &stylized {
        let job = CompositeJob {
            original: merged.clone(),
            stylized: styled.clone(),
            mask: masks[cat].clone(),
            feather_radius: manifest.feather_radius,
        };
        merged = composite(&job)?;
        let path = manifest.output_dir.join(format!("styled_cat_{cat:02}.png"));
        styled.save_png(&path)?;
        per_category.push((*cat, path));
    }

    // ASDR-ready dumps: ground-truth boxes stand in for detector output
    // on both sides; an external detector can overwrite the scores.
    let detections: Vec<Detection> = records
        .iter()
        .map(|r| Detection {
            image_id: r.image_id,
            category_id: r.category_id,
            bbox: pad.map_bbox(&r.bbox_xywh()),
            score: 1.0,
            mask_png: None,
            mask: None,
        })
        .collect();
    let before_path = manifest.output_dir.join("detections_before.json");
    let after_path = manifest.output_dir.join("detections_after.json");
    for path in [&before_path, &after_path] {
        let text = serde_json::to_string_pretty(&detections).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }

    let pre_path = manifest.output_dir.join("preprocessed.png");
    pre.save_png(&pre_path)?;
    let composite_path = manifest.output_dir.join("composite.png");
    merged.save_png(&composite_path)?;

    Ok(RunOutput {
        preprocessed: pre_path,
        composite: composite_path,
        before_detections: before_path,
        after_detections: after_path,
        per_category,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_cap_reads_env() {
        // no env set: falls back to available parallelism (>= 1)
        assert!(thread_cap() >= 1);
    }

    #[test]
    fn manifest_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"{"content_image": "c.png", "styles": {"2": "s.png"}, "output_dir": "out"}"#,
        )
        .unwrap();
        let m = RunManifest::load(&path).unwrap();
        assert_eq!(m.target_size, 256);
        assert_eq!(m.feather_radius, 0);
        assert_eq!(m.styles.len(), 1);
        assert!(m.annotations.is_none());
    }
}

//! On-disk dataset: one P6 file per image plus a `dataset.json` manifest.

use std::path::Path;

use rdpm::data::{read_image, write_image, LabeledImage, SyntheticSpec};
use rdpm::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: SyntheticSpec,
    pub items: Vec<DatasetItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetItem {
    pub file: String,
    pub label: usize,
}

pub fn write_dataset(dir: &Path, spec: &SyntheticSpec, items: &[LabeledImage]) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        spec: spec.clone(),
        items: Vec::with_capacity(items.len()),
    };
    for (i, item) in items.iter().enumerate() {
        let file = format!("{i:05}.ppm");
        write_image(dir.join(&file), &item.image)?;
        manifest.items.push(DatasetItem {
            file,
            label: item.label,
        });
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST);
    std::fs::write(&path, json + "\n").map_err(|e| Error::Io { path, source: e })?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledImage>)> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "dataset manifest",
        offset: 0,
        msg: e.to_string(),
    })?;
    let items = manifest
        .items
        .iter()
        .map(|it| {
            if it.label >= manifest.spec.num_classes {
                return Err(Error::Format {
                    what: "dataset manifest",
                    offset: 0,
                    msg: format!(
                        "{}: label {} >= {} classes",
                        it.file, it.label, manifest.spec.num_classes
                    ),
                });
            }
            Ok(LabeledImage {
                image: read_image(dir.join(&it.file))?,
                label: it.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, items))
}

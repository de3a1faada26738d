//! Annotated images, the RLE mask format, dataset manifests and detection
//! dumps.
//!
//! On disk a dataset is a directory holding `manifest.jsonl` (one record
//! per line: `{"image": .., "depth": .., "annotation": ..}`, paths relative
//! to the manifest), 8-bit RGB PNGs, optional 16-bit depth PNGs in
//! millimeters, and one JSON annotation per image.

mod augment;
mod synth;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::geom::{BBox, BinaryMask};
use crate::model::Prediction;

pub use augment::{augment, hflip, inmask_color, median_box_area, rot90, scale_amplifier, zoom_crop, Zoom};
pub use synth::{synth_dataset, synth_orchard};

pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

pub const FRUIT_CLASS: &str = "apple";

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub rgb: RgbImage,
    pub depth: Option<DepthImage>,
    pub instances: Vec<Instance>,
    pub branch_mask: BinaryMask,
}

impl AnnotatedImage {
    pub fn width(&self) -> usize {
        self.rgb.width() as usize
    }

    pub fn height(&self) -> usize {
        self.rgb.height() as usize
    }

    /// Check sizes, box bounds and that every mask lies within its box
    /// grown by one pixel.
    pub fn validate(&self) -> Result<(), String> {
        let (w, h) = (self.width(), self.height());
        if (self.branch_mask.width, self.branch_mask.height) != (w, h) {
            return Err("branch mask size differs from image".into());
        }
        if let Some(d) = &self.depth {
            if (d.width() as usize, d.height() as usize) != (w, h) {
                return Err("depth size differs from image".into());
            }
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if (inst.mask.width, inst.mask.height) != (w, h) {
                return Err(format!("instance {i}: mask size differs from image"));
            }
            if !inst.bbox.within(w as f64, h as f64) {
                return Err(format!("instance {i}: box {:?} out of bounds", inst.bbox));
            }
            if let Some(mb) = inst.mask.bounding_box() {
                let b = &inst.bbox;
                if mb.x < b.x - 1.0 || mb.y < b.y - 1.0 || mb.right() > b.right() + 1.0 || mb.bottom() > b.bottom() + 1.0 {
                    return Err(format!("instance {i}: mask extends beyond its box"));
                }
            }
        }
        Ok(())
    }
}

/// Run-length encoded binary mask: alternating run lengths in row-major
/// order, starting with a (possibly empty) run of zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &v in &mask.data {
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        Self {
            size: [mask.height, mask.width],
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask, String> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().sum();
        if total != (h * w) as u64 {
            return Err(format!("RLE counts sum to {total}, expected {}", h * w));
        }
        let mut data = Vec::with_capacity(h * w);
        for (i, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(BinaryMask { width: w, height: h, data })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    mask: Rle,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    width: usize,
    height: usize,
    instances: Vec<InstanceRecord>,
    branch_mask: Rle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    pub annotation: PathBuf,
}

fn box_array(b: &BBox) -> [f64; 4] {
    [b.x, b.y, b.w, b.h]
}

fn array_box(a: [f64; 4]) -> BBox {
    BBox::new(a[0], a[1], a[2], a[3])
}

pub fn annotation_json(img: &AnnotatedImage) -> String {
    let record = AnnotationRecord {
        width: img.width(),
        height: img.height(),
        instances: img
            .instances
            .iter()
            .map(|i| InstanceRecord {
                class: FRUIT_CLASS.into(),
                bbox: box_array(&i.bbox),
                mask: Rle::encode(&i.mask),
            })
            .collect(),
        branch_mask: Rle::encode(&img.branch_mask),
    };
    serde_json::to_string_pretty(&record).expect("annotation serializes")
}

fn read_annotation(path: &Path) -> Result<(usize, usize, Vec<Instance>, BinaryMask)> {
    let ctx = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rec: AnnotationRecord = serde_json::from_str(&text).map_err(|e| Error::format(&ctx, e.to_string()))?;
    let decode = |r: &Rle, what: &str| -> Result<BinaryMask> {
        if r.size != [rec.height, rec.width] {
            return Err(Error::format(&ctx, format!("{what}: RLE size {:?} differs from image", r.size)));
        }
        r.decode().map_err(|m| Error::format(&ctx, format!("{what}: {m}")))
    };
    let mut instances = Vec::with_capacity(rec.instances.len());
    for (i, inst) in rec.instances.iter().enumerate() {
        if inst.class != FRUIT_CLASS {
            return Err(Error::format(&ctx, format!("instance {i}: unknown class {:?}", inst.class)));
        }
        instances.push(Instance {
            bbox: array_box(inst.bbox),
            mask: decode(&inst.mask, &format!("instance {i}"))?,
        });
    }
    let branch = decode(&rec.branch_mask, "branch_mask")?;
    Ok((rec.width, rec.height, instances, branch))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::format(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Load and validate every record of a manifest, in manifest order.
pub fn load_dataset(manifest: &Path) -> Result<Vec<AnnotatedImage>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            load_record(base, rec).map_err(|e| match e {
                Error::Format { context, message } => Error::format(format!("record {i} ({context})"), message),
                other => other,
            })
        })
        .collect()
}

fn load_record(base: &Path, rec: &ManifestRecord) -> Result<AnnotatedImage> {
    let ann_path = base.join(&rec.annotation);
    let (w, h, instances, branch_mask) = read_annotation(&ann_path)?;
    let rgb = open_image(&base.join(&rec.image))?.into_rgb8();
    let depth = match &rec.depth {
        Some(p) => Some(open_image(&base.join(p))?.into_luma16()),
        None => None,
    };
    let img = AnnotatedImage {
        rgb,
        depth,
        instances,
        branch_mask,
    };
    if (img.width(), img.height()) != (w, h) {
        return Err(Error::format(
            ann_path.display().to_string(),
            format!("annotation size {w}x{h} differs from image {}x{}", img.width(), img.height()),
        ));
    }
    img.validate().map_err(|m| Error::format(ann_path.display().to_string(), m))?;
    Ok(img)
}

/// Write `images` under `dir` with a `manifest.jsonl`; returns the
/// manifest path.
pub fn save_dataset(dir: &Path, images: &[AnnotatedImage]) -> Result<PathBuf> {
    for sub in ["images", "depth", "annotations"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let manifest = dir.join("manifest.jsonl");
    let mut lines = String::new();
    for (i, img) in images.iter().enumerate() {
        let rec = ManifestRecord {
            image: PathBuf::from(format!("images/{i:05}.png")),
            depth: img.depth.as_ref().map(|_| PathBuf::from(format!("depth/{i:05}.png"))),
            annotation: PathBuf::from(format!("annotations/{i:05}.json")),
        };
        save_png(&img.rgb, &dir.join(&rec.image))?;
        if let (Some(d), Some(p)) = (&img.depth, &rec.depth) {
            save_png(d, &dir.join(p))?;
        }
        let ann = dir.join(&rec.annotation);
        fs::write(&ann, annotation_json(img)).map_err(|e| Error::io(&ann, e))?;
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
    }
    let mut f = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(lines.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    mask: Option<Rle>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpRecord {
    width: usize,
    height: usize,
    detections: Vec<DetectionRecord>,
    branch_mask: Rle,
}

/// Per-image detection dump: boxes, scores, RLE rendered masks and the
/// predicted branch mask.
pub fn detection_dump_json(pred: &Prediction) -> String {
    let branch = BinaryMask {
        width: pred.width,
        height: pred.height,
        data: pred.branch_map.iter().map(|&v| v != 0).collect(),
    };
    let rec = DumpRecord {
        width: pred.width,
        height: pred.height,
        detections: pred
            .detections
            .iter()
            .map(|d| DetectionRecord {
                class: FRUIT_CLASS.into(),
                bbox: box_array(&d.bbox),
                score: d.score,
                mask: d.rendered_mask.as_ref().map(Rle::encode),
            })
            .collect(),
        branch_mask: Rle::encode(&branch),
    };
    serde_json::to_string_pretty(&rec).expect("dump serializes")
}

pub fn read_detection_dump(path: &Path) -> Result<Prediction> {
    let ctx = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rec: DumpRecord = serde_json::from_str(&text).map_err(|e| Error::format(&ctx, e.to_string()))?;
    let branch = rec.branch_mask.decode().map_err(|m| Error::format(&ctx, m))?;
    let mut detections = Vec::with_capacity(rec.detections.len());
    for d in rec.detections {
        let mut det = Detection::new(array_box(d.bbox), d.score);
        det.rendered_mask = d.mask.map(|r| r.decode()).transpose().map_err(|m| Error::format(&ctx, m))?;
        detections.push(det);
    }
    Ok(Prediction {
        detections,
        width: rec.width,
        height: rec.height,
        branch_map: branch.data.iter().map(|&v| u8::from(v)).collect(),
        degenerate: 0,
    })
}

/// Ground truth viewed as a perfect prediction (score 1).
pub fn ground_truth_prediction(img: &AnnotatedImage) -> Prediction {
    Prediction {
        detections: img
            .instances
            .iter()
            .map(|i| {
                let mut d = Detection::new(i.bbox, 1.0);
                d.rendered_mask = Some(i.mask.clone());
                d
            })
            .collect(),
        width: img.width(),
        height: img.height(),
        branch_map: img.branch_mask.data.iter().map(|&v| u8::from(v)).collect(),
        degenerate: 0,
    }
}

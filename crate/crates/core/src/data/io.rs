use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use image::{ImageBuffer, Luma, Rgb};

use super::{ImageShape, LabeledDataset};
use crate::error::{Error, Result};

/// Directory searched for full-size corpora.
pub const DATA_DIR_ENV: &str = "RECONBENCH_DATA_DIR";

// 5,000-image MNIST subset (500 per class, sorted by label).
static MNIST5K_IMAGES: &[u8] = include_bytes!("../../data/mnist5k-images-idx3-ubyte.gz");
static MNIST5K_LABELS: &[u8] = include_bytes!("../../data/mnist5k-labels-idx1-ubyte.gz");

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Invalid(format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(b: &[u8], at: usize) -> Result<usize> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]) as usize)
        .ok_or_else(|| Error::Invalid("truncated idx header".into()))
}

fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    if be_u32(images, 0)? != 0x0803 || be_u32(labels, 0)? != 0x0801 {
        return Err(Error::Invalid("not an idx3/idx1 pair".into()));
    }
    let n = be_u32(images, 4)?;
    let (h, w) = (be_u32(images, 8)?, be_u32(images, 12)?);
    if be_u32(labels, 4)? != n {
        return Err(Error::Invalid("idx image/label counts differ".into()));
    }
    let body = images
        .get(16..16 + n * h * w)
        .ok_or_else(|| Error::Invalid("truncated idx images".into()))?;
    let lab = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Invalid("truncated idx labels".into()))?;
    let class_count = lab.iter().copied().max().map_or(1, |m| m as usize + 1).max(10);
    LabeledDataset::from_parts(
        ImageShape::new(h, w, 1),
        class_count,
        body.iter().map(|&p| p as f32 / 255.0).collect(),
        lab.iter().map(|&l| l as usize).collect(),
    )
}

/// Loads an IDX image/label file pair (optionally gzipped).
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let i = maybe_gunzip(fs::read(images).map_err(io_err(images))?)?;
    let l = maybe_gunzip(fs::read(labels).map_err(io_err(labels))?)?;
    parse_idx(&i, &l)
}

/// The bundled 5,000-sample MNIST subset.
pub fn mnist_vendored() -> LabeledDataset {
    let i = maybe_gunzip(MNIST5K_IMAGES.to_vec()).expect("vendored images decompress");
    let l = maybe_gunzip(MNIST5K_LABELS.to_vec()).expect("vendored labels decompress");
    parse_idx(&i, &l).expect("vendored MNIST parses")
}

fn find_in(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

/// Full MNIST training split when `$RECONBENCH_DATA_DIR` holds the IDX files,
/// otherwise the bundled subset.
pub fn mnist() -> Result<LabeledDataset> {
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from) {
        for sub in [dir.join("mnist"), dir.clone()] {
            if let (Some(i), Some(l)) = (
                find_in(&sub, "train-images-idx3-ubyte"),
                find_in(&sub, "train-labels-idx1-ubyte"),
            ) {
                return load_idx(&i, &l);
            }
        }
    }
    Ok(mnist_vendored())
}

/// Registered dataset ids: `mnist` (full set from the data dir, else the
/// bundled subset), `mnist5k` (always the bundled subset) and `cifar10`
/// (binary batches under `$RECONBENCH_DATA_DIR/cifar10` or
/// `cifar-10-batches-bin`).
pub const DATASET_IDS: [&str; 3] = ["mnist", "mnist5k", "cifar10"];

pub fn dataset_by_id(id: &str) -> Result<LabeledDataset> {
    match id {
        "mnist" => mnist(),
        "mnist5k" => Ok(mnist_vendored()),
        "cifar10" => {
            let dir = std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| Error::Invalid(format!("cifar10 needs ${DATA_DIR_ENV}")))?;
            let sub = ["cifar10", "cifar-10-batches-bin"]
                .into_iter()
                .map(|s| dir.join(s))
                .find(|p| p.is_dir())
                .ok_or_else(|| Error::Invalid(format!("no CIFAR-10 batches under {}", dir.display())))?;
            load_cifar10_dir(&sub)
        }
        other => Err(Error::Invalid(format!("unknown dataset id `{other}`"))),
    }
}

/// Reads the CIFAR-10 binary batches (`data_batch_*.bin`) from `dir`.
pub fn load_cifar10_dir(dir: &Path) -> Result<LabeledDataset> {
    let shape = ImageShape::new(32, 32, 3);
    let mut ds = LabeledDataset::empty(shape, 10);
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!("no CIFAR-10 batches in {}", dir.display())));
    }
    let rec = 1 + 3072;
    let mut img = vec![0.0f32; 3072];
    for f in files {
        let bytes = fs::read(&f).map_err(io_err(&f))?;
        if bytes.len() % rec != 0 {
            return Err(Error::Invalid(format!("{} is not a CIFAR batch", f.display())));
        }
        for r in bytes.chunks_exact(rec) {
            // stored CHW, we keep HWC
            for c in 0..3 {
                for p in 0..1024 {
                    img[p * 3 + c] = r[1 + c * 1024 + p] as f32 / 255.0;
                }
            }
            ds.push(&img, r[0] as usize);
        }
    }
    Ok(ds)
}

/// Snaps a value to the 16-bit grid used for lossless PNG storage.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

/// Writes an H×W×C image (C = 1 or 3) as a 16-bit PNG.
pub fn save_png(path: &Path, image: &[f32], shape: ImageShape) -> Result<()> {
    let (w, h) = (shape.width as u32, shape.height as u32);
    let q: Vec<u16> = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let res = match shape.channels {
        1 => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, q).map(|b| b.save(path)),
        3 => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, q).map(|b| b.save(path)),
        c => return Err(Error::Invalid(format!("cannot write {c}-channel PNG"))),
    };
    res.ok_or_else(|| Error::Invalid("image buffer size mismatch".into()))?
        .map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))
}

/// Encodes an H×W×C image (C = 1 or 3) as an in-memory 8-bit PNG.
pub fn encode_png(image: &[f32], shape: ImageShape) -> Result<Vec<u8>> {
    let (w, h) = (shape.width as u32, shape.height as u32);
    let q: Vec<u8> = image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = std::io::Cursor::new(Vec::new());
    let res = match shape.channels {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, q).map(|b| b.write_to(&mut out, image::ImageFormat::Png)),
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, q).map(|b| b.write_to(&mut out, image::ImageFormat::Png)),
        c => return Err(Error::Invalid(format!("cannot write {c}-channel PNG"))),
    };
    res.ok_or_else(|| Error::Invalid("image buffer size mismatch".into()))?
        .map_err(|e| Error::Invalid(format!("encoding PNG: {e}")))?;
    Ok(out.into_inner())
}

/// Reads a PNG into H×W×C floats in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<(Vec<f32>, ImageShape)> {
    let img = image::open(path).map_err(|e| Error::Invalid(format!("reading {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    if gray {
        let b = img.into_luma16();
        Ok((
            b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
            ImageShape::new(h, w, 1),
        ))
    } else {
        let b = img.into_rgb16();
        Ok((
            b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
            ImageShape::new(h, w, 3),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vendored_mnist_is_balanced_and_normalized() {
        let ds = mnist_vendored();
        assert_eq!(ds.len(), 5000);
        assert_eq!(ds.shape(), ImageShape::MNIST);
        for c in 0..10 {
            assert_eq!(ds.class_indices(c).len(), 500);
        }
        assert!(ds.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let mean = ds.pixels().iter().map(|&p| p as f64).sum::<f64>() / ds.pixels().len() as f64;
        assert!((0.1..0.15).contains(&mean), "mean intensity {mean}");
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        for shape in [ImageShape::new(5, 4, 1), ImageShape::new(3, 2, 3)] {
            let img: Vec<f32> = (0..shape.len()).map(|i| quantize((i as f32 * 0.137).fract())).collect();
            let p = dir.path().join(format!("x{}.png", shape.channels));
            save_png(&p, &img, shape).unwrap();
            let (back, s) = load_png(&p).unwrap();
            assert_eq!(s, shape);
            assert_eq!(back, img);
        }
    }

    #[test]
    fn idx_parser_rejects_garbage() {
        assert!(parse_idx(&[0u8; 20], &[0u8; 10]).is_err());
    }
}

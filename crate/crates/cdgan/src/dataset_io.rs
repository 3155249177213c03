//! Folder-per-domain image datasets: `<root>/<domain>/*.png|jpg`.

use std::fs;
use std::path::{Path, PathBuf};

use cdgan_core::data::{denormalize_pixel, normalize_pixel, split_by_name_hash, DomainSplit, MultiDomainDataset, Sample, SplitSpec};
use image::imageops::FilterType;
use image::RgbImage;

use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// `(3, size, size)` pixels in `[-1, 1]`, resized with a triangle filter when
/// the source is not already `size × size`.
pub fn image_to_pixels(img: &RgbImage, size: usize) -> Vec<f32> {
    let resized;
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &resized
    };
    let plane = size * size;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = normalize_pixel(p.0[c] as f64) as f32;
        }
    }
    out
}

/// Inverse of [`image_to_pixels`] for a `(3, size, size)` slice.
pub fn pixels_to_image(pixels: &[f32], size: usize) -> RgbImage {
    let plane = size * size;
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        image::Rgb(std::array::from_fn(|c| denormalize_pixel(pixels[c * plane + i] as f64)))
    })
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    out.sort();
    Ok(out)
}

/// Loads every sub-directory of `root` as a domain (sorted by name). Files
/// that fail to decode are skipped with a warning; a domain left without
/// training images is an error.
pub fn load_dataset(root: &Path, image_size: usize, split: &SplitSpec) -> Result<MultiDomainDataset> {
    split.validate()?;
    let mut domains = Vec::new();
    let mut splits = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut samples = Vec::new();
        for path in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
            match read_image(&path) {
                Ok(img) => samples.push(Sample {
                    name: path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
                    pixels: image_to_pixels(&img, image_size),
                }),
                Err(e) => log::warn!("skipping {e}"),
            }
        }
        let names: Vec<String> = samples.iter().map(|s| s.name.clone()).collect();
        let is_test = split_by_name_hash(&names, split);
        let mut ds = DomainSplit::default();
        for (s, t) in samples.into_iter().zip(is_test) {
            if t {
                ds.test.push(s);
            } else {
                ds.train.push(s);
            }
        }
        log::debug!("domain {name}: {} train, {} test", ds.train.len(), ds.test.len());
        domains.push(name);
        splits.push(ds);
    }
    if domains.is_empty() {
        return Err(Error::Core(cdgan_core::Error::InvalidDataset(format!(
            "{} contains no domain folders",
            root.display()
        ))));
    }
    Ok(MultiDomainDataset::new(domains, 3, image_size, splits)?)
}

/// Writes both partitions of `data` as PNGs in the folder-per-domain layout.
/// Returns the number of files written.
pub fn export_dataset(data: &MultiDomainDataset, root: &Path) -> Result<usize> {
    if data.image_channels() != 3 {
        return Err(Error::Usage("only RGB datasets can be exported".into()));
    }
    let mut written = 0;
    for (d, name) in data.domains().iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let split = data.split(d)?;
        for s in split.train.iter().chain(&split.test) {
            write_image(&dir.join(format!("{}.png", s.name)), &pixels_to_image(&s.pixels, data.image_size()))?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cdgan_core::data::{make_synthetic, SyntheticDomainSpec};

    fn spec() -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            n_domains: 3,
            images_per_domain: 10,
            image_size: 16,
            seed: 4,
            test_fraction: 0.2,
        }
    }

    #[test]
    fn export_then_load_is_lossless() {
        let data = make_synthetic(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(export_dataset(&data, dir.path()).unwrap(), 30);
        let back = load_dataset(dir.path(), 16, &SplitSpec { test_fraction: 0.2 }).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn undecodable_files_are_skipped() {
        let data = make_synthetic(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&data, dir.path()).unwrap();
        fs::write(dir.path().join("domain_0").join("broken.png"), b"not an image").unwrap();
        fs::write(dir.path().join("domain_0").join("notes.txt"), b"ignored").unwrap();
        let back = load_dataset(dir.path(), 16, &SplitSpec::default()).unwrap();
        assert_eq!(back.total_images(), 30);
    }

    #[test]
    fn resizes_to_the_requested_size() {
        let dir = tempfile::tempdir().unwrap();
        for d in ["a", "b"] {
            fs::create_dir(dir.path().join(d)).unwrap();
            let img = RgbImage::from_pixel(40, 24, image::Rgb([255, 0, 0]));
            write_image(&dir.path().join(d).join("x.png"), &img).unwrap();
        }
        let data = load_dataset(dir.path(), 8, &SplitSpec { test_fraction: 0.0 }).unwrap();
        let s = &data.train(0).unwrap()[0];
        assert_eq!(s.pixels.len(), 3 * 64);
        assert!(s.pixels[..64].iter().all(|v| *v == 1.0));
        assert!(s.pixels[64..].iter().all(|v| *v == -1.0));
    }

    #[test]
    fn missing_root_is_an_io_error() {
        let err = load_dataset(Path::new("/nonexistent/cdgan"), 8, &SplitSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}

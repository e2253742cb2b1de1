use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::DynamicImage;

use super::BackboneConfig;
use crate::corpus::ArtworkRecord;
use crate::error::{Error, Result};

/// Channel-normalized square image in height x width x channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    pub edge: usize,
    pub data: Vec<f32>,
}

impl ImageArray {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.edge, self.edge, 3)
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.edge + x) * 3 + c]
    }

    /// Stacks arrays into a `(batch, 3, edge, edge)` tensor.
    pub fn batch_tensor(arrays: &[&ImageArray], device: &Device) -> Result<Tensor> {
        let edge = arrays.first().map(|a| a.edge).ok_or(Error::Empty("image batch"))?;
        let plane = edge * edge;
        let mut chw = Vec::with_capacity(arrays.len() * 3 * plane);
        for a in arrays {
            if a.edge != edge {
                return Err(Error::DimensionMismatch {
                    expected: edge,
                    actual: a.edge,
                });
            }
            for c in 0..3 {
                chw.extend(a.data.chunks_exact(3).map(|px| px[c]));
            }
        }
        Ok(Tensor::from_vec(chw, (arrays.len(), 3, edge, edge), device)?)
    }
}

/// Resizes the shorter side to `input_edge`, center-crops to a square,
/// replicates grayscale to three channels and applies per-channel
/// `(x / 255 - mean) / std`.
pub fn preprocess(image: &DynamicImage, config: &BackboneConfig) -> Result<ImageArray> {
    let (w, h) = (image.width(), image.height());
    if w < 32 || h < 32 {
        return Err(Error::MalformedInput(format!(
            "image is {w}x{h}, both sides must be at least 32 px"
        )));
    }
    let edge = config.input_edge;
    let rgb = image.to_rgb8();
    let (nw, nh) = if w <= h {
        (edge, ((h as u64 * edge as u64 + w as u64 / 2) / w as u64).max(edge as u64) as u32)
    } else {
        (((w as u64 * edge as u64 + h as u64 / 2) / h as u64).max(edge as u64) as u32, edge)
    };
    let resized = if (nw, nh) == (w, h) {
        rgb
    } else {
        image::imageops::resize(&rgb, nw, nh, FilterType::Triangle)
    };
    let x0 = (nw - edge) / 2;
    let y0 = (nh - edge) / 2;
    let edge_us = edge as usize;
    let mut data = Vec::with_capacity(edge_us * edge_us * 3);
    for y in 0..edge {
        for x in 0..edge {
            let px = resized.get_pixel(x0 + x, y0 + y);
            for c in 0..3 {
                let v = px[c] as f32 / 255.0;
                data.push((v - config.mean[c]) / config.std[c]);
            }
        }
    }
    Ok(ImageArray {
        edge: edge_us,
        data,
    })
}

pub fn preprocess_file(path: &Path, record: &str, config: &BackboneConfig) -> Result<ImageArray> {
    let img = image::open(path).map_err(|e| Error::Decode {
        record: record.to_owned(),
        reason: e.to_string(),
    })?;
    preprocess(&img, config).map_err(|e| match e {
        Error::MalformedInput(reason) => Error::Decode {
            record: record.to_owned(),
            reason,
        },
        other => other,
    })
}

/// Loads and preprocesses record images relative to a corpus root,
/// optionally memoizing the arrays.
pub struct ImageStore {
    root: PathBuf,
    config: BackboneConfig,
    cache: Option<Mutex<HashMap<String, Arc<ImageArray>>>>,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>, config: &BackboneConfig) -> Self {
        Self {
            root: root.into(),
            config: config.clone(),
            cache: None,
        }
    }

    pub fn cached(root: impl Into<PathBuf>, config: &BackboneConfig) -> Self {
        Self {
            cache: Some(Mutex::new(HashMap::new())),
            ..Self::new(root, config)
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn load(&self, record: &ArtworkRecord) -> Result<Arc<ImageArray>> {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lock().unwrap().get(&record.id) {
                return Ok(hit.clone());
            }
        }
        let array = Arc::new(preprocess_file(
            &self.root.join(&record.path),
            &record.id,
            &self.config,
        )?);
        if let Some(cache) = &self.cache {
            cache
                .lock()
                .unwrap()
                .insert(record.id.clone(), array.clone());
        }
        Ok(array)
    }

    pub fn batch(&self, records: &[&ArtworkRecord], device: &Device) -> Result<Tensor> {
        let arrays = records
            .iter()
            .map(|r| self.load(r))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageArray> = arrays.iter().map(|a| a.as_ref()).collect();
        ImageArray::batch_tensor(&refs, device)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn cfg(edge: u32) -> BackboneConfig {
        BackboneConfig {
            input_edge: edge,
            ..Default::default()
        }
    }

    #[test]
    fn output_shape() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(512, 512, Rgb([10, 20, 30])));
        let a = preprocess(&img, &cfg(224)).unwrap();
        assert_eq!(a.shape(), (224, 224, 3));
        assert_eq!(a.data.len(), 224 * 224 * 3);
        let wide = DynamicImage::ImageRgb8(RgbImage::new(300, 90));
        assert_eq!(preprocess(&wide, &cfg(64)).unwrap().shape(), (64, 64, 3));
    }

    #[test]
    fn grayscale_replicated() {
        let mut g = GrayImage::new(40, 40);
        for (x, y, p) in g.enumerate_pixels_mut() {
            *p = Luma([((x * 7 + y * 3) % 256) as u8]);
        }
        let mut c = cfg(32);
        c.mean = [0.0; 3];
        c.std = [1.0; 3];
        let a = preprocess(&DynamicImage::ImageLuma8(g), &c).unwrap();
        for px in a.data.chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn matching_mean_gives_zeros() {
        let gray = 128u8;
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(100, 80, Rgb([gray; 3])));
        let mut c = cfg(64);
        c.mean = [gray as f32 / 255.0; 3];
        let a = preprocess(&img, &c).unwrap();
        assert!(a.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn too_small_and_undecodable() {
        let img = DynamicImage::ImageRgb8(RgbImage::new(31, 100));
        assert!(preprocess(&img, &cfg(32)).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        match preprocess_file(&p, "rec-7", &cfg(32)) {
            Err(Error::Decode { record, .. }) => assert_eq!(record, "rec-7"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batch_tensor_is_chw() {
        let a = ImageArray {
            edge: 2,
            data: (0..12).map(|v| v as f32).collect(),
        };
        let t = ImageArray::batch_tensor(&[&a], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 2]);
        let red: Vec<f32> = t.get(0).unwrap().get(0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(red, vec![0.0, 3.0, 6.0, 9.0]);
    }
}

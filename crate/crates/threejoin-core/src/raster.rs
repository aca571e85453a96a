//! 8-bit raster images: the on-disk and in-memory pixel representation
//! shared by the dataset, edge-map, and network modules.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// An 8-bit image, single channel (grayscale) or three channel (RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize, // 1 or 3
    data: Vec<u8>,   // row-major, interleaved channels
}

impl Raster {
    pub fn new_gray(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            channels: 1,
            data: vec![0; width * height],
        }
    }

    pub fn new_rgb(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            channels: 3,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_gray_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut r = Raster::new_gray(width, height);
        for y in 0..height {
            for x in 0..width {
                r.data[y * width + x] = f(x, y);
            }
        }
        r
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get_gray(&self, x: usize, y: usize) -> u8 {
        debug_assert_eq!(self.channels, 1);
        self.data[y * self.width + x]
    }

    pub fn set_gray(&mut self, x: usize, y: usize, v: u8) {
        debug_assert_eq!(self.channels, 1);
        self.data[y * self.width + x] = v;
    }

    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        debug_assert_eq!(self.channels, 3);
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get_rgb(&self, x: usize, y: usize) -> [u8; 3] {
        debug_assert_eq!(self.channels, 3);
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Luminance as f64, without any rescaling (values in 0..=255).
    /// Gradient-based code wants raw intensities so that integer inputs
    /// stay exactly representable.
    pub fn to_gray_f64(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                let v = match self.channels {
                    1 => self.data[y * self.width + x] as f64,
                    _ => {
                        let [r, g, b] = self.get_rgb(x, y);
                        0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
                    }
                };
                out[[y, x]] = v;
            }
        }
        out
    }

    /// Channels-first float tensor in [0,1] with exactly `channels_out`
    /// channels. Grayscale inputs are replicated across channels; RGB
    /// inputs collapse to luminance when a single channel is requested.
    pub fn to_chw_f64(&self, channels_out: usize) -> Array3<f64> {
        let mut out = Array3::zeros((channels_out, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                match (self.channels, channels_out) {
                    (1, _) => {
                        let v = self.data[y * self.width + x] as f64 / 255.0;
                        for c in 0..channels_out {
                            out[[c, y, x]] = v;
                        }
                    }
                    (3, 3) => {
                        let rgb = self.get_rgb(x, y);
                        for c in 0..3 {
                            out[[c, y, x]] = rgb[c] as f64 / 255.0;
                        }
                    }
                    (3, _) => {
                        let [r, g, b] = self.get_rgb(x, y);
                        let v =
                            (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0;
                        for c in 0..channels_out {
                            out[[c, y, x]] = v;
                        }
                    }
                    _ => unreachable!("rasters are 1- or 3-channel"),
                }
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Raster> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(match img {
            DynamicImage::ImageLuma8(g) => Raster {
                width: g.width() as usize,
                height: g.height() as usize,
                channels: 1,
                data: g.into_raw(),
            },
            other => {
                let rgb = other.to_rgb8();
                Raster {
                    width: rgb.width() as usize,
                    height: rgb.height() as usize,
                    channels: 3,
                    data: rgb.into_raw(),
                }
            }
        })
    }

    /// Save as PNG. Writes to a temp file in the same directory and renames,
    /// so concurrent readers never observe a partial file.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("png.tmp");
        let save = |tmp: &Path| -> image::ImageResult<()> {
            match self.channels {
                1 => GrayImage::from_raw(
                    self.width as u32,
                    self.height as u32,
                    self.data.clone(),
                )
                .expect("buffer matches dimensions")
                .save_with_format(tmp, image::ImageFormat::Png),
                _ => RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                    .expect("buffer matches dimensions")
                    .save_with_format(tmp, image::ImageFormat::Png),
            }
        };
        save(&tmp).map_err(|e| Error::Image {
            path: tmp.clone(),
            message: e.to_string(),
        })?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

//! Dense row-major pixel grids and their PNG encodings.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb as ImgRgb};

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

/// A `width x height` grid stored row-major (`y * width + x`).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type RgbImage = Grid<Rgb>;
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "grid data has {} elements, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_dims(&self, dims: (usize, usize), context: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                context: context.to_string(),
                expected: dims,
                found: self.dims(),
            });
        }
        Ok(())
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: ImageBuffer<ImgRgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
            let c = img.get(x as usize, y as usize);
            ImgRgb([quantize(c[0]), quantize(c[1]), quantize(c[2])])
        });
    write_atomically(path, |tmp| buf.save_with_format(tmp, image::ImageFormat::Png))
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        [
            p[0] as f64 / 255.0,
            p[1] as f64 / 255.0,
            p[2] as f64 / 255.0,
        ]
    }))
}

/// Single-channel 8-bit PNG; `true` is stored as 255.
pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    save_gray8_png(path, &mask.map(|&b| if b { 255 } else { 0 }))
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    Ok(load_gray8_png(path)?.map(|&v| v >= 128))
}

pub fn save_gray8_png(path: &Path, grid: &Grid<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(grid.width as u32, grid.height as u32, |x, y| {
            Luma([*grid.get(x as usize, y as usize)])
        });
    write_atomically(path, |tmp| buf.save_with_format(tmp, image::ImageFormat::Png))
}

pub fn load_gray8_png(path: &Path) -> Result<Grid<u8>> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_fn(w, h, |x, y| img.get_pixel(x as u32, y as u32).0[0]))
}

pub fn save_gray16_png(path: &Path, grid: &Grid<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(grid.width as u32, grid.height as u32, |x, y| {
            Luma([*grid.get(x as usize, y as usize)])
        });
    write_atomically(path, |tmp| buf.save_with_format(tmp, image::ImageFormat::Png))
}

pub fn load_gray16_png(path: &Path) -> Result<Grid<u16>> {
    let img = open_image(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_fn(w, h, |x, y| img.get_pixel(x as u32, y as u32).0[0]))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::image(path, e))
}

/// Write through a temporary sibling and rename into place.
pub(crate) fn write_atomically<E>(
    path: &Path,
    write: impl FnOnce(&Path) -> std::result::Result<(), E>,
) -> Result<()>
where
    E: Into<WriteError>,
{
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let tmp = match path.extension() {
        // keep the extension so format sniffing by extension still works
        Some(ext) => tmp.with_extension(format!("tmp.{}", ext.to_string_lossy())),
        None => tmp,
    };
    write(&tmp).map_err(|e| match e.into() {
        WriteError::Io(e) => Error::io(path, e),
        WriteError::Image(e) => Error::image(path, e),
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) enum WriteError {
    Io(std::io::Error),
    Image(image::ImageError),
}

impl From<std::io::Error> for WriteError {
    fn from(e: std::io::Error) -> Self {
        WriteError::Io(e)
    }
}

impl From<image::ImageError> for WriteError {
    fn from(e: image::ImageError) -> Self {
        WriteError::Image(e)
    }
}

pub(crate) fn write_bytes_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomically(path, |tmp| std::fs::write(tmp, bytes))
}

pub(crate) fn write_json_atomically<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_bytes_atomically(path, text.as_bytes())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_png_roundtrip_is_exact_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Grid::from_fn(7, 5, |x, y| {
            [
                (x * 31 % 256) as f64 / 255.0,
                (y * 53 % 256) as f64 / 255.0,
                ((x + y) * 17 % 256) as f64 / 255.0,
            ]
        });
        let p = dir.path().join("a.png");
        save_rgb_png(&p, &img).unwrap();
        let back = load_rgb_png(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn u16_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::from_fn(9, 4, |x, y| (x * 1000 + y) as u16);
        let p = dir.path().join("s.png");
        save_gray16_png(&p, &g).unwrap();
        assert_eq!(load_gray16_png(&p).unwrap(), g);
    }

    #[test]
    fn missing_png_is_reported_with_path() {
        let err = load_rgb_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}

use thiserror::Error;

/// Value written into pixels vacated by geometric ops and covered by cutout.
pub const FILL_VALUE: u8 = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("image has zero size ({width}x{height})")]
    ZeroSize { width: usize, height: usize },
    #[error("unsupported channel count {0}, expected 1 or 3")]
    Channels(usize),
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    Length { expected: usize, actual: usize },
}

/// Row-major interleaved 8-bit raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroSize { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::Length {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(
        width: usize,
        height: usize,
        channels: usize,
        value: u8,
    ) -> Result<Self, ImageError> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Copies pixel `(sx, sy)` of `src` into `(x, y)` of `self`, or writes the
    /// fill value when the source coordinate lies outside the image.
    #[inline]
    pub(crate) fn copy_or_fill(&mut self, src: &Image, x: usize, y: usize, sx: i64, sy: i64) {
        let inside = sx >= 0 && sy >= 0 && (sx as usize) < src.width && (sy as usize) < src.height;
        for c in 0..self.channels {
            let v = if inside {
                src.get(sx as usize, sy as usize, c)
            } else {
                FILL_VALUE
            };
            self.set(x, y, c, v);
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert_eq!(
            Image::new(0, 3, 1, vec![]),
            Err(ImageError::ZeroSize {
                width: 0,
                height: 3
            })
        );
        assert_eq!(
            Image::new(2, 2, 2, vec![0; 8]),
            Err(ImageError::Channels(2))
        );
        assert_eq!(
            Image::new(2, 2, 3, vec![0; 11]),
            Err(ImageError::Length {
                expected: 12,
                actual: 11
            })
        );
    }

    #[test]
    fn indexing_is_row_major_interleaved() {
        let img = Image::new(3, 2, 3, (0..18).collect()).unwrap();
        assert_eq!(img.get(0, 0, 0), 0);
        assert_eq!(img.get(1, 0, 2), 5);
        assert_eq!(img.get(0, 1, 0), 9);
        assert_eq!(img.get(2, 1, 2), 17);
    }
}

use crate::error::{shape_err, Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel class indices, `[n, h, w]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 {
            return Err(shape_err!("label map extents must be positive, got {n}x{h}x{w}"));
        }
        if data.len() != n * h * w {
            return Err(shape_err!(
                "label map {n}x{h}x{w} needs {} values, got {}",
                n * h * w,
                data.len()
            ));
        }
        Ok(LabelMap { shape: [n, h, w], data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Result<Self> {
        Self::new(n, h, w, vec![value; n * h * w])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        let [_, h, w] = self.shape;
        self.data[(n * h + y) * w + x]
    }

    /// Every value is `< num_classes` or equal to `ignore`.
    pub fn validate(&self, num_classes: usize, ignore: u8) -> Result<()> {
        let [_, h, w] = self.shape;
        match self.data.iter().position(|&v| v != ignore && v as usize >= num_classes) {
            None => Ok(()),
            Some(i) => Err(Error::Data(format!(
                "label value {} at (sample {}, row {}, col {}) is not a class in 0..{num_classes}",
                self.data[i],
                i / (h * w),
                (i / w) % h,
                i % w
            ))),
        }
    }

    /// Concatenates single-sample maps along the batch axis.
    pub fn stack(maps: &[&LabelMap]) -> Result<LabelMap> {
        let first = maps.first().ok_or_else(|| shape_err!("cannot stack zero label maps"))?;
        let [_, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if m.shape[1..] != [h, w] {
                return Err(shape_err!(
                    "label maps differ in extent: {:?} vs {:?}",
                    first.shape,
                    m.shape
                ));
            }
            n += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        LabelMap::new(n, h, w, data)
    }
}

//! Dense scalar voxel grids and their file formats.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::MetricError;

/// Dense grid of values in `[0, 1]`, linearized with x fastest, then y,
/// then z: `index = x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct VoxelGrid {
    dims: [usize; 3],
    values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    dims: [usize; 3],
    values: Vec<f32>,
}

impl TryFrom<RawGrid> for VoxelGrid {
    type Error = MetricError;

    fn try_from(r: RawGrid) -> Result<Self, Self::Error> {
        VoxelGrid::new(r.dims, r.values)
    }
}

impl From<VoxelGrid> for RawGrid {
    fn from(g: VoxelGrid) -> Self {
        RawGrid {
            dims: g.dims,
            values: g.values,
        }
    }
}

const VOXF_MAGIC: &[u8; 4] = b"VOXF";

impl VoxelGrid {
    pub fn new(dims: [usize; 3], values: Vec<f32>) -> Result<Self, MetricError> {
        let expected = dims.iter().product::<usize>();
        if values.len() != expected {
            return Err(MetricError::InvalidGrid(format!(
                "{} values for dims {:?} (expected {expected})",
                values.len(),
                dims
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MetricError::InvalidGrid(format!(
                "value {v} outside [0, 1]"
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.iter().product()],
        }
    }

    /// Fills the grid from `f(x, y, z)`, clamping results into `[0, 1]`.
    pub fn from_fn<F>(dims: [usize; 3], f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> f32,
    {
        let [nx, ny, nz] = dims;
        let mut values = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = f(x, y, z);
                    values.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Self { dims, values }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    /// Value at signed coordinates; zero outside the grid.
    #[inline]
    pub fn get_or_zero(&self, x: i64, y: i64, z: i64) -> f32 {
        let [nx, ny, nz] = self.dims.map(|d| d as i64);
        if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
            0.0
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.values[i] = v.clamp(0.0, 1.0);
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Non-overlapping `k×k×k` max pooling; partial blocks at the high end
    /// pool over the cells they contain.
    pub fn max_pool(&self, k: usize) -> Self {
        let out_dims = self.dims.map(|d| d.div_ceil(k));
        let mut out = Self::zeros(out_dims);
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let i = out.index(x / k, y / k, z / k);
                    out.values[i] = out.values[i].max(self.get(x, y, z));
                }
            }
        }
        out
    }

    /// Copy with a border of `width` zero cells on every side.
    pub fn padded(&self, width: usize) -> Self {
        let w = width as i64;
        Self::from_fn(self.dims.map(|d| d + 2 * width), |x, y, z| {
            self.get_or_zero(x as i64 - w, y as i64 - w, z as i64 - w)
        })
    }

    /// Grid with axes permuted so that output axis `a` is input axis `perm[a]`.
    pub fn permute_axes(&self, perm: [usize; 3]) -> Self {
        let dims = perm.map(|a| self.dims[a]);
        Self::from_fn(dims, |x, y, z| {
            let out = [x, y, z];
            let mut src = [0; 3];
            for a in 0..3 {
                src[perm[a]] = out[a];
            }
            self.get(src[0], src[1], src[2])
        })
    }

    /// Writes the raw format: `"VOXF"`, `nx ny nz` as little-endian u32,
    /// then the values as little-endian f32 in linear order.
    pub fn write_voxf<W: Write>(&self, mut w: W) -> Result<(), MetricError> {
        w.write_all(VOXF_MAGIC)?;
        for d in self.dims {
            let d = u32::try_from(d)
                .map_err(|_| MetricError::InvalidGrid(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_voxf<R: Read>(mut r: R) -> Result<Self, MetricError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != VOXF_MAGIC {
            return Err(MetricError::Parse("missing VOXF magic".into()));
        }
        let dim = |i: usize| {
            u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
        };
        let dims = [dim(0), dim(1), dim(2)];
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| MetricError::Parse("grid size overflows".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 4 {
            return Err(MetricError::Parse(format!(
                "expected {} data bytes, found {}",
                count * 4,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dims, values)
    }

    /// Reads a binvox file. Binvox stores runs of `(value, count)` bytes in
    /// an order where y varies fastest, then z, then x.
    pub fn read_binvox<R: BufRead>(mut r: R) -> Result<Self, MetricError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if !line.starts_with("#binvox") {
            return Err(MetricError::Parse("missing #binvox header".into()));
        }
        let mut dims = None;
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(MetricError::Parse(
                    "binvox header ended before 'data'".into(),
                ));
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("dim") => {
                    let d: Vec<usize> = parts
                        .map(|p| {
                            p.parse()
                                .map_err(|_| MetricError::Parse(format!("bad dim '{p}'")))
                        })
                        .collect::<Result<_, _>>()?;
                    if d.len() != 3 {
                        return Err(MetricError::Parse("dim needs three values".into()));
                    }
                    dims = Some([d[0], d[1], d[2]]);
                }
                Some("data") => break,
                _ => {}
            }
        }
        let dims = dims.ok_or_else(|| MetricError::Parse("binvox header lacks dim".into()))?;
        let [nx, nz, ny] = dims;
        let total = nx * ny * nz;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut grid = Self::zeros([nx, ny, nz]);
        let mut pos = 0usize;
        for run in bytes.chunks_exact(2) {
            let (value, count) = (run[0], run[1] as usize);
            if pos + count > total {
                return Err(MetricError::Parse("binvox runs exceed the grid".into()));
            }
            if value != 0 {
                for i in pos..pos + count {
                    let (x, z, y) = (i / (nz * ny), (i / ny) % nz, i % ny);
                    grid.set(x, y, z, 1.0);
                }
            }
            pos += count;
        }
        if pos != total {
            return Err(MetricError::Parse(format!(
                "binvox runs cover {pos} of {total} voxels"
            )));
        }
        Ok(grid)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, MetricError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        match path.extension().and_then(|e| e.to_str()) {
            Some("binvox") => Self::read_binvox(file),
            _ => Self::read_voxf(file),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), MetricError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_voxf(&mut file)?;
        file.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linearization_is_x_fastest() {
        let g = VoxelGrid::from_fn([2, 3, 4], |x, y, z| (x + 2 * y + 6 * z) as f32 / 24.0);
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 2);
        assert_eq!(g.index(0, 0, 1), 6);
        assert!(g.values().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(VoxelGrid::new([1, 1, 2], vec![0.0, 1.5]).is_err());
        assert!(VoxelGrid::new([1, 1, 2], vec![0.0]).is_err());
        assert!(VoxelGrid::new([1, 1, 2], vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn voxf_round_trip() {
        let g = VoxelGrid::from_fn([3, 2, 5], |x, y, z| {
            ((x * 7 + y * 3 + z) % 10) as f32 / 10.0
        });
        let mut buf = Vec::new();
        g.write_voxf(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VOXF");
        assert_eq!(buf.len(), 16 + 4 * 30);
        assert_eq!(VoxelGrid::read_voxf(&buf[..]).unwrap(), g);
        assert!(VoxelGrid::read_voxf(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn binvox_order() {
        // 2³ grid with only the voxel at x=1, y=0, z=1 set. Its binvox index
        // is x*4 + z*2 + y = 6.
        let mut file = b"#binvox 1\ndim 2 2 2\ntranslate 0 0 0\nscale 1\ndata\n".to_vec();
        file.extend_from_slice(&[0, 6, 1, 1, 0, 1]);
        let g = VoxelGrid::read_binvox(&file[..]).unwrap();
        assert_eq!(g.sum(), 1.0);
        assert_eq!(g.get(1, 0, 1), 1.0);
        file.extend_from_slice(&[0, 1]);
        assert!(VoxelGrid::read_binvox(&file[..]).is_err());
    }

    #[test]
    fn max_pool_and_padding() {
        let mut g = VoxelGrid::zeros([8, 8, 8]);
        g.set(5, 6, 7, 0.75);
        let p = g.max_pool(4);
        assert_eq!(p.dims(), [2, 2, 2]);
        assert_eq!(p.get(1, 1, 1), 0.75);
        assert_eq!(p.sum(), 0.75);
        let q = g.padded(1);
        assert_eq!(q.dims(), [10, 10, 10]);
        assert_eq!(q.get(6, 7, 8), 0.75);
    }

    #[test]
    fn axis_permutation() {
        let g = VoxelGrid::from_fn([2, 3, 4], |x, y, z| (x + 2 * y + 6 * z) as f32 / 24.0);
        let p = g.permute_axes([2, 0, 1]);
        assert_eq!(p.dims(), [4, 2, 3]);
        assert_eq!(p.get(3, 1, 2), g.get(1, 2, 3));
    }
}

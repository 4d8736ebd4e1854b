//! Dataset ingestion, synthetic scenes, file formats and run configuration.

use std::path::Path;

use thiserror::Error;

use crate::geom::GeomError;
use crate::grid::Grid;
use crate::projection::{ProjectionError, ProjectionMaps};
use crate::scalar::Real;

pub mod config;
pub mod image;
pub mod kitti;
pub mod synthetic;
pub mod tensor;

pub use config::{Manifest, ManifestEntry, RunConfig};
pub use kitti::{prepare_pair, read_point_cloud, write_point_cloud, FramePair, RawPair};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticScene};
pub use tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error: {0}")]
    Format(String),
    #[error("image dimensions {width}x{height} are not positive multiples of 4")]
    BadDims { width: usize, height: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ::image::ImageError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

impl From<TensorError> for DataError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Io(e) => DataError::Io(e),
            TensorError::Format(m) => DataError::Format(m),
        }
    }
}

/// Largest point index an `f32` payload stores exactly.
const MAX_EXACT_INDEX: i64 = 1 << 24;

/// Saves maps as one `[3, H, W]` tensor: range, reflectance, point index.
pub fn save_maps<T: Real>(path: &Path, maps: &ProjectionMaps<T>) -> Result<(), DataError> {
    let (w, h) = (maps.width(), maps.height());
    let mut data = Vec::with_capacity(3 * w * h);
    data.extend(maps.range().as_slice().iter().map(|v| v.as_f64() as f32));
    data.extend(maps.reflectance().as_slice().iter().map(|v| v.as_f64() as f32));
    for &i in maps.index().as_slice() {
        if i >= MAX_EXACT_INDEX {
            return Err(DataError::Format(format!("point index {i} is not representable")));
        }
        data.push(i as f32);
    }
    tensor::save_tensors(path, &[Tensor::new(vec![3, h, w], data)?])?;
    Ok(())
}

/// Inverse of [`save_maps`]; the maps are checked against `cloud_len`.
pub fn load_maps<T: Real>(path: &Path, cloud_len: usize) -> Result<ProjectionMaps<T>, DataError> {
    let tensors = tensor::load_tensors(path)?;
    let [t] = <[Tensor; 1]>::try_from(tensors)
        .map_err(|t| DataError::Format(format!("expected 1 map tensor, found {}", t.len())))?;
    let &[3, h, w] = t.dims() else {
        return Err(DataError::Format(format!("map tensor has dims {:?}, expected [3, H, W]", t.dims())));
    };
    let data = t.into_data();
    let plane = |k: usize| data[k * w * h..(k + 1) * w * h].to_vec();
    let range = Grid::from_vec(w, h, plane(0).into_iter().map(|v| T::lit(v as f64)).collect()).expect("plane size");
    let refl = Grid::from_vec(w, h, plane(1).into_iter().map(|v| T::lit(v as f64)).collect()).expect("plane size");
    let index = Grid::from_vec(w, h, plane(2).into_iter().map(|v| v as i64).collect()).expect("plane size");
    Ok(ProjectionMaps::from_parts(range, refl, index, cloud_len)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{project_to_maps, LidarPoint, PointCloud, ProjectionConfig};

    #[test]
    fn maps_roundtrip() {
        let pts: Vec<_> = (0..300)
            .map(|i| {
                let a = i as f64 * 0.021;
                LidarPoint::new(8.0 * a.cos(), 8.0 * a.sin(), 0.002 * i as f64 - 0.3, (i % 7) as f64 / 7.0)
            })
            .collect();
        let cloud = PointCloud::new(pts, None).unwrap();
        let cfg = ProjectionConfig {
            width: 128,
            height: 8,
            ..ProjectionConfig::kitti()
        };
        let maps = project_to_maps(&cloud.clone(), &cfg).unwrap();
        let maps32: ProjectionMaps<f32> = {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.pprt");
            save_maps(&path, &maps).unwrap();
            load_maps(&path, cloud.len()).unwrap()
        };
        assert_eq!(maps32.index(), maps.index());
        for (a, b) in maps32.range().as_slice().iter().zip(maps.range().as_slice()) {
            assert_eq!(*a, *b as f32);
        }
    }

    #[test]
    fn maps_reject_wrong_rank() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pprt");
        tensor::save_tensors(&path, &[Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap()]).unwrap();
        assert!(matches!(load_maps::<f64>(&path, 1), Err(DataError::Format(_))));
    }
}

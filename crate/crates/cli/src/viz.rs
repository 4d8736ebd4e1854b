//! Match visualization: camera image above the reflectance map, with green
//! lines for RANSAC inliers and red lines for the rejected matches.

use image::{Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;
use xmreg_core::matching::CorrespondenceSet;
use xmreg_core::projection::ProjectionMaps;

const INLIER: Rgb<u8> = Rgb([0, 255, 0]);
const OUTLIER: Rgb<u8> = Rgb([255, 0, 0]);

/// `inlier_mask` may be shorter than the set (e.g. empty when no pose was
/// found); missing entries count as outliers.
pub fn match_canvas(
    image: &RgbImage,
    maps: &ProjectionMaps<f64>,
    set: &CorrespondenceSet<f64>,
    inlier_mask: &[bool],
) -> RgbImage {
    let (iw, ih) = image.dimensions();
    let (mw, mh) = (maps.width() as u32, maps.height() as u32);
    let mut canvas = RgbImage::new(iw.max(mw), ih + mh);
    image::imageops::replace(&mut canvas, image, 0, 0);
    let refl = maps.reflectance_preview();
    for (x, y, p) in refl.enumerate_pixels() {
        canvas.put_pixel(x, ih + y, Rgb([p.0[0]; 3]));
    }
    // Outliers first so inliers stay visible where lines cross.
    for pass_inliers in [false, true] {
        for (i, c) in set.items.iter().enumerate() {
            let inlier = inlier_mask.get(i).copied().unwrap_or(false);
            if inlier != pass_inliers {
                continue;
            }
            let a = (c.image_pixel.0 as f32, c.image_pixel.1 as f32);
            let b = (c.lidar_pixel.0 as f32, (ih as usize + c.lidar_pixel.1) as f32);
            draw_line_segment_mut(&mut canvas, a, b, if inlier { INLIER } else { OUTLIER });
        }
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use xmreg_core::grid::Grid;
    use xmreg_core::matching::Correspondence;

    #[test]
    fn inliers_green_outliers_red() {
        let image = RgbImage::from_pixel(16, 8, Rgb([0, 0, 255]));
        let maps = ProjectionMaps::from_parts(
            Grid::filled(32, 4, -1.0),
            Grid::filled(32, 4, -1.0),
            Grid::filled(32, 4, -1),
            1,
        )
        .unwrap();
        let corr = |img: (usize, usize), map: (usize, usize)| Correspondence {
            image_pixel: img,
            lidar_pixel: map,
            point: Vector3::zeros(),
            confidence: 1.0,
        };
        let set = CorrespondenceSet {
            items: vec![corr((1, 1), (1, 1)), corr((10, 2), (20, 3))],
            dropped: 0,
        };
        let canvas = match_canvas(&image, &maps, &set, &[true]);
        assert_eq!(canvas.dimensions(), (32, 12));
        assert_eq!(*canvas.get_pixel(1, 1), INLIER);
        assert_eq!(*canvas.get_pixel(1, 9), INLIER);
        assert_eq!(*canvas.get_pixel(10, 2), OUTLIER);
        assert_eq!(*canvas.get_pixel(20, 11), OUTLIER);
        assert_eq!(*canvas.get_pixel(15, 7), Rgb([0, 0, 255]));
    }
}

use crate::error::{Error, Result};

/// Image-relative bounding box, all coordinates in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoundingBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(inside(self.x0) && inside(self.y0) && inside(self.x1) && inside(self.y1)) {
            return Err(Error::Data(format!("box {self:?} leaves the unit square")));
        }
        if self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(Error::Data(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = w * h;
        inter / (self.area() + other.area() - inter)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

/// Side length of the spatial grid for a spatial vector of `dim` values.
pub fn grid_side(dim: usize) -> Option<usize> {
    let cells = dim / 2;
    let side = (cells as f64).sqrt().round() as usize;
    (dim.is_multiple_of(2) && side > 1 && side * side == cells).then_some(side)
}

/// Positional encoding of a box: a `side x side` grid of points spanning
/// the box edge to edge, each contributing its image-relative `(x, y)`,
/// flattened row by row. `side = 16` gives 512 values.
pub fn encode_spatial(b: &BoundingBox, side: usize) -> Result<Vec<f32>> {
    b.validate()?;
    if side < 2 {
        return Err(Error::Config(format!("spatial grid side {side} < 2")));
    }
    let last = (side - 1) as f64;
    let mut out = Vec::with_capacity(2 * side * side);
    for i in 0..side {
        let y = b.y0 + (b.y1 - b.y0) * i as f64 / last;
        for j in 0..side {
            let x = b.x0 + (b.x1 - b.x0) * j as f64 / last;
            out.push(x as f32);
            out.push(y as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_image_box_corners() {
        let v = encode_spatial(&BoundingBox::new(0., 0., 1., 1.).unwrap(), 16).unwrap();
        assert_eq!(v.len(), 512);
        assert_eq!(&v[..2], &[0., 0.]);
        assert_eq!(&v[510..], &[1., 1.]);
    }

    #[test]
    fn values_stay_inside_box() {
        let v = encode_spatial(&BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap(), 16).unwrap();
        assert!(v.iter().all(|&x| (0.25..=0.75).contains(&x)));
    }

    #[test]
    fn disjoint_boxes_differ_everywhere() {
        let a = encode_spatial(&BoundingBox::new(0.0, 0.0, 0.4, 0.4).unwrap(), 16).unwrap();
        let b = encode_spatial(&BoundingBox::new(0.5, 0.6, 0.9, 1.0).unwrap(), 16).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(0.3, 0.1, 0.3, 0.5).is_err());
        assert!(BoundingBox::new(0.1, 0.5, 0.3, 0.5).is_err());
        assert!(BoundingBox::new(-0.1, 0.0, 0.3, 0.5).is_err());
    }

    #[test]
    fn grid_side_of_dims() {
        assert_eq!(grid_side(512), Some(16));
        assert_eq!(grid_side(32), Some(4));
        assert_eq!(grid_side(30), None);
    }
}
